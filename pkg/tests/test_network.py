import numpy as np
import pytest

from cme import network as N
from cme import tensor as T
from cme.synthshapes import Box, SupportItem, make_support_mask, sample_episode
from cme.tensor import ShapeError, Tape, Tensor
from oracles import conv_shift_sum, query_features, support_prototype


def zero_biases(params):
    out = params.copy()
    for k in out:
        if k.endswith("_b"):
            out[k] = Tensor(np.zeros_like(out[k].data), requires_grad=True)
    return out


@pytest.fixture(scope="module")
def support_item(split):
    return sample_episode(4, split, "base", 1, 0).support[0]


class TestParams:
    def test_groups_and_widths(self, init_params):
        assert init_params.filter_width == 32
        assert init_params["filter_w"].shape == (32, 64)
        assert init_params["head_w"].shape == (6, 64, 1, 1)
        assert set(init_params.group("s_")) == {f"s_conv{i}_{p}" for i in range(1, 5) for p in "wb"}
        assert len(init_params.group("q_")) == 6
        assert init_params.all_finite()

    def test_init_deterministic(self):
        a, b = N.init_params(3), N.init_params(3)
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)


class TestSupportEncoder:
    def test_zero_input_zero_prototype(self, init_params):
        params = zero_biases(init_params)
        item = SupportItem(Tensor(np.zeros((3, 64, 64))), Tensor(np.zeros((1, 64, 64))), 0, Box(0, 0, 8, 8, 0))
        np.testing.assert_array_equal(N.encode_support(item, params).data, np.zeros(64))

    def test_matches_manual_composition(self, init_params, support_item):
        v = N.encode_support(support_item, init_params).data
        ref = support_prototype(support_item.image.data, support_item.mask.data, init_params)
        np.testing.assert_allclose(v, ref, atol=1e-10, rtol=1e-10)

    def test_pixels_off_argmax_path_do_not_matter(self, init_params):
        # non-negative centre-tap kernels make the encoder monotone with one pooling
        # tree per output; a dim background then stays below the bright object even
        # after doubling
        params = zero_biases(init_params)
        for k in params.group("s_"):
            if k.endswith("_w"):
                w = np.zeros_like(params[k].data)
                w[:, :, 1, 1] = np.abs(params[k].data[:, :, 1, 1])
                params[k] = Tensor(w)
        rng = np.random.default_rng(0)
        image = rng.uniform(0.0, 0.05, size=(3, 64, 64))
        image[:, 10:30, 10:30] = rng.uniform(0.8, 1.0, size=(3, 20, 20))
        mask = make_support_mask(Box(10, 10, 30, 30, 0)).data
        x = Tensor(np.concatenate([image, mask]), requires_grad=True)
        with Tape():
            v = N.encode_support_input(x, params)
            y = T.sum(v)
        T.backward(y, inputs=[x])
        background = np.ones((3, 64, 64), dtype=bool)
        background[:, 10:30, 10:30] = False
        untouched = (x.grad[:3] == 0) & background
        assert untouched.mean() > 0.5
        doubled = image.copy()
        doubled[untouched] *= 2.0
        v2 = N.encode_support_input(Tensor(np.concatenate([doubled, mask])), params)
        np.testing.assert_array_equal(v.data, v2.data)

    def test_gradient_reaches_support_image(self, init_params, support_item):
        image = Tensor(support_item.image.data, requires_grad=True)
        with Tape():
            y = T.sum(T.square(N.encode_support_input(N.support_input(image, support_item.mask), init_params)))
        T.backward(y, inputs=[image])
        assert np.abs(image.grad).max() > 0

    def test_batched_matches_single(self, init_params, split):
        items = sample_episode(2, split, "base", 1, 0).support[:3]
        batch = N.encode_supports(T.stack([s.image for s in items]), T.stack([s.mask for s in items]), init_params)
        for i, s in enumerate(items):
            np.testing.assert_allclose(batch.data[i], N.encode_support(s, init_params).data, atol=1e-12)

    def test_mask_shape_mismatch(self, init_params):
        with pytest.raises(ShapeError):
            N.support_input(Tensor(np.zeros((3, 64, 64))), Tensor(np.zeros((1, 32, 32))))


class TestFilter:
    def test_zero(self, init_params):
        params = init_params.copy()
        params["filter_b"] = Tensor(np.zeros(32))
        np.testing.assert_array_equal(N.filter_features(Tensor(np.zeros(64)), params).data, np.zeros(32))

    def test_identity_padded(self, init_params, rng):
        params = init_params.copy()
        params["filter_w"] = Tensor(np.eye(32, 64))
        params["filter_b"] = Tensor(np.zeros(32))
        v = rng.normal(size=64)
        np.testing.assert_array_equal(N.filter_features(Tensor(v), params).data, v[:32])

    def test_matches_oracle(self, init_params, rng):
        v = rng.normal(size=64)
        w, b = init_params["filter_w"].data, init_params["filter_b"].data
        ref = [sum(w[i, j] * v[j] for j in range(64)) + b[i] for i in range(32)]
        np.testing.assert_allclose(N.filter_features(Tensor(v), init_params).data, ref, atol=1e-12)

    def test_width_mismatch(self, init_params):
        with pytest.raises(ShapeError):
            N.filter_features(Tensor(np.zeros(32)), init_params)


class TestPrototypeSet:
    def test_k_one_mean_is_the_prototype(self, init_params, rng):
        raw = Tensor(rng.normal(size=(3, 64)))
        ps = N.build_prototype_set(raw, [4, 1, 2], init_params)
        assert ps.class_ids == [1, 2, 4]
        np.testing.assert_array_equal(ps.means[4].data, raw.data[0])

    def test_identical_items(self, init_params, rng):
        v = rng.normal(size=64)
        ps = N.build_prototype_set(Tensor(np.stack([v, v])), [0, 0], init_params)
        np.testing.assert_allclose(ps.means[0].data, v, atol=1e-15)

    def test_k_three_means(self, init_params, rng):
        raw = rng.normal(size=(6, 64))
        labels = [0, 1, 0, 1, 0, 1]
        ps = N.build_prototype_set(Tensor(raw), labels, init_params)
        for c in (0, 1):
            rows = raw[[i for i, l in enumerate(labels) if l == c]]
            np.testing.assert_allclose(ps.means[c].data, rows.mean(axis=0), atol=1e-12)
            filtered = rows @ init_params["filter_w"].data.T + init_params["filter_b"].data
            np.testing.assert_allclose(ps.filtered_means[c].data, filtered.mean(axis=0), atol=1e-12)
            assert len(ps.members[c]) == 3

    def test_permutation_invariance(self, init_params, rng):
        raw = rng.normal(size=(3, 64))
        a = N.build_prototype_set(Tensor(raw), [5, 5, 5], init_params)
        b = N.build_prototype_set(Tensor(raw[[2, 0, 1]]), [5, 5, 5], init_params)
        np.testing.assert_allclose(a.means[5].data, b.means[5].data, atol=1e-12)
        np.testing.assert_allclose(a.filtered_means[5].data, b.filtered_means[5].data, atol=1e-12)

    def test_empty_rejected(self, init_params):
        with pytest.raises(ValueError):
            N.prototypes_from_items([], init_params)


class TestQueryAndHead:
    def test_zero_image_zero_map(self, init_params):
        params = zero_biases(init_params)
        f = N.encode_query(Tensor(np.zeros((3, 64, 64))), params)
        assert f.shape == (N.PROTO_WIDTH, 8, 8)
        np.testing.assert_array_equal(f.data, np.zeros((64, 8, 8)))

    def test_query_matches_manual_composition(self, init_params, rng):
        image = rng.uniform(size=(3, 64, 64))
        np.testing.assert_allclose(N.encode_query(Tensor(image), init_params).data,
                                   query_features(image, init_params), atol=1e-10, rtol=1e-10)

    def test_query_shape_rejected(self, init_params):
        with pytest.raises(ShapeError):
            N.encode_query(Tensor(np.zeros((3, 32, 32))), init_params)

    def test_ones_prototype_is_identity(self, init_params, rng):
        f = Tensor(rng.normal(size=(64, 8, 8)))
        out = N.predict_class_branch(f, Tensor(np.ones(64)), init_params)
        raw = T.conv2d(f, init_params["head_w"], init_params["head_b"], padding=0)
        np.testing.assert_array_equal(out.data, raw.data)

    def test_zero_prototype_zero_bias(self, init_params, rng):
        params = zero_biases(init_params)
        out = N.predict_class_branch(Tensor(rng.normal(size=(64, 8, 8))), Tensor(np.zeros(64)), params)
        np.testing.assert_array_equal(out.data, np.zeros((6, 8, 8)))

    def test_branch_matches_oracle(self, init_params, rng):
        f, mu = rng.normal(size=(64, 8, 8)), rng.normal(size=64)
        ref = conv_shift_sum(f * mu[:, None, None], init_params["head_w"].data, init_params["head_b"].data, 0)
        out = N.predict_class_branch(Tensor(f), Tensor(mu), init_params)
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_width_mismatch(self, init_params):
        with pytest.raises(ShapeError):
            N.predict_class_branch(Tensor(np.zeros((64, 8, 8))), Tensor(np.zeros(32)), init_params)

    def test_predict_stacks_branches(self, init_params, split):
        ep = sample_episode(1, split, "base", 1, 2)
        ps = N.prototypes_from_items(ep.support, init_params)
        pred = N.predict(N.encode_query(T.stack([q.image for q in ep.query]), init_params), ps, init_params)
        assert pred.shape == (len(ps.class_ids), 2, 6, 8, 8)

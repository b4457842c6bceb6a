"""Support/query encoders, feature filter and grid prediction head."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .synthshapes import SupportItem
from .tensor import DTYPE, ShapeError, Tensor

PROTO_WIDTH = 64
SUPPORT_CHANNELS = (4, 16, 32, 64, 64)
QUERY_CHANNELS = (3, 16, 32, 64)
HEAD_OUTPUTS = 6  # obj, tx, ty, tw, th, cls
GRID = 8
LEAK = 0.1
OBJ_PRIOR_BIAS = -4.0


class ModelParams(OrderedDict):
    """Named parameter tensors, grouped by prefix.

    ``s_*`` support encoder, ``q_*`` query encoder, ``filter_*`` the fully
    connected feature filter and ``head_*`` the prediction head.
    """

    GROUPS = ("s_", "q_", "filter_", "head_")

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.items() if k.startswith(prefix)}

    @property
    def filter_width(self) -> int:
        return self["filter_w"].shape[0]

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for k, v in self.items():
            out[k] = Tensor(v.data.copy(), requires_grad=v.requires_grad)
        return out

    def zero_grad(self) -> None:
        T.zero_grad(self.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(v.data).all() for v in self.values())


def init_params(seed: int, filter_width: Optional[int] = None) -> ModelParams:
    """He-normal convolution weights, zero biases and a low objectness prior."""
    filter_width = PROTO_WIDTH // 2 if filter_width is None else filter_width
    rng = np.random.default_rng(seed)
    params = ModelParams()

    def conv(name, c_out, c_in, k):
        std = np.sqrt(2.0 / ((1 + LEAK ** 2) * c_in * k * k))
        params[name + "_w"] = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True)
        params[name + "_b"] = Tensor(np.zeros(c_out), requires_grad=True)

    for i, (ci, co) in enumerate(zip(SUPPORT_CHANNELS[:-1], SUPPORT_CHANNELS[1:]), start=1):
        conv(f"s_conv{i}", co, ci, 3)
    for i, (ci, co) in enumerate(zip(QUERY_CHANNELS[:-1], QUERY_CHANNELS[1:]), start=1):
        conv(f"q_conv{i}", co, ci, 3)
    params["filter_w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / PROTO_WIDTH), size=(filter_width, PROTO_WIDTH)),
                                requires_grad=True)
    params["filter_b"] = Tensor(np.zeros(filter_width), requires_grad=True)
    params["head_w"] = Tensor(rng.normal(0.0, 0.01, size=(HEAD_OUTPUTS, PROTO_WIDTH, 1, 1)), requires_grad=True)
    bias = np.zeros(HEAD_OUTPUTS)
    bias[0] = OBJ_PRIOR_BIAS
    params["head_b"] = Tensor(bias, requires_grad=True)
    return params


def _block(x: Tensor, params: ModelParams, name: str) -> Tensor:
    x = T.conv2d(x, params[name + "_w"], params[name + "_b"], padding=1)
    # leaky ReLU is increasing, so pooling first gives the same values on a quarter of the pixels
    return T.leaky_relu(T.max_pool2(x), LEAK)


def support_input(image: Tensor, mask: Tensor) -> Tensor:
    """Concatenate the mask as a fourth channel (works batched or single)."""
    axis = 0 if image.ndim == 3 else 1
    if image.shape[axis + 1:] != mask.shape[axis + 1:]:
        raise ShapeError(f"support image {image.shape} and mask {mask.shape} differ spatially")
    return T.concat([image, mask], axis=axis)


def encode_support_input(x: Tensor, params: ModelParams) -> Tensor:
    for i in range(1, len(SUPPORT_CHANNELS)):
        x = _block(x, params, f"s_conv{i}")
    return T.global_max_pool(x)


def encode_support(item: SupportItem, params: ModelParams) -> Tensor:
    """Raw prototype v = GMP(f_S(image ⊕ mask)), a [64] vector."""
    return encode_support_input(support_input(item.image, item.mask), params)


def encode_supports(images: Tensor, masks: Tensor, params: ModelParams) -> Tensor:
    """Batched prototypes for [N,3,H,W] images and [N,1,H,W] masks -> [N,64]."""
    return encode_support_input(support_input(images, masks), params)


def filter_features(v: Tensor, params: ModelParams) -> Tensor:
    if v.shape[-1] != PROTO_WIDTH:
        raise ShapeError(f"filter_features expects width {PROTO_WIDTH}, got {v.shape}")
    return T.fully_connected(v, params["filter_w"], params["filter_b"])


@dataclass
class PrototypeSet:
    class_ids: list[int]
    raw: Tensor  # [N,64], rows grouped as listed in ``members``
    filtered: Optional[Tensor]  # [N,F] or None when filtering is skipped
    members: dict[int, list[int]]  # class -> row indices
    means: dict[int, Tensor]  # class -> μ [64]
    filtered_means: dict[int, Tensor]  # class -> μ′ [F]

    def raw_protos(self, c: int) -> Tensor:
        return T.getitem(self.raw, np.asarray(self.members[c]))

    def filtered_protos(self, c: int) -> Tensor:
        return T.getitem(self.filtered, np.asarray(self.members[c]))

    def margin_inputs(self, filtered: bool = True) -> tuple[list[Tensor], list[Tensor]]:
        """Per-class (prototypes, mean) pairs in the space the margin loss uses."""
        protos, means = [], []
        for c in self.class_ids:
            if filtered:
                protos.append(self.filtered_protos(c))
                means.append(self.filtered_means[c])
            else:
                protos.append(self.raw_protos(c))
                means.append(self.means[c])
        return protos, means


def group_members(class_ids: Sequence[int]) -> dict[int, list[int]]:
    members: dict[int, list[int]] = {}
    for i, c in enumerate(class_ids):
        members.setdefault(int(c), []).append(i)
    return members


def build_prototype_set(raw: Tensor, class_ids: Sequence[int], params: ModelParams,
                        filtered: bool = True) -> PrototypeSet:
    """Per-class means of raw and (optionally) filtered prototypes.

    ``raw`` holds one support prototype per row, labelled by ``class_ids``.
    """
    if raw.ndim != 2 or raw.shape[0] != len(class_ids):
        raise ShapeError(f"{raw.shape[0] if raw.ndim else 0} prototypes for {len(class_ids)} labels")
    members = group_members(class_ids)
    if not members:
        raise ValueError("cannot build prototypes from an empty support set")
    fv = filter_features(raw, params) if filtered else None
    means, fmeans = {}, {}
    for c, rows in members.items():
        idx = np.asarray(rows)
        means[c] = T.mean(T.getitem(raw, idx), axis=0)
        if fv is not None:
            fmeans[c] = T.mean(T.getitem(fv, idx), axis=0)
    return PrototypeSet(sorted(members), raw, fv, members, means, fmeans)


def prototypes_from_items(items: Sequence[SupportItem], params: ModelParams, filtered: bool = True) -> PrototypeSet:
    if not items:
        raise ValueError("cannot build prototypes from an empty support set")
    images = T.stack([s.image for s in items])
    masks = T.stack([s.mask for s in items])
    return build_prototype_set(encode_supports(images, masks, params), [s.class_id for s in items], params, filtered)


def encode_query(image: Tensor, params: ModelParams) -> Tensor:
    """F^Q: [3,64,64] -> [64,8,8] (or batched [N,3,64,64] -> [N,64,8,8])."""
    if image.shape[-3:] != (3, GRID * 8, GRID * 8):
        raise ShapeError(f"query image must be [3,64,64], got {image.shape}")
    x = image
    for i in range(1, len(QUERY_CHANNELS)):
        x = _block(x, params, f"q_conv{i}")
    return x


def predict_class_branch(features: Tensor, mu: Tensor, params: ModelParams) -> Tensor:
    """Head applied to the query map reweighted channel-wise by the raw class mean."""
    if mu.shape != (features.shape[-3],):
        raise ShapeError(f"prototype {mu.shape} does not match {features.shape[-3]} feature channels")
    return T.conv2d(T.channel_scale(features, mu), params["head_w"], params["head_b"], padding=0)


def predict(features: Tensor, protos: PrototypeSet, params: ModelParams) -> Tensor:
    """Stacked predictions over class branches: [C, N, 6, 8, 8] for batched features."""
    return T.stack([predict_class_branch(features, protos.means[c], params) for c in protos.class_ids])

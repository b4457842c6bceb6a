"""Detection loss, class-margin statistics and the max-margin ratio loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .network import GRID
from .synthshapes import GRID_CELL, Box, center_cell
from .tensor import Tensor

EPS = 1e-8
DEGENERATE_SCALE = 1e8
DEGENERATE_OFFSET = 1e4
IMAGE_SIZE = GRID * GRID_CELL


@dataclass
class MarginStats:
    d_intra: dict[int, float]
    d_inter: dict[int, float]
    pair_bounds: dict[tuple[int, int], tuple[float, float]] = field(default_factory=dict)

    @property
    def mean_intra(self) -> float:
        return float(np.mean(list(self.d_intra.values())))

    @property
    def min_inter(self) -> float:
        return float(min(self.d_inter.values()))

    @property
    def mean_inter(self) -> float:
        return float(np.mean(list(self.d_inter.values())))

    def mean_bounds(self) -> tuple[float, float]:
        if not self.pair_bounds:
            return float("nan"), float("nan")
        lows, highs = zip(*self.pair_bounds.values())
        return float(np.mean(lows)), float(np.mean(highs))


@dataclass
class LossBreakdown:
    l_cls: float
    l_bbx: float
    l_obj: float
    l_det: float
    l_mrg: float
    total: float
    lam: float
    degenerate: bool = False


def _as_tensor_rows(protos) -> Tensor:
    if isinstance(protos, Tensor):
        return protos if protos.ndim == 2 else T.reshape(protos, (1, -1))
    protos = list(protos)
    if not protos:
        raise ValueError("intra-class distance of an empty prototype set is undefined")
    return T.stack([T.as_tensor(p) for p in protos])


def intra_class_distance_t(protos: Tensor, mean: Tensor) -> Tensor:
    """Σ_j ||v′_j − μ′||² as a differentiable scalar; ``protos`` is [K, D]."""
    k = protos.shape[0]
    diff = T.sub(protos, T.expand_rows(mean, k))
    return T.sum(T.square(diff))


def intra_class_distance(protos, mean, check_tol: float = 1e-9) -> float:
    rows = _as_tensor_rows(protos)
    if rows.shape[0] == 0:
        raise ValueError("intra-class distance of an empty prototype set is undefined")
    mean = T.as_tensor(mean)
    if check_tol is not None and np.max(np.abs(rows.data.mean(axis=0) - mean.data)) > check_tol:
        raise ValueError("mean is inconsistent with the prototypes")
    return intra_class_distance_t(rows, mean).item()


def inter_class_distance_t(means: Sequence[Tensor]) -> Tensor:
    """Per class, the minimum squared distance to any other class mean, as [C]."""
    if len(means) < 2:
        raise ValueError("inter-class distance needs at least two classes")
    return T.min_offdiag(T.pairwise_sq_dists(T.stack(list(means))))


def inter_class_distance(means: Mapping[int, object]) -> dict[int, float]:
    keys = sorted(means)
    if len(keys) < 2:
        raise ValueError("inter-class distance needs at least two classes")
    d = inter_class_distance_t([T.as_tensor(means[k]) for k in keys]).data
    return {k: float(v) for k, v in zip(keys, d)}


def margin_bounds(pair_inter: float, intra_i: float, intra_j: float) -> tuple[float, float]:
    """Lower and upper bound of the margin between two classes."""
    return pair_inter - intra_i - intra_j, pair_inter


def margin_stats(protos: Mapping[int, object], means: Mapping[int, object]) -> MarginStats:
    """Numeric statistics for per-class prototype rows and their means."""
    keys = sorted(means)
    intra = {c: intra_class_distance(protos[c], means[c], check_tol=None) for c in keys}
    inter = inter_class_distance(means)
    stacked = np.stack([np.asarray(T.as_tensor(means[c]).data) for c in keys])
    pair = T.pairwise_sq_dists(Tensor(stacked)).data
    bounds = {}
    for a, ca in enumerate(keys):
        for b, cb in enumerate(keys):
            if a != b:
                bounds[(ca, cb)] = margin_bounds(float(pair[a, b]), intra[ca], intra[cb])
    return MarginStats(intra, inter, bounds)


def margin_stats_from_set(protos, filtered: bool = True) -> MarginStats:
    """MarginStats of a :class:`~cme.network.PrototypeSet`."""
    rows, means = protos.margin_inputs(filtered)
    keys = protos.class_ids
    return margin_stats({c: r.detach() for c, r in zip(keys, rows)}, {c: m.detach() for c, m in zip(keys, means)})


def max_margin_loss_t(protos: Sequence[Tensor], means: Sequence[Tensor]) -> tuple[Tensor, bool]:
    """ΣD_intra / ΣD_inter over classes; ``protos[i]`` is [K_i, D], ``means[i]`` is [D].

    When the summed inter-class distance is not above ``EPS`` the ratio is
    replaced by ``1e8·ΣD_intra + 1e4`` and the degenerate flag is raised.
    """
    intra = T.stack([intra_class_distance_t(p, m) for p, m in zip(protos, means)])
    s_intra = T.sum(intra)
    s_inter = T.sum(inter_class_distance_t(means))
    if s_inter.item() <= EPS:
        return T.add(T.mul(s_intra, DEGENERATE_SCALE), DEGENERATE_OFFSET), True
    return T.div(s_intra, s_inter), False


def max_margin_loss(stats: MarginStats) -> tuple[float, bool]:
    s_intra = math.fsum(stats.d_intra.values())
    s_inter = math.fsum(stats.d_inter.values())
    if s_inter <= EPS:
        return DEGENERATE_SCALE * s_intra + DEGENERATE_OFFSET, True
    return s_intra / s_inter, False


# ---------------------------------------------------------------------------
# detection


@dataclass
class DetectionTargets:
    """Dense targets for predictions shaped [C, N, 6, 8, 8]."""

    obj: np.ndarray  # [C,N,8,8] in {0,1}
    pos: tuple  # (branch, image, row, col) index arrays of positive cells
    box: np.ndarray  # [P,4] fx, fy, w/64, h/64 per positive
    cls: np.ndarray  # [P] branch index of the true class


def build_targets(boxes_per_image: Sequence[Sequence[Box]], branch_classes: Sequence[int]) -> DetectionTargets:
    """Assign each box to the cell holding its centre, in its class branch.

    When two boxes of one class share a cell, the first in list order wins.
    """
    branch_of = {c: i for i, c in enumerate(branch_classes)}
    n = len(boxes_per_image)
    obj = np.zeros((len(branch_classes), n, GRID, GRID))
    bi, ii, rr, cc, tb, tc = [], [], [], [], [], []
    for img, boxes in enumerate(boxes_per_image):
        for b in boxes:
            if b.class_id not in branch_of:
                raise ValueError(f"box class {b.class_id} has no prediction branch")
            cx, cy = b.center
            if not (0 <= cx < IMAGE_SIZE and 0 <= cy < IMAGE_SIZE):
                raise ValueError(f"box centre ({cx}, {cy}) lies outside the canvas")
            row, col = center_cell(b)
            br = branch_of[b.class_id]
            if obj[br, img, row, col]:
                continue
            obj[br, img, row, col] = 1.0
            bi.append(br)
            ii.append(img)
            rr.append(row)
            cc.append(col)
            tb.append((cx / GRID_CELL - col, cy / GRID_CELL - row, b.width / IMAGE_SIZE, b.height / IMAGE_SIZE))
            tc.append(br)
    pos = tuple(np.asarray(a, dtype=np.intp) for a in (bi, ii, rr, cc))
    return DetectionTargets(obj, pos, np.asarray(tb, dtype=float).reshape(-1, 4), np.asarray(tc, dtype=np.intp))


def detection_loss(pred: Tensor, boxes_per_image: Sequence[Sequence[Box]], branch_classes: Sequence[int]):
    """(l_cls, l_bbx, l_obj) for stacked predictions [C, N, 6, 8, 8].

    Each term is summed over cells and branches and divided by the number of
    query images.
    """
    c, n = pred.shape[0], pred.shape[1]
    if pred.shape[2:] != (6, GRID, GRID) or c != len(branch_classes) or n != len(boxes_per_image):
        raise T.ShapeError(f"predictions {pred.shape} do not match {c} branches x {len(boxes_per_image)} images")
    tg = build_targets(boxes_per_image, branch_classes)
    scale = 1.0 / max(n, 1)
    l_obj = T.mul(T.sum(T.bce_with_logits(pred[:, :, 0], tg.obj)), scale)
    bi, ii, rr, cc = tg.pos
    if bi.size == 0:
        zero = T.mul(T.sum(pred[:, :, 1]), 0.0)
        return zero, T.mul(T.sum(pred[:, :, 2]), 0.0), l_obj
    # box terms only in the positive cell of the matching branch
    reg = T.sigmoid(pred[bi, ii, 1:5, rr, cc])  # [P,4]
    l_bbx = T.mul(T.sum(T.square(T.sub(reg, T.Tensor(tg.box)))), scale)
    # class logits of every branch at each positive cell
    logits = pred[:, ii, 5, rr, cc]  # [C,P]
    logp = T.log_softmax(logits, axis=0)
    l_cls = T.mul(T.neg(T.sum(logp[tg.cls, np.arange(bi.size)])), scale)
    return l_cls, l_bbx, l_obj


def combined_loss(l_cls: float, l_bbx: float, l_obj: float, l_mrg: float, lam: float,
                  degenerate: bool = False) -> LossBreakdown:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    l_det = l_cls + l_bbx + l_obj
    return LossBreakdown(l_cls, l_bbx, l_obj, l_det, l_mrg, l_det + lam * l_mrg, lam, degenerate)

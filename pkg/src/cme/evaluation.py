"""Detection decoding, IoU/NMS/AP50 and margin diagnostics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import losses as L
from . import network as N
from . import tensor as T
from .network import GRID, ModelParams
from .synthshapes import (GRID_CELL, Box, ClassSplit, box_iou, derive_seed, render_query, render_support,
                          shot_pool)
from .tensor import Tensor

IMAGE_SIZE = GRID * GRID_CELL
EVAL_SEED_OFFSET = 1_000_000
TAG_EVAL_QUERY, TAG_EVAL_SUPPORT = 201, 203
QUERIES_PER_EPISODE = 8

iou = box_iou


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int
    image_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _logit(p: float) -> float:
    p = min(max(p, 1e-9), 1.0 - 1e-9)
    return math.log(p / (1.0 - p))


def encode_box(box: Box, confidence: float = 20.0) -> tuple[int, int, np.ndarray]:
    """Inverse of the decoder: (row, col, [obj, tx, ty, tw, th]) for one box."""
    cx, cy = box.center
    row, col = int(cy // GRID_CELL), int(cx // GRID_CELL)
    vals = np.array([confidence, _logit(cx / GRID_CELL - col), _logit(cy / GRID_CELL - row),
                     _logit(box.width / IMAGE_SIZE), _logit(box.height / IMAGE_SIZE)])
    return row, col, vals


def decode_detections(pred, class_ids: Sequence[int], score_threshold: float = 0.05,
                      image_id: int = 0) -> list[Detection]:
    """Detections from per-branch grids [C, 6, 8, 8] of a single image.

    The score of a cell in branch ``c`` is ``sigmoid(obj) * softmax(cls)[c]``,
    the softmax taken across branches at that cell.
    """
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError(f"score_threshold must lie in [0, 1], got {score_threshold}")
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=float)
    if p.shape != (len(class_ids), 6, GRID, GRID):
        raise T.ShapeError(f"expected predictions of shape ({len(class_ids)}, 6, {GRID}, {GRID}), got {p.shape}")
    obj = _sigmoid(p[:, 0])
    logits = p[:, 5]
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    cls = e / e.sum(axis=0, keepdims=True)
    score = obj * cls
    fx, fy, fw, fh = (_sigmoid(p[:, i]) for i in range(1, 5))
    out = []
    for b, r, c in zip(*np.nonzero(score >= score_threshold)):
        cx = (c + fx[b, r, c]) * GRID_CELL
        cy = (r + fy[b, r, c]) * GRID_CELL
        w = fw[b, r, c] * IMAGE_SIZE
        h = fh[b, r, c] * IMAGE_SIZE
        x0, x1 = max(cx - w / 2.0, 0.0), min(cx + w / 2.0, float(IMAGE_SIZE))
        y0, y1 = max(cy - h / 2.0, 0.0), min(cy + h / 2.0, float(IMAGE_SIZE))
        if x1 <= x0 or y1 <= y0:
            continue
        out.append(Detection(Box(float(x0), float(y0), float(x1), float(y1), int(class_ids[b])),
                             float(min(score[b, r, c], 1.0)), int(class_ids[b]), image_id))
    return out


def _nms_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].class_id,
                                                   dets[i].box.y0, dets[i].box.x0, i))


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class, per-image suppression, highest score first."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    kept: list[Detection] = []
    for i in _nms_order(dets):
        d = dets[i]
        if all(k.class_id != d.class_id or k.image_id != d.image_id or iou(k.box, d.box) <= iou_threshold
               for k in kept):
            kept.append(d)
    return kept


def average_precision(dets: Sequence[Detection], ground_truth: Sequence, iou_threshold: float = 0.5) -> float:
    """All-point interpolated AP for a single class; NaN when there is no ground truth.

    ``ground_truth`` holds ``(image_id, Box)`` pairs or bare boxes (image 0).
    """
    gts = [(0, g) if isinstance(g, Box) else (int(g[0]), g[1]) for g in ground_truth]
    if not gts:
        return math.nan
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched = [False] * len(gts)
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        d = dets[i]
        best, best_iou = -1, iou_threshold
        for j, (img, g) in enumerate(gts):
            if matched[j] or img != d.image_id:
                continue
            o = iou(d.box, g)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = j, o
        if best >= 0:
            matched[best] = True
            tp[rank] = 1.0
    if not len(order):
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, len(order) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


# ---------------------------------------------------------------------------
# split evaluation


@dataclass
class EvalReport:
    ap: dict[int, float]
    roster: dict[int, str]
    margin: dict[str, float]
    no_ground_truth: list[int] = field(default_factory=list)

    def _mean(self, role: str) -> float:
        vals = [v for c, v in self.ap.items() if self.roster[c] == role and not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def map_novel(self) -> float:
        return self._mean("novel")

    @property
    def map_base(self) -> float:
        return self._mean("base")

    def rows(self) -> list[tuple[str, str, float]]:
        out = [("ap50", str(c), self.ap[c]) for c in sorted(self.ap)]
        out += [("map_novel", "", self.map_novel), ("map_base", "", self.map_base)]
        out += [(k, "", self.margin[k]) for k in ("mean_intra", "min_inter", "mean_lower", "mean_upper")]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "class_id", "value"])
        for metric, cid, value in self.rows():
            w.writerow([metric, cid, repr(float(value))])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'class':>6} {'role':>6} {'AP50':>8}"]
        for c in sorted(self.ap):
            lines.append(f"{c:>6} {self.roster[c]:>6} {self.ap[c]:>8.4f}")
        lines.append(f"mAP novel {self.map_novel:.4f}   mAP base {self.map_base:.4f}")
        m = self.margin
        lines.append(f"margin: mean intra {m['mean_intra']:.4f}  min inter {m['min_inter']:.4f}  "
                     f"bounds [{m['mean_lower']:.4f}, {m['mean_upper']:.4f}]")
        return "\n".join(lines)


def eval_support_pool(split: ClassSplit, pool_size: int, seed: int):
    """Held-out support items, ``pool_size`` per class, from the evaluation seed range."""
    items = []
    for c in split.all_ids:
        for j in range(pool_size):
            item, _ = render_support(derive_seed(seed + EVAL_SEED_OFFSET, TAG_EVAL_SUPPORT, c, j), c,
                                     sorted(split.base_ids))
            items.append(item)
    return items


def margin_summary(params: ModelParams, split: ClassSplit, pool_size: int, seed: int) -> dict[str, float]:
    protos = N.prototypes_from_items(eval_support_pool(split, pool_size, seed), params, filtered=True)
    stats = L.margin_stats_from_set(protos, filtered=True)
    lo, hi = stats.mean_bounds()
    return {"mean_intra": stats.mean_intra, "min_inter": stats.min_inter, "mean_lower": lo, "mean_upper": hi}


def evaluate_split(params: ModelParams, split: ClassSplit, num_episodes: int, seed: int, shots: int = 3,
                   pool_seed: Optional[int] = None, score_threshold: float = 0.05,
                   margin_pool: int = 5) -> EvalReport:
    """AP50 per class over held-out query scenes.

    Class prototypes come from the frozen K-shot pool of ``pool_seed`` (the
    annotations a few-shot detector is allowed to see); query scenes use seeds
    offset by ``EVAL_SEED_OFFSET`` so they never coincide with training ones.
    """
    if num_episodes < 1:
        raise ValueError(f"num_episodes must be >= 1, got {num_episodes}")
    pool_seed = seed if pool_seed is None else pool_seed
    classes = split.all_ids
    pool = shot_pool(pool_seed, split)
    protos = N.prototypes_from_items([it for c in classes for it in pool.take(c, shots)], params, filtered=False)
    dets: list[Detection] = []
    gts: dict[int, list] = {c: [] for c in classes}
    image_id = 0
    for e in range(num_episodes):
        queries = [render_query(derive_seed(seed + EVAL_SEED_OFFSET, TAG_EVAL_QUERY, e, q), classes)
                   for q in range(QUERIES_PER_EPISODE)]
        feats = N.encode_query(T.stack([q.image for q in queries]), params)
        pred = N.predict(feats, protos, params).data  # [C,Q,6,8,8]
        for qi, q in enumerate(queries):
            found = decode_detections(pred[:, qi], protos.class_ids, score_threshold, image_id)
            dets.extend(nms(found))
            for b in q.boxes:
                gts[b.class_id].append((image_id, b))
            image_id += 1
    ap, missing = {}, []
    for c in classes:
        ap[c] = average_precision([d for d in dets if d.class_id == c], gts[c])
        if not gts[c]:
            missing.append(c)
    return EvalReport(ap, split.roster(), margin_summary(params, split, margin_pool, seed), missing)


def export_embeddings(params: ModelParams, split: ClassSplit, pool_size: int, path, seed: int = 0) -> Path:
    """CSV of filtered prototypes: class_id, is_novel, then one column per coordinate."""
    width = params.filter_width
    path = Path(path)
    rows = []
    if pool_size > 0:
        items = eval_support_pool(split, pool_size, seed)
        protos = N.prototypes_from_items(items, params, filtered=True)
        for item, vec in zip(items, protos.filtered.data):
            rows.append([str(item.class_id), "1" if item.class_id in split.novel_ids else "0"]
                        + [format(float(v), ".17g") for v in vec])
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id", "is_novel"] + [f"f{i}" for i in range(width)])
        w.writerows(rows)
    return path

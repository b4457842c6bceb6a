"""Base training with the max-margin loss and finetuning with mask disturbance."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import disturbance as D
from . import losses as L
from . import network as N
from . import tensor as T
from .config import TrainConfig
from .network import ModelParams
from .synthshapes import ClassSplit, Episode, default_split, derive_seed, sample_episode
from .tensor import DTYPE, Tape, Tensor

logger = logging.getLogger(__name__)

TAG_BASE, TAG_FINETUNE, TAG_INIT, TAG_DISTURB = 101, 103, 107, 109


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, episode_seed: int, iteration: int):
        super().__init__(f"{message} (iteration {iteration}, episode seed {episode_seed})")
        self.episode_seed = episode_seed
        self.iteration = iteration


# ---------------------------------------------------------------------------
# optimiser


def sgd_momentum_step(params: ModelParams, buffers: dict, lr: float, momentum: float) -> None:
    """In place: buffer <- momentum*buffer + grad; param <- param - lr*buffer."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; run backward first")
    for name, p in params.items():
        buf = buffers.get(name)
        buf = p.grad.copy() if buf is None else momentum * buf + p.grad
        buffers[name] = buf
        p.data = p.data - lr * buf


# ---------------------------------------------------------------------------
# one optimisation step


@dataclass
class StepResult:
    breakdown: L.LossBreakdown
    protos: N.PrototypeSet
    images: list[Tensor]
    margin: Optional[L.MarginStats] = None


@dataclass
class Counters:
    margin_loss: int = 0
    filter_calls: int = 0
    mask_updates: int = 0
    optimizer_steps: int = 0


def episode_loss(params: ModelParams, images: Sequence[Tensor], masks: Sequence[np.ndarray],
                 class_ids: Sequence[int], episode: Episode, config: TrainConfig,
                 counters: Optional[Counters] = None):
    """Forward pass of L_det + λ·L_mrg for one episode; returns (total, parts, protos, degenerate).

    With ``max_margin`` off the margin loss is never built. With
    ``feature_filter`` off it is computed on raw prototypes and means.
    """
    use_margin = config.max_margin and config.lam > 0
    filtered = use_margin and config.feature_filter
    raw = N.encode_supports(T.stack(images), Tensor(np.stack(masks)), params)
    protos = N.build_prototype_set(raw, class_ids, params, filtered=filtered)
    if counters is not None and filtered:
        counters.filter_calls += 1
    feats = N.encode_query(T.stack([q.image for q in episode.query]), params)
    pred = N.predict(feats, protos, params)
    l_cls, l_bbx, l_obj = L.detection_loss(pred, [q.boxes for q in episode.query], protos.class_ids)
    total = T.add(T.add(l_cls, l_bbx), l_obj)
    l_mrg_val, degenerate = 0.0, False
    if use_margin:
        if counters is not None:
            counters.margin_loss += 1
        l_mrg, degenerate = L.max_margin_loss_t(*protos.margin_inputs(filtered))
        total = T.add(total, T.mul(l_mrg, config.lam))
        l_mrg_val = l_mrg.item()
    lam = config.lam if use_margin else 0.0
    parts = L.combined_loss(l_cls.item(), l_bbx.item(), l_obj.item(), l_mrg_val, lam, degenerate)
    return total, parts, protos


def train_step(params: ModelParams, buffers: dict, episode: Episode, masks: Sequence[np.ndarray],
               config: TrainConfig, iteration: int, image_grads: bool = False,
               counters: Optional[Counters] = None) -> StepResult:
    images = [Tensor(s.image.data, requires_grad=image_grads) for s in episode.support]
    class_ids = [s.class_id for s in episode.support]
    with Tape() as tape:
        total, parts, protos = episode_loss(params, images, masks, class_ids, episode, config, counters)
    if not math.isfinite(total.item()):
        raise TrainingDivergedError(f"non-finite loss {total.item()}", episode.seed, iteration)
    params.zero_grad()
    T.backward(total, inputs=list(params.values()))
    # the graph forms reference cycles holding every activation; drop it now
    tape.clear()
    sgd_momentum_step(params, buffers, config.lr, config.momentum)
    if counters is not None:
        counters.optimizer_steps += 1
    if not params.all_finite():
        raise TrainingDivergedError("non-finite parameters after step", episode.seed, iteration)
    return StepResult(parts, protos, images)


def _prototypes_numeric(params: ModelParams, episode: Episode, masks: Sequence[np.ndarray],
                        filtered: bool) -> N.PrototypeSet:
    images = Tensor(np.stack([s.image.data for s in episode.support]))
    raw = N.encode_supports(images, Tensor(np.stack(masks)), params)
    return N.build_prototype_set(raw, [s.class_id for s in episode.support], params, filtered=filtered)


def _mean_inter(protos: N.PrototypeSet, filtered: bool) -> float:
    _, means = protos.margin_inputs(filtered)
    return float(L.inter_class_distance_t(means).data.mean())


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    l_det: list[float] = field(default_factory=list)
    equilibrium: list[dict] = field(default_factory=list)
    counters: Counters = field(default_factory=Counters)
    mask_history: list[dict] = field(default_factory=list)

    def windowed_l_det(self, window: int = 10) -> np.ndarray:
        x = np.asarray(self.l_det)
        n = len(x) // window
        return x[: n * window].reshape(n, window).mean(axis=1)


def _log_row(phase: str, it: int, parts: L.LossBreakdown, stats: Optional[L.MarginStats]) -> dict:
    row = {"phase": phase, "iteration": it, "l_cls": parts.l_cls, "l_bbx": parts.l_bbx, "l_obj": parts.l_obj,
           "l_det": parts.l_det, "l_mrg": parts.l_mrg, "total": parts.total, "lambda": parts.lam}
    if stats is not None:
        lo, hi = stats.mean_bounds()
        row.update(mean_intra=stats.mean_intra, min_inter=stats.min_inter, mean_lower=lo, mean_upper=hi)
    return row


def _check_split(split: ClassSplit, config: TrainConfig) -> None:
    if len(split.base_ids) == 0:
        raise ValueError("split has no base classes")
    if config.max_margin and len(split.base_ids) < 2:
        raise ValueError("the max-margin loss needs at least two base classes")


def train_base(config: TrainConfig, split: Optional[ClassSplit] = None,
               params: Optional[ModelParams] = None, buffers: Optional[dict] = None) -> tuple[ModelParams, dict, TrainLog]:
    """Base training on episodes of base classes only."""
    split = default_split(variant=config.split) if split is None else split
    _check_split(split, config)
    params = init_params_for(config) if params is None else params
    buffers = {} if buffers is None else buffers
    log = TrainLog()
    filtered = config.max_margin and config.feature_filter
    for it in range(config.base_iterations):
        seed = derive_seed(config.seed, TAG_BASE, it)
        episode = sample_episode(seed, split, "base", config.support_per_class, config.batch_query,
                                 augment=config.augment)
        masks = [s.mask.data for s in episode.support]
        res = train_step(params, buffers, episode, masks, config, it, counters=log.counters)
        log.l_det.append(res.breakdown.l_det)
        if (it + 1) % config.log_every == 0:
            stats = L.margin_stats_from_set(res.protos, filtered) if len(res.protos.class_ids) > 1 else None
            log.rows.append(_log_row("base", it + 1, res.breakdown, stats))
            logger.info("base %d l_det=%.4f l_mrg=%.4f", it + 1, res.breakdown.l_det, res.breakdown.l_mrg)
    return params, buffers, log


def init_params_for(config: TrainConfig) -> ModelParams:
    return N.init_params(derive_seed(config.seed, TAG_INIT), filter_width=config.filter_width)


def _disturb(strategy: str, mask: np.ndarray, image: Tensor, cfg: D.DisturbanceConfig, area: int,
             rng: np.random.Generator, params: ModelParams) -> D.TruncationResult:
    if strategy == "gradient":
        return D.truncate_mask(mask, D.gradient_map(image), cfg, original_area=area)
    if strategy == "random_sample":
        return D.random_sample(mask, cfg, rng, original_area=area)
    if strategy == "random_crop":
        return D.random_crop(mask, cfg, rng, original_area=area)
    if strategy == "feature":
        x = N.support_input(image.detach(), Tensor(mask))
        act = T.leaky_relu(T.conv2d(x, params["s_conv1_w"], params["s_conv1_b"], padding=1), N.LEAK)
        fmap = np.sqrt((act.data ** 2).sum(axis=0, keepdims=True))
        return D.feature_truncation(mask, fmap, cfg, original_area=area)
    raise ValueError(f"unknown disturbance strategy {strategy!r}")


def finetune_cme(config: TrainConfig, params: ModelParams, buffers: Optional[dict] = None,
                 split: Optional[ClassSplit] = None, K: Optional[int] = None,
                 record_masks: bool = False) -> tuple[ModelParams, dict, TrainLog]:
    """Finetuning on base and novel classes with alternating mask disturbance.

    Every outer iteration samples a K-shot episode and runs ``config.rounds``
    rounds of: forward, backward, optimiser step, then truncation of the
    masks of the targeted classes. The next round rebuilds prototypes from the
    eroded masks. ``d_inter`` (mean over classes) is logged with the updated
    parameters just before and just after each disturbance.
    """
    split = default_split(variant=config.split) if split is None else split
    K = config.shots if K is None else K
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    config = config.replace(shots=K)
    buffers = {} if buffers is None else buffers
    dcfg = config.disturbance_config()
    filtered = config.max_margin and config.feature_filter
    # the training forward pass builds prototypes in the logged space only when the margin loss runs
    reuse_forward = not filtered or config.lam > 0
    log = TrainLog()
    for outer in range(config.finetune_iterations):
        seed = derive_seed(config.seed, TAG_FINETUNE, outer)
        episode = sample_episode(seed, split, "finetune", K, config.batch_query, pool_seed=config.seed,
                                 augment=config.augment)
        masks = [s.mask.data.copy() for s in episode.support]
        areas = [s.area for s in episode.support]
        targets = []
        if config.disturbance:
            targets = [i for i, s in enumerate(episode.support) if dcfg.applies_to(episode.class_roster[s.class_id])]
        need_grads = bool(targets) and dcfg.strategy == "gradient"
        pending = None
        for r in range(config.rounds):
            it = outer * config.rounds + r
            res = train_step(params, buffers, episode, masks, config, it, image_grads=need_grads,
                             counters=log.counters)
            if pending is not None:
                # this forward pass saw the same parameters and masks as the previous 'after'
                pending["d_inter_after"] = _mean_inter(res.protos, filtered)
                log.equilibrium.append(pending)
                pending = None
            log.l_det.append(res.breakdown.l_det)
            floored = 0
            row = {"outer_iter": outer, "inner_iter": r, "l_det": res.breakdown.l_det,
                   "l_mrg": res.breakdown.l_mrg}
            if targets:
                row["d_inter_before"] = _mean_inter(_prototypes_numeric(params, episode, masks, filtered), filtered)
                for i in targets:
                    rng = np.random.default_rng(derive_seed(config.seed, TAG_DISTURB, outer, r, i))
                    out = _disturb(dcfg.strategy, masks[i], res.images[i], dcfg, areas[i], rng, params)
                    masks[i] = out.mask
                    floored += int(out.floored)
                    log.counters.mask_updates += 1
            else:
                row["d_inter_before"] = row["d_inter_after"] = _mean_inter(res.protos, filtered)
            row["masks_floored"] = floored
            if record_masks:
                log.mask_history.append({"outer": outer, "inner": r,
                                         "active": [int((m > 0.5).sum()) for m in masks]})
            if "d_inter_after" in row:
                log.equilibrium.append(row)
            elif r + 1 < config.rounds and reuse_forward:
                pending = row
            else:
                row["d_inter_after"] = _mean_inter(_prototypes_numeric(params, episode, masks, filtered), filtered)
                log.equilibrium.append(row)
        if (outer + 1) % config.log_every == 0:
            stats = L.margin_stats_from_set(res.protos, filtered)
            log.rows.append(_log_row("finetune", outer + 1, res.breakdown, stats))
            logger.info("finetune %d l_det=%.4f", outer + 1, res.breakdown.l_det)
    return params, buffers, log


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"CMEC"
CKPT_VERSION = 1
PRECISION_CODES = {np.dtype(np.float64): 8, np.dtype(np.float32): 4}


class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class PrecisionMismatchError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    buffers: dict
    config: TrainConfig
    rng_state: dict
    version: int = CKPT_VERSION


def _pack_tensor(name: str, arr: np.ndarray, dtype: np.dtype) -> bytes:
    raw = name.encode("utf-8")
    out = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return out + np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<")).tobytes()


def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    dtype = np.dtype(DTYPE)
    parts = [CKPT_MAGIC, struct.pack("<IB", ckpt.version, PRECISION_CODES[dtype])]
    parts.append(struct.pack("<I", len(ckpt.params)))
    parts += [_pack_tensor(k, v.data, dtype) for k, v in ckpt.params.items()]
    names = sorted(ckpt.buffers)
    parts.append(struct.pack("<I", len(names)))
    parts += [_pack_tensor(k, ckpt.buffers[k], dtype) for k in names]
    parts.append(_pack_text(ckpt.config.to_text()))
    parts.append(_pack_text("".join(f"{k}={ckpt.rng_state[k]}\n" for k in sorted(ckpt.rng_state))))
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(self.raw)} (needed {self.pos + n})")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self, dtype: np.dtype) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<I")
        name = self.take(n).decode("utf-8")
        (rank,) = self.unpack("<I")
        dims = self.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype.newbyteorder("<")).reshape(dims)
        return name, data.astype(dtype)

    def text(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def load_checkpoint(path, expect: Optional[ModelParams] = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` also verify every tensor's name and shape."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint")
    r = _Reader(raw)
    r.take(4)
    version, precision = r.unpack("<IB")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    dtype = np.dtype(DTYPE)
    if precision != PRECISION_CODES[dtype]:
        raise PrecisionMismatchError(f"{path}: stored with {precision * 8}-bit floats, "
                                     f"this build uses {dtype.itemsize * 8}-bit")
    params = ModelParams()
    (count,) = r.unpack("<I")
    for _ in range(count):
        name, data = r.tensor(dtype)
        params[name] = Tensor(data, requires_grad=True)
    buffers = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        name, data = r.tensor(dtype)
        buffers[name] = data
    config = TrainConfig.from_text(r.text())
    rng_state = dict(line.split("=", 1) for line in r.text().splitlines() if line)
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    if expect is not None:
        for name, t in expect.items():
            if name not in params:
                raise CheckpointShapeError(f"{path}: missing tensor {name!r}")
            if params[name].shape != t.shape:
                raise CheckpointShapeError(f"{path}: tensor {name!r} has shape {params[name].shape}, "
                                           f"expected {t.shape}")
    return Checkpoint(params, buffers, config, rng_state, version)

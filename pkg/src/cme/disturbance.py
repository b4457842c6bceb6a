"""Gradient-driven truncation of support masks.

The pixels of a support image whose loss gradient is largest are the most
discriminative ones; switching them off in the mask pushes the recomputed
prototype towards its neighbours and shrinks the class margin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .tensor import DTYPE, Tensor

TARGETS = ("base_only", "novel_only", "both", "none")
STRATEGIES = ("gradient", "random_sample", "random_crop", "feature", "none")


@dataclass
class GradientMap:
    values: np.ndarray  # [1,H,W], non-negative


@dataclass(frozen=True)
class DisturbanceConfig:
    ratio: float = 0.15
    floor_fraction: float = 0.25
    target: str = "base_only"
    strategy: str = "gradient"

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"ratio must lie in (0, 1), got {self.ratio}")
        if not 0.0 <= self.floor_fraction < 1.0:
            raise ValueError(f"floor_fraction must lie in [0, 1), got {self.floor_fraction}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")

    def applies_to(self, role: str) -> bool:
        """Whether a class with roster role ``base``/``novel`` is disturbed."""
        if self.target == "none" or self.strategy == "none":
            return False
        return self.target == "both" or self.target == f"{role}_only"


@dataclass
class TruncationResult:
    mask: np.ndarray
    floored: bool = False
    removed: int = 0
    tau: float = math.inf


def gradient_map(support_image_grad) -> GradientMap:
    """Per-pixel Euclidean norm of the colour-channel gradient, shaped [1,H,W].

    Accepts the gradient array itself or the image leaf whose ``grad`` holds it.
    """
    if isinstance(support_image_grad, Tensor):
        if support_image_grad.grad is None:
            raise ValueError("backward not run")
        g = support_image_grad.grad
    elif support_image_grad is None:
        raise ValueError("backward not run")
    else:
        g = np.asarray(support_image_grad, dtype=DTYPE)
    if g.ndim != 3:
        raise ValueError(f"expected a [C,H,W] gradient, got shape {g.shape}")
    return GradientMap(np.sqrt((g[:3] * g[:3]).sum(axis=0, keepdims=True)))


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, GradientMap):
        return x.values
    return np.asarray(x)


def ranked_active(values, mask) -> np.ndarray:
    """Flat indices of active mask pixels by descending value, ties by lower index."""
    v = _as_array(values).reshape(-1)
    m = _as_array(mask).reshape(-1)
    active = np.flatnonzero(m > 0.5)
    order = np.lexsort((active, -v[active]))
    return active[order]


def removal_count(ratio: float, active: int) -> int:
    """ceil(ratio * active), exact for the decimal that ``ratio`` was written as.

    The shortest round-trip decimal is used so that 0.1 * 10 counts 1 pixel,
    where the binary value of 0.1 (slightly above one tenth) would count 2.
    """
    return int(math.ceil(Fraction(repr(float(ratio))) * active))


def dynamic_threshold(gmap, mask, ratio: float) -> tuple[float, int]:
    """Order-statistic threshold selecting the top ``ratio`` share of active pixels."""
    ranked = ranked_active(gmap, mask)
    if ranked.size == 0:
        return math.inf, 0
    count = removal_count(ratio, ranked.size)
    values = _as_array(gmap).reshape(-1)
    return float(values[ranked[count - 1]]), count


def _apply(mask: np.ndarray, drop: np.ndarray, original_area: Optional[int], floor_fraction: float,
           tau: float = math.inf) -> TruncationResult:
    active = int((mask > 0.5).sum())
    area = active if original_area is None else original_area
    if active - drop.size < floor_fraction * area:
        return TruncationResult(mask.copy(), floored=True, removed=0, tau=tau)
    out = mask.copy()
    out.reshape(-1)[drop] = 0.0
    return TruncationResult(out, floored=False, removed=int(drop.size), tau=tau)


def truncate_mask(mask, gmap, cfg: DisturbanceConfig, original_area: Optional[int] = None) -> TruncationResult:
    """Zero the top-gradient active pixels of a binary mask.

    Truncation is skipped (``floored``) when fewer than
    ``floor_fraction * original_area`` pixels would stay active, and the mask is
    returned unchanged when the gradient map is identically zero.
    """
    m = np.array(_as_array(mask), dtype=DTYPE)
    g = _as_array(gmap)
    if not np.any(g):
        return TruncationResult(m)
    tau, count = dynamic_threshold(g, m, cfg.ratio)
    if count == 0:
        return TruncationResult(m)
    drop = ranked_active(g, m)[:count]
    return _apply(m, drop, original_area, cfg.floor_fraction, tau)


def random_sample(mask, cfg: DisturbanceConfig, rng: np.random.Generator,
                  original_area: Optional[int] = None) -> TruncationResult:
    """Zero a uniformly random ``ratio`` share of the active pixels."""
    m = np.array(_as_array(mask), dtype=DTYPE)
    active = np.flatnonzero(m.reshape(-1) > 0.5)
    if active.size == 0:
        return TruncationResult(m)
    count = removal_count(cfg.ratio, active.size)
    drop = np.sort(rng.choice(active, size=count, replace=False))
    return _apply(m, drop, original_area, cfg.floor_fraction)


def random_crop(mask, cfg: DisturbanceConfig, rng: np.random.Generator,
                original_area: Optional[int] = None) -> TruncationResult:
    """Zero the active pixels under one random square covering about ``ratio`` of them."""
    m = np.array(_as_array(mask), dtype=DTYPE)
    plane = m.reshape(m.shape[-2:])
    ys, xs = np.nonzero(plane > 0.5)
    if ys.size == 0:
        return TruncationResult(m)
    target = removal_count(cfg.ratio, ys.size)
    side = max(1, int(math.ceil(math.sqrt(target))))
    i = int(rng.integers(ys.size))
    y0 = int(np.clip(ys[i] - side // 2, 0, plane.shape[0] - side))
    x0 = int(np.clip(xs[i] - side // 2, 0, plane.shape[1] - side))
    window = np.zeros_like(plane, dtype=bool)
    window[y0:y0 + side, x0:x0 + side] = True
    drop = np.flatnonzero((window & (plane > 0.5)).reshape(-1))
    return _apply(m, drop, original_area, cfg.floor_fraction)


def feature_truncation(mask, feature_map, cfg: DisturbanceConfig,
                       original_area: Optional[int] = None) -> TruncationResult:
    """Same ranking rule as :func:`truncate_mask` but on feature magnitudes."""
    return truncate_mask(mask, feature_map, cfg, original_area)

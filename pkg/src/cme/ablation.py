"""Switch grids comparing module on/off settings, filter widths, disturbance targets and manners.

Every arm runs base training, K-shot finetuning and evaluation under one seed.
Base training depends only on the base-phase settings, so arms that share
them reuse one base run.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import evaluation as E
from . import trainer as TR
from .config import TrainConfig
from .synthshapes import default_split

logger = logging.getLogger(__name__)

BASE_PHASE_KEYS = ("lr", "momentum", "lam", "base_iterations", "batch_query", "support_per_class", "seed",
                   "split", "max_margin", "feature_filter", "filter_width", "augment")

_ALL_OFF = dict(max_margin=False, feature_filter=False, disturbance=False)

TABLES: dict[int, list[tuple[str, dict]]] = {
    1: [("baseline", _ALL_OFF),
        ("MM", dict(max_margin=True, feature_filter=False, disturbance=False)),
        ("MM+FF", dict(max_margin=True, feature_filter=True, disturbance=False)),
        ("MM+FF+FD", dict(max_margin=True, feature_filter=True, disturbance=True))],
    2: [("without_filter", dict(feature_filter=False)),
        ("width_64", dict(filter_width=64)),
        ("width_32", dict(filter_width=32)),
        ("width_16", dict(filter_width=16))],
    3: [(t, dict(target=t)) for t in ("base_only", "novel_only", "both", "none")],
    4: [(s, dict(strategy=s)) for s in ("none", "random_sample", "random_crop", "feature", "gradient")],
}


@dataclass
class ArmResult:
    name: str
    seed: int
    shots: int
    map_novel: float
    map_base: float
    d_inter_shift: float  # mean of d_inter_after - d_inter_before, NaN without disturbance events


@dataclass
class Runner:
    """Runs arms while caching base-trained parameters by their base-phase settings."""

    eval_episodes: int = 10
    score_threshold: float = 0.05
    _base_cache: dict = field(default_factory=dict)

    def base_params(self, config: TrainConfig):
        key = tuple(getattr(config, k) for k in BASE_PHASE_KEYS)
        if key not in self._base_cache:
            logger.info("base training seed=%d (%d iterations)", config.seed, config.base_iterations)
            params, _, _ = TR.train_base(config, default_split(variant=config.split))
            self._base_cache[key] = params
        return self._base_cache[key].copy()

    def run(self, name: str, config: TrainConfig, shots: int) -> ArmResult:
        split = default_split(variant=config.split)
        params = self.base_params(config)
        params, _, log = TR.finetune_cme(config, params, {}, split, K=shots)
        report = E.evaluate_split(params, split, self.eval_episodes, config.seed, shots=shots,
                                  score_threshold=self.score_threshold)
        shifts = [r["d_inter_after"] - r["d_inter_before"] for r in log.equilibrium
                  if r["d_inter_after"] != r["d_inter_before"]]
        shift = float(np.mean(shifts)) if shifts else math.nan
        logger.info("%s seed=%d K=%d novel=%.4f base=%.4f", name, config.seed, shots, report.map_novel,
                    report.map_base)
        return ArmResult(name, config.seed, shots, report.map_novel, report.map_base, shift)


def run_table(table: int, seeds: Sequence[int], base: Optional[TrainConfig] = None, shots: int = 3,
              runner: Optional[Runner] = None) -> list[ArmResult]:
    if table not in TABLES:
        raise ValueError(f"unknown table {table}; choose from {sorted(TABLES)}")
    base = base or TrainConfig()
    runner = runner or Runner()
    results = []
    for name, changes in TABLES[table]:
        for seed in seeds:
            results.append(runner.run(name, base.replace(seed=seed, **changes), shots))
    return results


def median_by_arm(results: Sequence[ArmResult]) -> dict[str, float]:
    names = list(dict.fromkeys(r.name for r in results))
    return {n: float(np.median([r.map_novel for r in results if r.name == n])) for n in names}


def table_csv(results: Sequence[ArmResult]) -> str:
    """Per-seed rows then one ``mean`` row per configuration."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "seed", "shots", "novel_map", "base_map"])
    names = list(dict.fromkeys(r.name for r in results))
    for n in names:
        for r in results:
            if r.name == n:
                w.writerow([n, r.seed, r.shots, repr(r.map_novel), repr(r.map_base)])
    for n in names:
        mine = [r for r in results if r.name == n]
        w.writerow([n, "mean", mine[0].shots, repr(float(np.mean([r.map_novel for r in mine]))),
                    repr(float(np.mean([r.map_base for r in mine])))])
    return buf.getvalue()

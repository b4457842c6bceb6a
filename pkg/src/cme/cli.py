"""Command-line entry point: generate, train-base, finetune, eval and ablate.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from . import ablation as A
from . import evaluation as E
from . import trainer as TR
from .config import KEY_HELP, ConfigError, TrainConfig, config_keys
from .synthshapes import default_split, dump_episode, sample_episode

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CHECKPOINT_NAME = "checkpoint.cmec"
LOSS_COLUMNS = ["phase", "iteration", "l_cls", "l_bbx", "l_obj", "l_det", "l_mrg", "total", "lambda",
                "mean_intra", "min_inter", "mean_lower", "mean_upper"]
EQUILIBRIUM_COLUMNS = ["outer_iter", "inner_iter", "d_inter_before", "d_inter_after", "masks_floored",
                       "l_det", "l_mrg"]
TARGET_ALIASES = {"base": "base_only", "novel": "novel_only"}


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config flags


def _target(value: str) -> str:
    return TARGET_ALIASES.get(value, value)


def add_config_flags(parser: argparse.ArgumentParser, skip: Sequence[str] = ()) -> None:
    group = parser.add_argument_group("training config (flags override --config)")
    group.add_argument("--config", type=Path, help="UTF-8 file of 'key = value' lines, '#' comments")
    defaults = dict(TrainConfig().to_items())
    for key in config_keys():
        if key in skip:
            continue
        flag = "--" + key.replace("_", "-")
        text = f"{KEY_HELP[key]} (default: {defaults[key]})"
        if isinstance(getattr(TrainConfig(), "lam" if key == "lambda" else key), bool):
            group.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=text)
        elif key == "target":
            group.add_argument(flag, dest=key, type=_target, default=None, help=text + "; base/novel also accepted")
        else:
            group.add_argument(flag, dest=key, default=None, help=text)


def parse_config(args: argparse.Namespace, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Start from ``base`` (or defaults), apply ``--config`` then every flag given."""
    cfg = base or TrainConfig()
    if getattr(args, "config", None) is not None:
        try:
            cfg = TrainConfig.from_file(args.config, cfg)
        except OSError as exc:
            raise UsageError(f"--config: {exc}") from None
    flags = {k: getattr(args, k) for k in config_keys() if getattr(args, k, None) is not None}
    return TrainConfig.from_mapping(flags, cfg)


# ---------------------------------------------------------------------------
# outputs


def git_blob_sha1(data: bytes) -> str:
    """Content hash as ``git hash-object`` computes it."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_csv_value(row.get(c)) for c in columns])
    return path


def write_manifest(out: Path, command: str, config: Optional[TrainConfig], files: Sequence[Path],
                   started: float, checkpoint: Optional[Path] = None) -> Path:
    manifest = {
        "command": command,
        "config": dict(config.to_items()) if config is not None else None,
        "checkpoint_sha1": git_blob_sha1(checkpoint.read_bytes()) if checkpoint is not None else None,
        "files": [str(f) for f in files],
        "duration_s": round(time.time() - started, 3),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeFailure(f"cannot create output directory {path}: {exc}") from None
    return path


def _load(path: Path) -> TR.Checkpoint:
    if not path.is_file():
        raise RuntimeFailure(f"checkpoint not found: {path}")
    try:
        return TR.load_checkpoint(path)
    except TR.CheckpointError as exc:
        raise RuntimeFailure(f"incompatible checkpoint: {exc}") from None


def _save(out: Path, ckpt: TR.Checkpoint, source: Optional[Path] = None) -> Path:
    path = out / CHECKPOINT_NAME
    if source is not None and path.resolve() == source.resolve():
        raise UsageError(f"--out would overwrite the input checkpoint {source}")
    TR.save_checkpoint(path, ckpt)
    return path


def _diverged(out: Path, exc: TR.TrainingDivergedError) -> RuntimeFailure:
    (out / "diverged.txt").write_text(f"episode_seed={exc.episode_seed}\niteration={exc.iteration}\n",
                                      encoding="utf-8")
    return RuntimeFailure(f"training diverged: {exc}; reproducer written to {out / 'diverged.txt'}")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    started = time.time()
    out = _out_dir(args.out)
    if args.k < 1 or args.queries < 1:
        raise UsageError("--k and --queries must be >= 1")
    split = default_split(variant=args.split)
    episode = sample_episode(args.seed, split, args.phase, args.k, args.queries, pool_seed=args.pool_seed,
                             augment=args.augment)
    files = dump_episode(episode, out)
    write_manifest(out, "generate", None, files, started)
    print(f"wrote {len(files)} files to {out}")
    return EXIT_OK


def cmd_train_base(args) -> int:
    started = time.time()
    config = parse_config(args)
    out = _out_dir(args.out)
    try:
        params, buffers, log = TR.train_base(config)
    except TR.TrainingDivergedError as exc:
        raise _diverged(out, exc) from None
    rng = {"seed": str(config.seed), "base_iterations_done": str(config.base_iterations),
           "finetune_iterations_done": "0"}
    ckpt = _save(out, TR.Checkpoint(params, buffers, config, rng))
    loss = write_rows(out / "loss.csv", LOSS_COLUMNS, log.rows)
    write_manifest(out, "train-base", config, [ckpt, loss], started, ckpt)
    print(f"checkpoint {ckpt} sha1 {git_blob_sha1(ckpt.read_bytes())}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    started = time.time()
    source = args.source
    base = _load(source)
    config = parse_config(args, base.config)
    if args.k is not None:
        if args.k < 1:
            raise UsageError(f"--k must be >= 1, got {args.k}")
        config = config.replace(shots=args.k)
    out = _out_dir(args.out)
    split = default_split(variant=config.split)
    try:
        params, buffers, log = TR.finetune_cme(config, base.params, {}, split, K=config.shots)
    except TR.TrainingDivergedError as exc:
        raise _diverged(out, exc) from None
    rng = dict(base.rng_state)
    rng["finetune_iterations_done"] = str(int(rng.get("finetune_iterations_done", "0")) + config.finetune_iterations)
    ckpt = _save(out, TR.Checkpoint(params, buffers, config, rng), source)
    loss = write_rows(out / "loss.csv", LOSS_COLUMNS, log.rows)
    eq = write_rows(out / "equilibrium.csv", EQUILIBRIUM_COLUMNS, log.equilibrium)
    write_manifest(out, "finetune", config, [ckpt, loss, eq], started, ckpt)
    shifts = [r["d_inter_after"] - r["d_inter_before"] for r in log.equilibrium]
    print(f"checkpoint {ckpt} sha1 {git_blob_sha1(ckpt.read_bytes())}")
    print(f"mean d_inter shift {sum(shifts) / len(shifts):.6g} over {len(shifts)} rounds")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    if args.episodes < 1:
        raise UsageError(f"--episodes must be >= 1, got {args.episodes}")
    ckpt = _load(args.source)
    config = ckpt.config
    seed = config.seed if args.seed is None else args.seed
    shots = config.shots if args.k is None else args.k
    split = default_split(variant=config.split)
    out = _out_dir(args.out)
    report = E.evaluate_split(ckpt.params, split, args.episodes, seed, shots=shots, pool_seed=config.seed,
                              score_threshold=args.score_threshold)
    files = [out / "report.csv"]
    files[0].write_text(report.to_csv(), encoding="utf-8")
    if args.embeddings:
        files.append(E.export_embeddings(ckpt.params, split, args.embeddings, out / "embeddings.csv", seed))
    write_manifest(out, "eval", config, files, started)
    print(report.table())
    return EXIT_OK


def cmd_ablate(args) -> int:
    started = time.time()
    config = parse_config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be a comma-separated list of integers, got {args.seeds!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    if args.eval_episodes < 1:
        raise UsageError(f"--eval-episodes must be >= 1, got {args.eval_episodes}")
    out = _out_dir(args.out)
    runner = A.Runner(eval_episodes=args.eval_episodes, score_threshold=args.score_threshold)
    try:
        results = A.run_table(args.table, seeds, config, shots=config.shots, runner=runner)
    except TR.TrainingDivergedError as exc:
        raise _diverged(out, exc) from None
    path = out / f"table{args.table}.csv"
    path.write_text(A.table_csv(results), encoding="utf-8")
    write_manifest(out, "ablate", config, [path], started)
    for name, value in A.median_by_arm(results).items():
        print(f"{name:>16} median novel mAP {value:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cme", description="Prototype-based few-shot detection with class-margin balancing on synthetic shapes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("generate", help="render one episode and dump its tensors and boxes")
    p.add_argument("--seed", type=int, default=0, help="episode seed (default: 0)")
    p.add_argument("--split", type=int, default=0, choices=(0, 1, 2), help="class split variant (default: 0)")
    p.add_argument("--phase", choices=("base", "finetune"), default="base", help="episode phase (default: base)")
    p.add_argument("--k", type=int, default=1, help="support items per class (default: 1)")
    p.add_argument("--queries", type=int, default=4, help="query images (default: 4)")
    p.add_argument("--pool-seed", type=int, default=0, help="seed of the frozen K-shot pool (default: 0)")
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=False,
                   help="augment query images (default: off)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-base", help="base training on base classes")
    add_config_flags(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("finetune", help="finetune a checkpoint on base and novel classes with disturbance")
    p.add_argument("--from", dest="source", type=Path, required=True, help="input checkpoint (never modified)")
    p.add_argument("--k", type=int, default=None, help="shots per class (default: the checkpoint's shots)")
    add_config_flags(p, skip=("shots",))
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="AP50 per class and margin diagnostics")
    p.add_argument("--from", dest="source", type=Path, required=True, help="checkpoint to evaluate")
    p.add_argument("--episodes", type=int, default=10, help="held-out episodes of 8 queries (default: 10)")
    p.add_argument("--seed", type=int, default=None, help="evaluation seed (default: the checkpoint's seed)")
    p.add_argument("--k", type=int, default=None, help="shots per class (default: the checkpoint's shots)")
    p.add_argument("--score-threshold", type=float, default=0.05, help="score cut before NMS (default: 0.05)")
    p.add_argument("--embeddings", type=int, default=0, metavar="POOL",
                   help="also export filtered prototypes, POOL items per class (default: 0, off)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation grid across seeds")
    p.add_argument("--table", type=int, required=True, choices=sorted(A.TABLES),
                   help="1 module switches, 2 filter widths, 3 disturbance targets, 4 disturbance manners")
    p.add_argument("--seeds", default="1,2,3,4,5", help="comma-separated seeds (default: 1,2,3,4,5)")
    p.add_argument("--eval-episodes", type=int, default=10, help="evaluation episodes per arm (default: 10)")
    p.add_argument("--score-threshold", type=float, default=0.05, help="score cut before NMS (default: 0.05)")
    add_config_flags(p, skip=("seed",))
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required; see --help")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def run() -> None:
    sys.exit(main())

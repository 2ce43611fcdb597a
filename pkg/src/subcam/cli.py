"""Command-line entry point: ``subcam generate | train | eval | cam | sweep-k``.

Every command takes explicit paths. Commands that produce a directory refuse
to write into an existing non-empty one unless ``--force`` is given, in which
case the directory is cleared first so reruns are idempotent.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from .cam import evaluate_split, export_heatmaps, sweep_k, write_metrics
from .config import RunConfig, load_benchmark, load_run_config
from .data import DatasetError, load_dataset, write_dataset
from .model import load_checkpoint
from .train import ConfigError, RoundError, run_algorithm

log = logging.getLogger("subcam")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _prepare_out(path, force: bool, protect=()) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path exists and is not a directory: {out}")
    if out.is_dir() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        resolved = out.resolve()
        for p in protect:
            if p is not None and (Path(p).resolve() == resolved or resolved in Path(p).resolve().parents):
                raise UsageError(f"refusing to clear {out}: it contains input {p}")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _base_config(args) -> RunConfig:
    if getattr(args, "bench", None) and getattr(args, "config", None):
        raise UsageError("give either --config or --bench, not both")
    if getattr(args, "bench", None):
        return load_benchmark(args.bench)
    if getattr(args, "config", None):
        return load_run_config(args.config)
    raise UsageError("a configuration is required (--config FILE or --bench NAME)")


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    train_over = {k: getattr(args, k) for k in ("rounds", "k", "lam", "epochs", "threshold", "learning_rate")
                  if getattr(args, k, None) is not None}
    if getattr(args, "seed", None) is not None:
        train_over["seed"] = args.seed
    if train_over:
        cfg.train = cfg.train.__class__.from_dict({**cfg.train.to_dict(), **train_over})
    if getattr(args, "data_seed", None) is not None:
        cfg.data = cfg.data.__class__.from_dict({**cfg.data.to_dict(), "seed": args.data_seed})
    if getattr(args, "dataset", None):
        cfg.dataset_dir = str(args.dataset)
    if getattr(args, "out", None):
        cfg.out_dir = str(args.out)
    return cfg


def _require_dataset(cfg: RunConfig) -> Path:
    if not cfg.dataset_dir:
        raise UsageError("no dataset directory (use --dataset or set dataset_dir in the config)")
    root = Path(cfg.dataset_dir)
    if not (root / "train").is_dir():
        raise UsageError(f"dataset not found: {root} has no train/ split (run 'subcam generate' first)")
    return root


def _load_splits(root: Path):
    train = load_dataset(root, "train")
    ev = load_dataset(root, "eval") if (root / "eval").is_dir() else None
    return train, ev


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = _apply_overrides(_base_config(args), args)
    out = args.out or cfg.dataset_dir
    if not out:
        raise UsageError("no output directory (use --out)")
    out = _prepare_out(out, args.force)
    splits = write_dataset(cfg.data, out)
    print(f"wrote {out}: " + ", ".join(f"{k} {len(v)}" for k, v in splits.items()) + f" (seed {cfg.data.seed})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _apply_overrides(_base_config(args), args)
    root = _require_dataset(cfg)
    if not cfg.out_dir:
        raise UsageError("no output directory (use --out or set out_dir in the config)")
    out = _prepare_out(cfg.out_dir, args.force, protect=[root])
    train, ev = _load_splits(root)
    arts = run_algorithm(train, cfg.train, eval_samples=ev, out_dir=out, parent_only=args.parent_only,
                         config_doc=cfg.to_dict())
    for a in arts:
        if a.metrics:
            print(f"round {a.round_index}: mIoU {100 * a.metrics['miou']:.2f}  F {100 * a.metrics['fscore']:.2f}")
    print(f"run written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load_checkpoint(args.checkpoint)
    root = Path(args.dataset)
    samples = load_dataset(root, args.split)
    out = _prepare_out(args.out, args.force, protect=[root])
    m = evaluate_split(net, samples, args.threshold)
    write_metrics(m, out / "metrics.json", args.threshold, net.round_index,
                  extra={"checkpoint": str(args.checkpoint), "split": args.split})
    for s in [s for s in samples if s.gt_mask is not None][: args.heatmaps]:
        export_heatmaps(net, s, out / "heatmaps", threshold=args.threshold)
    print(f"mIoU {100 * m.miou:.2f}  P {100 * m.precision:.2f}  R {100 * m.recall:.2f}  F {100 * m.fscore:.2f}")
    return EXIT_OK


def cmd_cam(args) -> int:
    net = load_checkpoint(args.checkpoint)
    root = Path(args.dataset)
    by_id = {s.id: s for s in load_dataset(root, args.split)}
    missing = [i for i in args.ids if i not in by_id]
    if missing:
        raise UsageError(f"image id(s) not in {root / args.split}: {', '.join(missing)}")
    out = _prepare_out(args.out, args.force, protect=[root])
    n = 0
    for i in args.ids:
        n += len(export_heatmaps(net, by_id[i], out, overlay=not args.no_overlay, threshold=args.threshold))
    print(f"wrote {n} files to {out}")
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    cfg = _apply_overrides(_base_config(args), args)
    root = _require_dataset(cfg)
    if not cfg.out_dir:
        raise UsageError("no output directory (use --out or set out_dir in the config)")
    if len(set(args.k_values)) < 2:
        raise UsageError("--k-values needs at least two distinct values")
    out = _prepare_out(cfg.out_dir, args.force, protect=[root])
    (out / "config.json").write_text(cfg.dumps())
    train, ev = _load_splits(root)
    rows = sweep_k(train, cfg.train, args.k_values, eval_samples=ev, out_dir=out)
    for k, m in rows:
        print(f"K={k}: mIoU {100 * m:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_config_args(p, train_flags: bool = True) -> None:
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--bench", help="bundled benchmark name, e.g. bench-v1")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true", help="clear a non-empty output directory")
    if train_flags:
        p.add_argument("--dataset", help="dataset directory (with train/ and eval/)")
        p.add_argument("--rounds", type=int)
        p.add_argument("--k", type=int, help="sub-categories per parent class")
        p.add_argument("--lam", type=float, help="weight of the sub-category loss")
        p.add_argument("--epochs", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--threshold", type=float, help="CAM foreground threshold")
        p.add_argument("--seed", type=int, help="training seed")
    else:
        p.add_argument("--seed", dest="data_seed", type=int, help="dataset seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="subcam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    _add_config_args(p, train_flags=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run the alternating clustering / training rounds")
    _add_config_args(p)
    p.add_argument("--parent-only", action="store_true", help="skip clustering and the sub-category loss")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="CAM segmentation metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--heatmaps", type=int, default=0, help="also export heatmaps for the first N images")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cam", help="export CAM heatmaps for selected images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--ids", nargs="+", required=True)
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--no-overlay", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("sweep-k", help="final-round mIoU for several K")
    _add_config_args(p)
    p.add_argument("--k-values", type=int, nargs="+", required=True)
    p.set_defaults(func=cmd_sweep_k)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, FileNotFoundError) as exc:
        print(f"subcam {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RoundError as exc:
        print(f"subcam {args.command}: failed at {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure, reported without a traceback
        log.debug("unhandled error", exc_info=True)
        print(f"subcam {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

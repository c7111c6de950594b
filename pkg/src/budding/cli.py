"""Command line entry point: ``budding {run,ablate,eval,report}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .experiment import ablate, configure_torch, evaluate_run_dir, run_dir, run_experiment
from .report import emit_report


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.out:
        cfg = cfg.with_changes(output_dir=str(args.out))
    return cfg


def _seeds(args, cfg: ExperimentConfig) -> tuple[int, ...]:
    return (args.seed,) if args.seed is not None else cfg.seeds


def cmd_run(args) -> int:
    cfg = _config(args)
    for seed in _seeds(args, cfg):
        art = run_experiment(cfg, seed)
        print(f"{art.run_dir}: " + " ".join(f"{k}={v}" for k, v in art.metrics.items()))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    for art in ablate(cfg, _seeds(args, cfg)):
        print(f"{art.run_dir}: UE={art.metrics['UE']:.4f} auroc_far={art.metrics['auroc_far']:.4f}")
    return 0


def _discover(root: Path) -> list[Path]:
    return sorted(p.parent for p in root.glob("*/seed_*/config.yaml"))


def cmd_eval(args) -> int:
    if args.run_dirs:
        dirs = [Path(d) for d in args.run_dirs]
    elif args.config:
        cfg = _config(args)
        dirs = [run_dir(cfg.output_dir, cfg.config_id, s) for s in _seeds(args, cfg)]
    else:
        dirs = _discover(Path(args.out or "runs"))
    if not dirs:
        print("no runs to evaluate", file=sys.stderr)
        return 1
    for d in dirs:
        art = evaluate_run_dir(d)
        print(f"{d}: " + " ".join(f"{k}={v}" for k, v in art.metrics.items()))
    return 0


def cmd_report(args) -> int:
    root = Path(args.out or "runs")
    dirs = [Path(d) for d in args.run_dirs] or _discover(root)
    if args.config and not args.run_dirs:
        cid = load_config(args.config).config_id
        dirs = [d for d in dirs if d.parent.name.startswith(cid)]
    if not dirs:
        print(f"no runs found under {root}", file=sys.stderr)
        return 1
    rep = emit_report(dirs, root / "report")
    print(f"{rep.table} ({len(rep.rows)} rows)")
    for name, path in rep.plots.items():
        print(f"{name}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="budding", description="Budding-ensemble detector experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, positional=False):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        if positional:
            p.add_argument("run_dirs", nargs="*", help="run directories (default: discover under --out)")

    common(sub.add_parser("run", help="train and evaluate one config"))
    common(sub.add_parser("ablate", help="run the four tandem-switch variants of a config"))
    common(sub.add_parser("eval", help="recompute metrics from detection dumps"), positional=True)
    common(sub.add_parser("report", help="merge metrics and draw comparison plots"), positional=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    configure_torch()
    handler = {"run": cmd_run, "ablate": cmd_ablate, "eval": cmd_eval, "report": cmd_report}[args.verb]
    try:
        return handler(args)
    except (OSError, ValueError) as exc:
        print(f"budding {args.verb}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

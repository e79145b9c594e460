"""Command-line entry point: ``mindshot <subcommand> --config cfg.yaml [...]``.

Exit codes: 0 success, 2 config error, 3 missing or inconsistent artifact,
4 numeric failure (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, pipeline
from .config import ConfigError, ExperimentConfig, load_config
from .io import ArtifactError
from .models import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("mindshot")


def _thread_limit():
    n = os.environ.get("MINDSHOT_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        n = int(n)
    except ValueError:
        raise ConfigError(f"MINDSHOT_THREADS must be an integer, got {n!r}")
    if n < 1:
        raise ConfigError("MINDSHOT_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _load(args) -> tuple[ExperimentConfig, Path]:
    if args.config and not Path(args.config).is_file():
        raise ConfigError(f"config file not found: {args.config}")
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        cfg.seed = args.seed
    root = Path(args.out or cfg.output_dir)
    return cfg, root


def _variant(cfg, args) -> pipeline.Variant:
    v = pipeline.default_variant(cfg)
    if getattr(args, "supervision", None):
        v.supervision = args.supervision
    if getattr(args, "shots", None):
        v.shots = args.shots
    if getattr(args, "strategy", None):
        v.strategy = args.strategy
    if getattr(args, "depth", None):
        v.depth = args.depth
    if getattr(args, "no_residual", False):
        v.residual = False
    try:
        v.apply(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return v


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_data(args):
    cfg, root = _load(args)
    m = pipeline.stage_gen_data(cfg, root)
    _print({"counts": m["metrics"]["counts"],
            "dataset_checksum": m["metrics"]["dataset_checksum"],
            "output": str(pipeline.data_dir(root))})


def cmd_pretrain(args):
    cfg, root = _load(args)
    m = pipeline.stage_pretrain(cfg, root, args.force)
    _print(m["metrics"])


def cmd_select(args):
    cfg, root = _load(args)
    m = pipeline.stage_select(cfg, root, args.strategy, args.method, args.force)
    _print({"strategy": m["variant"]["strategy"], "selected": m["metrics"]["selected"]})


def cmd_adapt(args):
    cfg, root = _load(args)
    v = _variant(cfg, args)
    m = pipeline.stage_adapt(cfg, root, v, force=args.force)
    _print({"tag": v.tag, **m["metrics"]})


def cmd_eval(args):
    cfg, root = _load(args)
    v = _variant(cfg, args)
    m = pipeline.stage_eval(cfg, root, v, force=args.force)
    _print({"tag": v.tag, **m["metrics"]})


def cmd_report(args):
    cfg, root = _load(args)
    pipeline.stage_report(cfg, root, args.force)
    table = root / "report" / "tables" / "all_runs.csv"
    print(table.read_text(), end="")


def cmd_ablate(args):
    cfg, root = _load(args)
    m, skipped = pipeline.stage_ablate(cfg, root, args.axis, args.force)
    for tag in skipped:
        print(f"skipped (complete): {tag}")
    print((root / "sweeps" / args.axis / "table.csv").read_text(), end="")


def cmd_pipeline(args):
    cfg, root = _load(args)
    pipeline.run_pipeline(cfg, root, args.force)
    print((root / "report" / "tables" / "all_runs.csv").read_text(), end="")


def cmd_verify(args):
    cfg, root = _load(args)
    problems = pipeline.verify_tree(root)
    for p in problems:
        print(p)
    if problems:
        raise ArtifactError(f"{len(problems)} problem(s) found under {root}")
    print(f"ok: {root}")


def build_parser():
    p = argparse.ArgumentParser(prog="mindshot", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mindshot {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", "-c", help="YAML config (defaults when omitted)")
        sp.add_argument("--out", "-o", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="override the top-level seed")
        sp.add_argument("--force", action="store_true",
                        help="proceed despite upstream checksum mismatches")
        sp.add_argument("-v", "--verbose", action="store_true")
        sp.set_defaults(func=fn)
        return sp

    def variant_flags(sp):
        sp.add_argument("--supervision", choices=("none", "mse", "amp", "fourier"))
        sp.add_argument("--shots", type=int)
        sp.add_argument("--strategy", choices=("first", "kda_max", "kda_min", "random"))
        sp.add_argument("--depth", type=int, choices=(1, 2, 3))
        sp.add_argument("--no-residual", action="store_true")

    add("gen-data", cmd_gen_data, "build and serialize the synthetic dataset")
    add("pretrain", cmd_pretrain, "pretrain the shared encoder")
    sp = add("select", cmd_select, "one-shot stimulus selection for the new subject")
    sp.add_argument("--strategy", choices=("kda_max", "kda_min", "random"))
    sp.add_argument("--method", choices=("pca", "tsne"))
    variant_flags(add("adapt", cmd_adapt, "adapt the new subject's HRF adapter"))
    variant_flags(add("eval", cmd_eval, "evaluate an adapted run"))
    add("report", cmd_report, "assemble comparison tables")
    sp = add("ablate", cmd_ablate, "run one ablation sweep")
    sp.add_argument("--axis", required=True, choices=pipeline.SWEEP_AXES)
    add("pipeline", cmd_pipeline, "run every stage end to end")
    add("verify", cmd_verify, "check manifests, checksums and dangling artifacts")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

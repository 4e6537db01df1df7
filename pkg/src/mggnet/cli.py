"""``mgg`` command line: train, eval, exports, data generation and gradient self-check.

Exit codes: 0 ok, 1 gradcheck failed, 2 config error, 3 data error,
4 numeric divergence, 5 checkpoint/config mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, RunConfig, model_config_from_dict, spec_from_value
from .data import DataError, generate_dataset, load_dataset
from .gradcheck import run_gradcheck, tiny_config
from .model import MGGNet
from .params import CheckpointMismatch
from .train import (
    TrainingDiverged,
    atomic_write_text,
    evaluate_model,
    export_affinities,
    export_attention,
    load_model,
    report_table,
    train,
)

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_MISMATCH = 5

log = logging.getLogger("mgg")


def _load_config(args) -> Optional[RunConfig]:
    if not args.config:
        return None
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.training.seed = args.seed
    return cfg


def _model_for(args) -> MGGNet:
    cfg = _load_config(args)
    return load_model(args.checkpoint, cfg.model if cfg else None)


def _manifest(args) -> Path:
    if args.manifest:
        return Path(args.manifest)
    raise DataError("--manifest is required")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if cfg is None:
        raise ConfigError("train needs --config")
    result = train(cfg, args.out)
    print(f"trained {len(result.epoch_reports)} epochs; final loss {result.epoch_reports[-1].total:.6f}")
    print(f"checkpoint {result.out_dir / 'checkpoint'}")
    if result.val_report is not None:
        print(report_table(result.val_report), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _model_for(args)
    ds = load_dataset(_manifest(args), channels=model.config.backbone.input_shape[0])
    if ds.labels.shape[1] != model.config.N:
        raise DataError(f"manifest has {ds.labels.shape[1]} label bits, model expects {model.config.N}")
    report = evaluate_model(model, ds, args.threshold)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "eval.csv", report.to_csv())
    if not args.no_figures:
        from .plotting import accuracy_bars

        accuracy_bars(report.pred_acc, report.bal_acc, list(model.config.assignment.catalog.names), out / "eval.png")
    print(report_table(report), end="")
    return EXIT_OK


def cmd_export_attention(args) -> int:
    model = _model_for(args)
    ds = load_dataset(_manifest(args), channels=model.config.backbone.input_shape[0])
    ids = [s for chunk in args.samples for s in chunk.split(",") if s]
    if not ids:
        raise DataError("give at least one --samples id")
    written = export_attention(model, ds, ids, args.out or "attention", figures=not args.no_figures)
    print(f"wrote {len(written)} masks to {args.out or 'attention'}")
    return EXIT_OK


def cmd_export_affinity(args) -> int:
    model = _model_for(args)
    ds = load_dataset(_manifest(args), channels=model.config.backbone.input_shape[0])
    written = export_affinities(model, ds, args.out or "affinity", figures=not args.no_figures)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    spec = spec_from_value(args.spec or "default")
    if args.seed is not None:
        spec = type(spec).from_dict({**spec.to_dict(), "seed": args.seed})
    manifest = generate_dataset(spec, args.count, args.out or "data")
    print(manifest)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model_cfg = tiny_config()
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if isinstance(raw, dict) and "model" in raw:
            model_cfg = model_config_from_dict(raw["model"])
    report = run_gradcheck(model_cfg, seed=args.seed or 0, per_family=args.per_family, mode=args.mode)
    print(report.summary(), end="")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mgg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model from a config")
    p.set_defaults(func=cmd_train)

    def with_checkpoint(name: str, helptext: str) -> argparse.ArgumentParser:
        q = sub.add_parser(name, parents=[common], help=helptext)
        q.add_argument("--checkpoint", required=True, help="checkpoint directory")
        q.add_argument("--manifest", help="dataset manifest.csv")
        q.add_argument("--no-figures", action="store_true", help="skip PNG figures")
        return q

    p = with_checkpoint("eval", "per-attribute accuracy report")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = with_checkpoint("export-attention", "write group attention masks as PGM")
    p.add_argument("--samples", action="append", default=[], help="sample id(s), comma separated")
    p.set_defaults(func=cmd_export_attention)

    p = with_checkpoint("export-affinity", "write mean group affinity CSVs")
    p.set_defaults(func=cmd_export_affinity)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    p.add_argument("--spec", help="spec JSON path (default built-in spec)")
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient self-check")
    p.add_argument("--per-family", type=int, default=30)
    p.add_argument("--mode", choices=("plain", "balanced"), default="plain")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"diverged: {exc.label} (epoch {exc.epoch})", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointMismatch as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())

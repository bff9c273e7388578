"""Command-line entry point: ``prednet {datagen,train,eval,extrapolate,probe}``.

Every subcommand takes ``--config`` (INI file), ``--seed`` (overrides
``[experiment] seed``) and ``--out`` (output directory).  Errors from bad
input (config, file format, contract violations) exit with status 2.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness as H
from .datagen import write_class_balance_csv, write_vseq
from .errors import ContractError, PredNetError


def _load(args) -> H.ExperimentConfig:
    return H.ExperimentConfig.from_ini(args.config, seed=args.seed)


def _checkpoint(args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(args.out) / "model.pnck"


def cmd_datagen(args) -> None:
    config = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = H.generate_splits(config.data, config.seed)
    for split, sequences in splits.items():
        write_vseq(sequences, out / f"{split}.vseq")
    write_class_balance_csv(splits["train"], out / "class_balance.csv")
    print(f"wrote {', '.join(f'{k}={len(v)}' for k, v in splits.items())} sequences to {out}")


def cmd_train(args) -> None:
    config = _load(args)
    config.require_datasets("train", "val")
    result = H.train(
        config,
        config.load_split("train"),
        config.load_split("val"),
        out_dir=args.out,
        progress=lambda row: print(
            f"epoch {row['epoch']}: train {row['train_loss']:.6g} val {row['val_loss']:.6g} mae {row['val_mae']:.6g}"
        ),
    )
    print(f"checkpoint {result.checkpoint_path}, log {result.log_path}")


def cmd_eval(args) -> None:
    config = _load(args)
    config.require_datasets("test")
    model = H.load_model(config, _checkpoint(args))
    report = H.evaluate(model, config.load_split("test"), config.eval.tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "metrics.csv")
    if "probs" in report.extra:
        H.write_classification_csv(report.extra["probs"], report.extra["labels"], out / "classification.csv")
        print(f"top1 {report.extra['top1']:.4f} top5 {report.extra['top5']:.4f}")
    print(f"mae {report.aggregate['mae']:.6g} (delta vs copy {report.deltas['mae']:.6g})")


def cmd_extrapolate(args) -> None:
    config = _load(args)
    config.require_datasets("test")
    model = H.load_model(config, _checkpoint(args))
    sequences = config.load_split("test")
    T = sequences[0].T
    starts = args.t_start or config.eval.t_starts or H.default_t_starts(T)
    out = Path(args.out)
    for t_start in starts:
        n = args.n or config.eval.n
        if n is not None:
            n = min(n, T - t_start)
        report = H.extrapolate(model, sequences, t_start, n, out / "frames", config.eval.dump_sequences)
        report.to_csv(out / f"extrapolation_tstart{t_start:02d}.csv")
        print(f"t_start {t_start}: per-step mae {' '.join(f'{v:.4g}' for v in report.column('mae'))}")


def cmd_probe(args) -> None:
    config = _load(args)
    config.require_datasets("test")
    model = H.load_model(config, _checkpoint(args))
    sequences = config.load_split("test")
    if not 0 <= args.index < len(sequences):
        raise ContractError(f"sequence index {args.index} out of range for {len(sequences)} sequences")
    result = H.probe(model, sequences[args.index], args.out)
    print(f"error rises with layer: {result.error_rises_with_layer}; bottom R correlation {result.bottom_r_correlation:.4g}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prednet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, needs_checkpoint=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="INI experiment config")
        p.add_argument("--seed", type=int, default=None, help="override [experiment] seed")
        p.add_argument("--out", required=True, help="output directory")
        if needs_checkpoint:
            p.add_argument("--checkpoint", default=None, help="PNCK file (default: <out>/model.pnck)")
        p.set_defaults(func=func)
        return p

    add("datagen", cmd_datagen, "generate train/val/test VSEQ datasets")
    add("train", cmd_train, "train a model and write model.pnck + train_log.csv")
    add("eval", cmd_eval, "metric suite with copy-baseline deltas", needs_checkpoint=True)
    p = add("extrapolate", cmd_extrapolate, "closed-loop extrapolation diagnostics", needs_checkpoint=True)
    p.add_argument("--t-start", type=int, action="append", help="repeatable; default from [eval]")
    p.add_argument("--n", type=int, default=None, help="extrapolation steps")
    p = add("probe", cmd_probe, "per-layer E/R activity trace", needs_checkpoint=True)
    p.add_argument("--index", type=int, default=0, help="test sequence to probe")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (PredNetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

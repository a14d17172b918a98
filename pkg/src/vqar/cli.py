"""Command-line entry point: ``vqar <command> [options]``.

Every command writes ``config.json`` (the parsed options plus argv) to its
output directory so a run can be repeated exactly.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__, forecaster, synth
from .data import TimeSeriesDataset, load_jsonl, read_metadata
from .errors import ConfigError, DataError, VQARError
from .metrics import COLUMNS
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train, write_train_log

logger = logging.getLogger("vqar")

DEFAULT_NOISE_LEVELS = "0,0.2,0.4,0.6,0.8,1.0"
DEFAULT_J_GRID = "2,4,8,16,32,64,128,256,512"


# ---------------------------------------------------------------------------
# argument helpers

def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_data(p: argparse.ArgumentParser, split: str) -> None:
    p.add_argument("--data", type=Path, required=True, help="directory with <split>.jsonl and metadata.json")
    p.add_argument("--metadata", type=Path, help="metadata.json path (default: inside --data)")
    p.add_argument("--split", default=split, help=f"which jsonl file to read (default: {split})")
    p.add_argument("--context-multiple", type=int,
                   help="context length as a multiple of the prediction length "
                        "(default: metadata context_length, else 6)")


def _add_train(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--head", choices=["gaussian", "student_t", "neg_binomial"], default=d.head)
    p.add_argument("--codebook-size", type=int, default=d.codebook_size)
    p.add_argument("--encoder-size", type=int, default=d.encoder_size)
    p.add_argument("--decoder-size", type=int, default=d.decoder_size)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--batches-per-epoch", type=int, default=d.batches_per_epoch)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--use-ema", type=_bool, default=d.use_ema, metavar="{true,false}")
    p.add_argument("--no-identity", action="store_true", help="drop the per-series embedding")
    p.add_argument("--no-quantize", action="store_true", help="plain autoregressive baseline")


def _add_eval(p: argparse.ArgumentParser) -> None:
    p.add_argument("--samples", type=int, default=forecaster.DEFAULT_SAMPLES)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqar", description="Vector-quantised autoregressive forecaster")
    parser.add_argument("--version", action="version", version=f"vqar {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        return p

    p = command("train", "fit a model and write checkpoint.bin and train_log.csv")
    _add_data(p, "train")
    _add_train(p)

    p = command("evaluate", "back-test a checkpoint on the last P points of every series")
    _add_data(p, "test")
    _add_eval(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = command("forecast", "sample paths past the end of every series")
    _add_data(p, "test")
    _add_eval(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--quantiles", type=_float_list, help="write these quantiles instead of raw samples")

    p = command("robustness", "evaluate with Gaussian noise added to the context window")
    _add_data(p, "test")
    _add_eval(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--noise-levels", type=_float_list, default=_float_list(DEFAULT_NOISE_LEVELS))

    p = command("zeroshot", "evaluate a checkpoint on a dataset it was not trained on")
    _add_data(p, "test")
    _add_eval(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = command("ablate", "train and evaluate one model per codebook size")
    _add_data(p, "train")
    _add_train(p)
    _add_eval(p)
    p.add_argument("--j-grid", type=_int_list, default=_int_list(DEFAULT_J_GRID))
    p.add_argument("--test-split", default="test")

    p = command("synth", "write the deterministic sinusoid suite")
    p.add_argument("--num-series", type=int, default=10)
    p.add_argument("--length", type=int, default=400)
    p.add_argument("--prediction-length", type=int, default=30)
    p.add_argument("--context-length", type=int, default=None)
    p.add_argument("--period", type=float, default=7.0)
    return parser


# ---------------------------------------------------------------------------
# shared plumbing

def _dataset(args, split: str | None = None) -> TimeSeriesDataset:
    meta = read_metadata(args.metadata or args.data / "metadata.json")
    if args.context_multiple is not None:
        if args.context_multiple < 1:
            raise ConfigError("--context-multiple must be positive")
        meta = dict(meta, context_length=args.context_multiple * int(meta["prediction_length"]))
    return load_jsonl(args.data / f"{split or args.split}.jsonl", meta)


def _train_config(args, **override) -> TrainConfig:
    cfg = dict(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
               batches_per_epoch=args.batches_per_epoch, codebook_size=args.codebook_size,
               encoder_size=args.encoder_size, decoder_size=args.decoder_size, head=args.head,
               use_ema=args.use_ema, quantize=not args.no_quantize, use_identity=not args.no_identity,
               seed=args.seed)
    cfg.update(override)
    return TrainConfig(**cfg)


def _echo(args, argv: Sequence[str]) -> None:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    cfg["argv"] = list(argv)
    cfg["version"] = __version__
    (args.out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _write_rows(path: Path, header: Sequence[str], rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _load(args) -> Checkpoint:
    if not args.checkpoint.exists():
        raise DataError(f"checkpoint {args.checkpoint} not found")
    return load_checkpoint(args.checkpoint)


def _report(ck: Checkpoint, ds: TimeSeriesDataset, args, noise: float = 0.0):
    return forecaster.evaluate(ck.model, ds, args.samples, args.seed, noise_level=noise)[0]


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    ds = _dataset(args)
    cfg = _train_config(args)
    ck = train(ds, cfg, on_epoch=lambda r: logger.info("epoch %(epoch)d loss %(mean_loss).5f", r))
    save_checkpoint(ck, args.out / "checkpoint.bin")
    write_train_log(args.out / "train_log.csv", ck.log)
    print(f"trained {cfg.epochs} epochs; final loss {ck.log[-1]['mean_loss']:.5f}")
    return 0


def cmd_evaluate(args) -> int:
    ck = _load(args)
    report = _report(ck, _dataset(args), args)
    (args.out / "eval_report.json").write_text(report.to_json())
    print(report.table())
    for flag in report.flags:
        print(f"note: {flag}")
    return 0


def cmd_forecast(args) -> int:
    ck = _load(args)
    ds = _dataset(args)
    forecaster.check_compatible(ck.model, ds)
    results = []
    for lo in range(0, ds.D, 64):
        chunk = ds.series[lo:lo + 64]
        results += forecaster.forecast_batch(ck.model, chunk, ds.prediction_length, ds.context_length,
                                             args.samples, args.seed, list(range(lo, lo + len(chunk))))
    forecaster.write_forecasts_jsonl(args.out / "forecast.jsonl", results, args.quantiles)
    if args.quantiles:
        forecaster.write_quantiles_csv(args.out / "quantiles.csv", results, args.quantiles, ds.freq)
    print(f"wrote {len(results)} forecasts of {ds.prediction_length} steps")
    return 0


def cmd_robustness(args) -> int:
    ck = _load(args)
    ds = _dataset(args)
    rows = []
    for level in args.noise_levels:
        if level < 0:
            raise ConfigError(f"noise levels must be non-negative, got {level}")
        report = _report(ck, ds, args, level)
        (args.out / f"eval_report_noise_{level:g}.json").write_text(report.to_json())
        rows.append({"noise_level": level, **report.metrics()})
        print(f"l={level:g} CRPS={report.crps:.4f}")
    _write_rows(args.out / "robustness.csv", ["noise_level", *COLUMNS], rows)
    return 0


def cmd_zeroshot(args) -> int:
    ck = _load(args)
    if ck.model.features.use_identity:
        raise ConfigError("zero-shot evaluation needs a checkpoint trained with --no-identity")
    report = _report(ck, _dataset(args), args)
    (args.out / "eval_report.json").write_text(report.to_json())
    print(report.table())
    return 0


def cmd_ablate(args) -> int:
    train_ds = _dataset(args)
    test_ds = _dataset(args, args.test_split)
    rows = []
    for J in args.j_grid:
        ck = train(train_ds, _train_config(args, codebook_size=J))
        report, _ = forecaster.evaluate(ck.model, test_ds, args.samples, args.seed)
        rows.append({"codebook_size": J, "seed": args.seed, **report.metrics()})
        print(f"J={J} CRPS={report.crps:.4f}")
    _write_rows(args.out / "ablation.csv", ["codebook_size", "seed", *COLUMNS], rows)
    return 0


def cmd_synth(args) -> int:
    synth.write_sinusoid_dataset(args.out, num_series=args.num_series, length=args.length,
                                 prediction_length=args.prediction_length, context_length=args.context_length,
                                 period=args.period)
    print(f"wrote {args.num_series} sinusoids to {args.out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
    "robustness": cmd_robustness,
    "zeroshot": cmd_zeroshot,
    "ablate": cmd_ablate,
    "synth": cmd_synth,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        _echo(args, argv)
        return COMMANDS[args.command](args)
    except VQARError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

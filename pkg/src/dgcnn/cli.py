"""Command-line entry point: ``train``, ``eval``, ``verify``, ``bench``, ``export-distances``.

Exit codes: 0 success, 1 verification failure, 2 usage/config/path error,
3 checkpoint or data mismatch, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench as B
from . import graph
from . import tensor as T
from . import verify as V
from .checkpoint import load_checkpoint, save_checkpoint
from .data import export_feature_distances, write_distance_csv
from .errors import CheckpointMismatch, DataError, NumericError, ParameterError
from .runconfig import build_datasets, build_model, load_config, stream_seeds, train_config
from .runtime import tune_allocator
from .train import (
    SIDES,
    EpochRecord,
    MetricsReport,
    evaluate_classification,
    evaluate_segmentation,
    random_dropout_eval,
    side_drop_eval,
    train_classifier,
    train_segmenter,
)

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_MISMATCH, EXIT_NUMERIC = 0, 1, 2, 3, 4

METRICS_HEADER = EpochRecord.FIELDS
EVAL_HEADER = ("mode", "keep_fraction", "side", "count", "overall_accuracy", "mean_class_accuracy", "miou",
               "per_class_accuracy")


def _log(msg: str) -> None:
    print(msg, flush=True)


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, name: str, payload: dict) -> None:
    (out / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _apply_numerics(cfg: dict) -> None:
    T.set_default_dtype(cfg.get("dtype", "float32"))
    T.set_strict(bool(cfg.get("strict_deterministic", False)))


# ----------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set, args.seed, args.strict_deterministic)
    out = _out_dir(args.out)
    _snapshot(out, "config.json", cfg)
    _apply_numerics(cfg)
    tune_allocator()
    splits = build_datasets(cfg)
    model = build_model(cfg)
    tc = train_config(cfg)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    t0 = time.perf_counter()
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fcsv, \
            open(out / "metrics.jsonl", "w", encoding="utf-8") as fjson:
        writer = csv.writer(fcsv)
        writer.writerow(METRICS_HEADER)

        def on_epoch(rec: EpochRecord) -> None:
            writer.writerow(rec.row())
            fcsv.flush()
            fjson.write(json.dumps({f: getattr(rec, f) for f in METRICS_HEADER}) + "\n")
            fjson.flush()
            _log(f"epoch {rec.epoch + 1}/{tc.epochs}  lr {rec.lr:.5f}  loss {rec.loss:.4f}  "
                 f"train acc {rec.train_accuracy:.4f}  test acc {rec.test_accuracy:.4f}  "
                 f"[{time.perf_counter() - t0:.1f}s]")

        def on_checkpoint(epoch: int) -> None:
            save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.ckpt", model)

        seed = stream_seeds(cfg["seed"])["train"]
        if cfg["task"] == "classification":
            train_classifier(model, splits["train"], tc, seed, splits.get("test"), on_epoch, on_checkpoint)
        else:
            train_segmenter(model, splits["train"], tc, seed, on_epoch)
    save_checkpoint(out / "model.ckpt", model)
    if cfg["task"] == "segmentation" and "test" in splits:
        report = evaluate_segmentation(model, splits["test"])
        _write_eval(out / "eval.csv", [("full", 1.0, "", report)])
        _log(report.summary())
    _log(f"wrote {out / 'model.ckpt'} after {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def _write_eval(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_HEADER)
        for mode, keep, side, rep in rows:
            w.writerow([mode, repr(float(keep)), side, rep.count, repr(rep.overall_accuracy),
                        repr(rep.mean_class_accuracy), repr(rep.miou),
                        ";".join(repr(a) for a in rep.per_class_accuracy)])


def _load_trained(args):
    cfg = load_config(args.config, args.set, args.seed, args.strict_deterministic)
    _apply_numerics(cfg)
    model = build_model(cfg)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    load_checkpoint(ckpt, model)
    return cfg, model


def cmd_eval(args) -> int:
    cfg, model = _load_trained(args)
    out = _out_dir(args.out)
    _snapshot(out, "eval_config.json", {**cfg, "checkpoint": str(args.checkpoint), "keep_fraction": args.keep_fraction,
                                        "side_drop": args.side_drop, "keep": args.keep})
    splits = build_datasets(cfg)
    test = splits.get(args.split)
    if test is None or len(test) == 0:
        raise ParameterError(f"dataset has no {args.split!r} split")
    if cfg["task"] == "segmentation":
        report = evaluate_segmentation(model, test)
        rows = [("full", 1.0, "", report)]
    elif args.side_drop:
        report = side_drop_eval(model, test, args.keep, args.side_drop)
        rows = [("side_drop", args.keep, args.side_drop, report)]
    elif args.keep_fraction < 1.0:
        rng = np.random.default_rng(cfg["seed"])
        report = random_dropout_eval(model, test, args.keep_fraction, rng)
        rows = [("random_dropout", args.keep_fraction, "", report)]
    else:
        report = evaluate_classification(model, test)
        rows = [("full", 1.0, "", report)]
    _write_eval(out / "eval.csv", rows)
    _log(_format_report(rows[0][0], report))
    return EXIT_OK


def _format_report(mode: str, rep: MetricsReport) -> str:
    lines = [f"{mode}: {rep.summary()}"]
    for c, acc in enumerate(rep.per_class_accuracy):
        lines.append(f"  class {c}: {acc:.4f}")
    return "\n".join(lines)


def cmd_verify(args) -> int:
    families = args.filter or None
    if args.inject_fault == "knn-ties":
        graph.set_tie_fault(True)
    try:
        results = V.run_suite(families, seed=args.seed or 0)
    finally:
        graph.set_tie_fault(False)
    table = V.format_table(results)
    print(table)
    failed = [r for r in results if not r.passed]
    if args.out:
        out = _out_dir(args.out)
        _snapshot(out, "verify_config.json", {"families": families or list(V.FAMILIES), "seed": args.seed or 0,
                                              "inject_fault": args.inject_fault})
        (out / "verify.txt").write_text(table + "\n", encoding="utf-8")
    if failed:
        print(f"\n{len(failed)} check(s) failed: " + ", ".join(f"{r.family}/{r.name}" for r in failed))
        return EXIT_VERIFY
    print(f"\nall {len(results)} checks passed")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def cmd_bench(args) -> int:
    if args.reps < 1 or args.classifier_reps < 0:
        raise ParameterError("--reps must be positive and --classifier-reps non-negative")
    out = _out_dir(args.out)
    T.set_default_dtype(args.dtype)
    tune_allocator()
    settings = {"sizes": args.sizes, "ks": args.ks, "features": args.features, "reps": args.reps,
                "classifier_n": args.classifier_n, "classifier_k": args.classifier_k,
                "classifier_reps": args.classifier_reps, "dtype": args.dtype, "seed": args.seed or 0}
    _snapshot(out, "bench_config.json", settings)
    rows = B.bench_grid(args.sizes, args.ks, args.features, args.reps, seed=args.seed or 0)
    if args.classifier_reps > 0:
        rows += B.bench_classifier(args.classifier_n, args.classifier_k, args.classifier_reps, seed=args.seed or 0)
    B.write_csv(out / "bench.csv", rows)
    print(",".join(B.CSV_HEADER))
    for r in rows:
        print(",".join(r.cells()))
    return EXIT_OK


def cmd_export_distances(args) -> int:
    cfg, model = _load_trained(args)
    out = _out_dir(args.out)
    splits = build_datasets(cfg)
    ds = splits.get(args.split)
    if ds is None or not 0 <= args.cloud < len(ds):
        raise ParameterError(f"cloud {args.cloud} not in split {args.split!r}")
    cloud = ds[args.cloud]
    dist = export_feature_distances(model, cloud, args.index, args.layer)
    _snapshot(out, "export_config.json", {**cfg, "checkpoint": str(args.checkpoint), "cloud": args.cloud,
                                          "index": args.index, "layer": args.layer, "split": args.split})
    path = out / f"distances_{args.layer}_{args.cloud}_{args.index}.csv"
    write_distance_csv(path, cloud.points, dist)
    _log(f"wrote {path}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def _common_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="desk", help="preset name or JSON config file (default: desk)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, e.g. train.epochs=5 (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--strict-deterministic", action="store_true",
                   help="row-order-independent accumulation for bitwise reproducibility")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgcnn", description="Dynamic graph CNN for point clouds.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write metrics and checkpoints")
    _common_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--keep-fraction", type=float, default=1.0, help="random input dropout: fraction of points kept")
    p.add_argument("--side-drop", choices=sorted(SIDES), default=None, help="drop points from one side")
    p.add_argument("--keep", type=float, default=0.5, help="fraction kept by --side-drop (default 0.5)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the invariance and gradient suite")
    p.add_argument("--filter", action="append", choices=V.FAMILIES, help="run only this family (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--inject-fault", choices=["knn-ties"], default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time k-NN, EdgeConv and classifier forward passes")
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", type=_int_list, default=[256, 1024])
    p.add_argument("--ks", type=_int_list, default=[10, 20])
    p.add_argument("--features", type=_int_list, default=[3, 64])
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--classifier-n", type=int, default=1024)
    p.add_argument("--classifier-k", type=int, default=20)
    p.add_argument("--classifier-reps", type=int, default=50)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-distances", help="feature-space distances from one point, as CSV")
    _common_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--cloud", type=int, default=0)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--layer", default="edgeconv1", help="input, transform or edgeconv<l>")
    p.set_defaults(func=cmd_export_distances)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: path: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointMismatch as exc:
        print(f"error: checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParameterError, ValueError, KeyError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        T.set_strict(False)


if __name__ == "__main__":
    sys.exit(main())

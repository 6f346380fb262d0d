"""Command line interface.

Exit codes: 0 success, 1 domain or validation error, 2 I/O error.
Output files are written to a temporary sibling and renamed into place, so a
failed command never leaves a partial file behind.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import balance, labelstore, loss, metrics, trainer

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2

GRAD_CHECK_LIMIT = 1e-5


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_DOMAIN):
        super().__init__(message)
        self.code = code


def _write_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out: str | None) -> None:
    if out:
        _write_atomic(out, text)
    else:
        sys.stdout.write(text)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _load_db(path: str) -> labelstore.MergedDatabase:
    return labelstore.load(path)


# --------------------------------------------------------------------------
# subcommands


def cmd_merge(args) -> int:
    if len(args.descriptor) != len(args.table):
        raise CliError("give one --table per --descriptor, in the same order")
    descriptors = [labelstore.load_descriptor(p) for p in args.descriptor]
    tables = {}
    for desc, path in zip(descriptors, args.table):
        tables[desc.name] = labelstore.read_label_table(path)
    db = labelstore.merge(descriptors, tables)
    _write_atomic(args.out, labelstore.dumps(db))
    frac = labelstore.missing_fraction(db) if len(db) else float("nan")
    if args.format == "jsonl":
        print(_dumps({"records": len(db), "classes": len(db.class_names), "missing_fraction": frac}))
    else:
        print(f"records: {len(db)}")
        print(f"classes: {len(db.class_names)}")
        print(f"missing fraction: {frac:.4f}")
    return EXIT_OK


def cmd_stats(args) -> int:
    db = _load_db(args.db)
    if len(db) == 0:
        raise CliError("database has no records")
    hist = labelstore.class_histogram(db)
    frac = labelstore.missing_fraction(db)
    if args.format == "jsonl":
        lines = [
            _dumps({"class": c, "displayed": d, "not_displayed": n, "unknown": u})
            for c, d, n, u in hist.rows()
        ]
        d, n, u = hist.totals()
        lines.append(
            _dumps({"class": None, "displayed": d, "not_displayed": n, "unknown": u,
                    "records": len(db), "missing_fraction": frac})
        )
    else:
        lines = ["class,displayed,not_displayed,unknown"]
        lines += [f"{c},{d},{n},{u}" for c, d, n, u in hist.rows()]
        d, n, u = hist.totals()
        lines.append(f"total,{d},{n},{u}")
        lines.append(f"# records {len(db)}, missing fraction {frac:.4f}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def _select(db, threshold: int):
    selected = balance.occurrence_filter(db, balance.SelectionConfig(threshold))
    if not selected:
        raise CliError(f"no class reaches {threshold} displayed labels")
    return selected, balance.drop_all_unknown(db, selected)


def cmd_filter(args) -> int:
    db = _load_db(args.db)
    selected, kept = _select(db, args.threshold)
    out = kept.select_classes(selected)
    _write_atomic(args.out, labelstore.dumps(out))
    if args.format == "jsonl":
        print(_dumps({"selected_classes": selected, "records": len(out), "dropped": len(db) - len(out)}))
    else:
        print("selected: " + ", ".join(selected))
        print(f"records: {len(out)} (dropped {len(db) - len(out)})")
    return EXIT_OK


def cmd_balance(args) -> int:
    db = _load_db(args.db)
    selected, kept = _select(db, args.threshold)
    before = balance.imbalance_ratio(kept, selected)
    target = "min-max" if args.target is None else args.target
    plan = balance.greedy_balance(kept, selected, target=target, max_iterations=args.max_iterations)
    _write_atomic(args.out, plan.dumps())
    if args.format == "jsonl":
        print(_dumps({"selected_classes": selected, "ratio_before": before, "ratio": plan.ratio,
                      "achieved_counts": plan.achieved_counts, "iterations": plan.iterations}))
    else:
        print("selected: " + ", ".join(selected))
        print(f"imbalance ratio: {before:.4f} -> {plan.ratio:.4f} after {plan.iterations} copies")
        for c in selected:
            print(f"  {c}: {plan.achieved_counts[c]}")
    return EXIT_OK


def _read_predictions(path: str, db: labelstore.MergedDatabase) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CliError(f"{path}: empty prediction file") from None
        if not header or header[0] != "sample_id":
            raise CliError(f"{path}:1: header must start with sample_id")
        classes = header[1:]
        for i, (a, b) in enumerate(zip(classes, db.class_names)):
            if a != b:
                raise CliError(f"class axis mismatch at position {i}: prediction {a!r} vs database {b!r}")
        if len(classes) != len(db.class_names):
            longer = classes if len(classes) > len(db.class_names) else db.class_names
            raise CliError(f"class axis mismatch: {longer[min(len(classes), len(db.class_names))]!r} "
                           "present on one side only")
        rows: dict[str, list[float]] = {}
        for lineno, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise CliError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                values = [float(c) for c in cells[1:]]
            except ValueError:
                raise CliError(f"{path}:{lineno}: non-numeric probability") from None
            if any(not 0.0 <= v <= 1.0 for v in values):
                raise CliError(f"{path}:{lineno}: probability outside [0, 1]")
            if cells[0] in rows:
                raise CliError(f"{path}:{lineno}: duplicate sample_id {cells[0]!r}")
            rows[cells[0]] = values
    missing = [s for s in db.sample_ids if s not in rows]
    if missing:
        raise CliError(f"no prediction for sample {missing[0]!r}")
    return np.array([rows[s] for s in db.sample_ids], dtype=np.float64).reshape(len(db), -1)


def _read_weights(spec: str) -> tuple[str, dict[str, int]]:
    name, sep, path = spec.partition("=")
    if not sep:
        name, path = Path(spec).stem, spec
    if path.endswith(".csv"):
        counts = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or (lineno == 1 and row[0].strip() == "class"):
                    continue
                try:
                    counts[row[0].strip()] = int(row[1])
                except (IndexError, ValueError):
                    raise CliError(f"{path}:{lineno}: expected class,count") from None
        return name, counts
    return name, labelstore.load(path).displayed_counts()


def _read_scores(path: str) -> dict[str, float | None]:
    scores: dict[str, float | None] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and row[0].strip() == "class"):
                continue
            try:
                raw = row[1].strip()
                scores[row[0].strip()] = None if raw in ("", "skipped") else float(raw)
            except (IndexError, ValueError):
                raise CliError(f"{path}:{lineno}: expected class,f1") from None
    return scores


def cmd_evaluate(args) -> int:
    weights = dict(_read_weights(w) for w in args.weights or [])
    if args.scores:
        if args.db or args.predictions:
            raise CliError("--scores replaces the database and prediction arguments")
        report = metrics.report_from_scores(_read_scores(args.scores), weights=weights)
    else:
        if not (args.db and args.predictions):
            raise CliError("evaluate needs a database and a prediction file (or --scores)")
        db = _load_db(args.db)
        pred = _read_predictions(args.predictions, db)
        report = metrics.evaluate(db.labels, pred, db.class_names, args.threshold, weights)
    if args.format == "jsonl":
        text = report.to_json() + "\n"
    else:
        text = report.format_table() + "\n"
    _emit(text, args.out)
    return EXIT_OK


def demo_config(args) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )


def cmd_train_demo(args) -> int:
    config = demo_config(args)
    x, labels = trainer.synth_dataset(
        args.seed, args.samples, args.features, args.classes, args.missingness, args.noise
    )
    model = trainer.ToyModel.zeros(x.shape[1], labels.class_names)
    report = trainer.fit(model, x, labels, config)
    if args.report:
        _write_atomic(args.report, report.to_json() + "\n")
    if args.model:
        _write_atomic(args.model, json.dumps(report.best_model.to_dict(), sort_keys=True) + "\n")
    best = report.best
    summary = {
        "best_epoch": report.best_epoch,
        "best_macro_f1": best.validation.macro_f1 if best else None,
        "best_accuracy": best.validation.accuracy if best else None,
        "final_macro_f1": report.history[-1].validation.macro_f1 if report.history else None,
        "first_train_loss": report.history[0].train_loss if report.history else None,
        "last_train_loss": report.history[-1].train_loss if report.history else None,
    }
    if args.format == "jsonl":
        print(_dumps(summary))
    else:
        for e in report.history:
            v = e.validation
            print(f"epoch {e.epoch:3d}  loss {e.train_loss:.4f}  val F1 {v.macro_f1:.4f}  "
                  f"acc {v.accuracy:.4f}  score {e.selection_score:.4f}")
        if best is None:
            print("no epochs run")
        else:
            print(f"best epoch: {report.best_epoch}")
            print(f"best macro F1: {best.validation.macro_f1:.4f}")
    return EXIT_OK


def _grad_fixture(args):
    if args.fixture:
        with open(args.fixture, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise CliError(f"{args.fixture}:{exc.lineno}: {exc.msg}") from None
        try:
            names = tuple(data["class_names"])
            truth = labelstore.LabelMatrix(names, np.array(data["truth"], dtype=np.int8))
            pred = labelstore.PredictionMatrix(names, np.array(data["pred"], dtype=np.float64))
        except KeyError as exc:
            raise CliError(f"fixture lacks {exc.args[0]!r}") from None
        return pred, truth
    rng = trainer._rng(args.seed, 3)
    y = (rng.random((args.samples, args.classes)) < 0.5).astype(np.int8)
    y[rng.random(y.shape) < args.missingness] = labelstore.UNKNOWN
    names = tuple(f"AU{i + 1:02d}" for i in range(args.classes))
    return labelstore.PredictionMatrix(names, rng.random(y.shape)), labelstore.LabelMatrix(names, y)


def cmd_grad_check(args) -> int:
    pred, truth = _grad_fixture(args)
    config = loss.SoftF1Config(epsilon=args.epsilon)
    result = loss.soft_f1_loss(pred, truth, config)
    err = loss.finite_difference_check(pred, truth, config, step=args.step)
    if args.format == "jsonl":
        print(_dumps({"max_relative_error": err, "loss": result.loss,
                      "per_class_soft_f1": result.per_class_soft_f1,
                      "annotated_counts": result.annotated_counts}))
    else:
        print(f"loss: {result.loss:.6f}")
        for c, v in result.per_class_soft_f1.items():
            shown = "skipped" if v is None else f"{v:.6f}"
            print(f"  {c}: soft F1 {shown}  (annotated {result.annotated_counts[c]})")
        print(f"max relative error: {err:.3e}")
    return EXIT_OK if err < GRAD_CHECK_LIMIT else EXIT_DOMAIN


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    common.add_argument("--format", choices=("table", "jsonl"), default="table")

    parser = argparse.ArgumentParser(
        prog="aumask", description="Multi-label learning with missing labels."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", parents=[common], help="merge per-dataset tables into one database")
    p.add_argument("--descriptor", action="append", default=[], required=True)
    p.add_argument("--table", action="append", default=[], required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("stats", parents=[common], help="per-class displayed/not displayed/unknown counts")
    p.add_argument("db")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("filter", parents=[common], help="keep frequent classes, drop all-unknown records")
    p.add_argument("db")
    p.add_argument("--threshold", type=int, default=20000, help="minimum displayed count")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("balance", parents=[common], help="oversampling plan for the selected classes")
    p.add_argument("db")
    p.add_argument("--threshold", type=int, default=20000, help="minimum displayed count")
    p.add_argument("--target", type=int, help="per-class target count (default: equalize)")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("evaluate", parents=[common], help="masked F1 / accuracy report")
    p.add_argument("db", nargs="?")
    p.add_argument("predictions", nargs="?")
    p.add_argument("--threshold", type=float, default=0.5, help="binarization threshold")
    p.add_argument("--weights", action="append", metavar="NAME=PATH",
                   help="occurrence weights from a database file or a class,count CSV")
    p.add_argument("--scores", help="class,f1 CSV instead of a database and predictions")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train-demo", parents=[common], help="train the toy model on synthetic data")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--features", type=int, default=10)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--missingness", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--lr", type=float, default=trainer.DEMO_LEARNING_RATE)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--report", help="write the training report here")
    p.add_argument("--model", help="write the best model here")
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the loss gradient")
    p.add_argument("fixture", nargs="?", help="JSON with class_names, truth, pred")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--missingness", type=float, default=0.5)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--epsilon", type=float, default=loss.SoftF1Config.epsilon)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"aumask {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (labelstore.ParseError, OSError) as exc:
        print(f"aumask {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"aumask {args.command}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``train``, ``evaluate`` and ``report``.

Exit codes: 0 success, 1 run failure (training, cluster), 2 invalid
configuration or arguments, 3 unreadable data, 4 feature-schema mismatch.
Log verbosity comes from ``AUTOENSEMBLE_LOG_LEVEL`` (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cluster import run_cluster
from .config import load_run_config
from .data import load_csv
from .ensemble import accuracy, margin_error
from .errors import AutoEnsembleError, ConfigError, DataError, SchemaError
from .export import ExportedModel, align_features, export_model, load_model
from .search import AutoEnsembleSearch, read_metrics

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA, EXIT_SCHEMA = 0, 1, 2, 3, 4

SUMMARY_COLUMNS = (
    "iteration", "selected_candidate", "num_subnetworks", "score", "objective", "l1_norm",
    "train_accuracy", "eval_accuracy", "margin_error", "bound_total", "train_step",
)
SERIES_COLUMNS = ("train_step", "iteration", "candidate_id", "selected", "train_accuracy", "eval_accuracy")

log = logging.getLogger("autoensemble")


def cmd_train(config_path, output_dir: Optional[str] = None) -> int:
    cfg = load_run_config(config_path)
    out = Path(output_dir) if output_dir else cfg.output_dir
    train = load_csv(cfg.train_path, cfg.label_column, "train")
    eval_data = load_csv(cfg.eval_path, cfg.label_column, "eval") if cfg.eval_path else None
    if eval_data is not None and eval_data.feature_names != train.feature_names:
        raise SchemaError(
            f"eval columns {list(eval_data.feature_names)} differ from train columns {list(train.feature_names)}"
        )
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True, default=str))
    if cfg.cluster.num_workers > 1:
        best = run_cluster(cfg.cluster, cfg.search, train, eval_data, out).best
    else:
        best = AutoEnsembleSearch(cfg.search, out).run(train, eval_data).best
    model = ExportedModel(best, train.feature_names, cfg.label_column, cfg.search.objective.rho)
    export_model(model, out / "export")
    print(f"selected {best.candidate_id}: {len(best.subnetworks)} subnetwork(s), "
          f"train accuracy {accuracy(model.logits(train.X), train.y):.4f}")
    print(f"model exported to {out / 'export'}")
    return EXIT_OK


def evaluate_model(model: ExportedModel, data_path) -> list[tuple[str, str]]:
    path = Path(data_path)
    with path.open(newline="") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise DataError(f"{path}: file is empty")
    if model.label_column not in [h.strip() for h in header]:
        raise SchemaError(f"{path}: label column {model.label_column!r} missing")
    data = load_csv(path, model.label_column, "eval")
    X = align_features(model, data.feature_names, data.X)
    f = model.logits(X)
    rows = [
        ("examples", str(data.m)),
        ("accuracy", repr(accuracy(f, data.y))),
        (f"margin_error@{model.rho!r}", repr(margin_error(f, data.y, model.rho))),
    ]
    for sn, w in zip(model.ensemble.subnetworks, model.ensemble.weights):
        rows.append((f"abs_weight[{sn.id}]", repr(abs(float(w)))))
    return rows


def cmd_evaluate(model_dir, data_path, out_path=None) -> int:
    model = load_model(model_dir)
    rows = evaluate_model(model, data_path)
    for k, v in rows:
        print(f"{k}\t{v}")
    out = Path(out_path) if out_path else Path(model_dir) / "evaluation.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    w.writerows(rows)
    out.write_text(buf.getvalue())
    return EXIT_OK


def _write_rows(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r.get(c, "") for c in columns})
    path.write_text(buf.getvalue())


def build_report(metrics: Sequence[dict]) -> tuple[list[dict], list[dict]]:
    """Per-iteration summary of the selected candidate, plus the accuracy-per-step series."""
    cands = [r for r in metrics if r["record"] == "candidate"]
    if not cands:
        raise DataError("metrics.csv has no candidate rows")
    summary = []
    for r in cands:
        if r["selected"] == "1":
            summary.append({
                "iteration": r["iteration"],
                "selected_candidate": r["candidate_id"],
                "num_subnetworks": str(len(r["members"].split("|"))),
                **{k: r[k] for k in ("score", "objective", "l1_norm", "train_accuracy",
                                     "eval_accuracy", "margin_error", "bound_total", "train_step")},
            })
    summary.sort(key=lambda r: int(r["iteration"]))
    series = [{k: r[k] for k in SERIES_COLUMNS if k != "candidate_id"} | {"candidate_id": r["candidate_id"]}
              for r in cands]
    series.sort(key=lambda r: (int(r["train_step"]), int(r["iteration"]), r["candidate_id"]))
    return summary, series


def cmd_report(run_dir) -> int:
    run_dir = Path(run_dir)
    path = run_dir / "metrics.csv"
    if not path.is_file():
        raise ConfigError(f"no metrics.csv in {run_dir}")
    metrics = read_metrics(path)
    if not metrics:
        raise DataError(f"{path} is empty")
    summary, series = build_report(metrics)
    _write_rows(run_dir / "summary.csv", SUMMARY_COLUMNS, summary)
    _write_rows(run_dir / "accuracy_series.csv", SERIES_COLUMNS, series)
    print("\t".join(SUMMARY_COLUMNS))
    for r in summary:
        print("\t".join(r[c] for c in SUMMARY_COLUMNS))
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="autoensemble", description="Adaptive ensemble search.")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="run a search from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--output-dir", help="override output_dir from the config")
    e = sub.add_parser("evaluate", help="score an exported model on a CSV file")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="metrics CSV path (default: <model>/evaluation.csv)")
    r = sub.add_parser("report", help="summarise a run's metrics.csv")
    r.add_argument("--run", required=True)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("AUTOENSEMBLE_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.output_dir)
        if args.command == "evaluate":
            return cmd_evaluate(args.model, args.data, args.out)
        return cmd_report(args.run)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AutoEnsembleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

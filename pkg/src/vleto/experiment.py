"""End-to-end experiment runs, metric files, and run comparison."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import VerticalDataset, generate_synthetic, load_csv, partition_vertically
from .errors import ComparisonError, ConfigError, NumericalError
from .protocol import Orchestrator, TaskMetrics

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("task_id", "eval_task", "accuracy", "loss", "wall_ms")
AGGREGATE = "all"


def build_dataset(config: ExperimentConfig) -> VerticalDataset:
    d = config.data
    if d.source == "synthetic":
        ds = generate_synthetic(d.n_samples, d.n_features, d.n_classes, d.class_separation, seed=config.seed)
        if config.k_parties > ds.n_features:
            raise ConfigError(f"{config.k_parties} parties but only {ds.n_features} features", "k_parties")
        return ds.with_partition(partition_vertically(ds.n_features, config.k_parties))
    spec = d.partition if d.partition is not None else config.k_parties
    ds = load_csv(d.path, d.label_column, spec)
    if len(ds.partition) != config.k_parties:
        raise ConfigError(f"partition defines {len(ds.partition)} parties, k_parties is {config.k_parties}",
                          "data.partition")
    return ds


@dataclass
class RunResult:
    metrics: list[TaskMetrics]
    output_dir: Path
    orchestrator: Orchestrator


def metric_rows(metrics: list[TaskMetrics], record_wall_time: bool = False) -> list[dict]:
    rows = []
    for m in metrics:
        wall = f"{m.wall_ms:.1f}" if record_wall_time else "0"
        for j in sorted(m.accuracies):
            rows.append({"task_id": m.task_id, "eval_task": j, "accuracy": f"{m.accuracies[j]:.6f}",
                         "loss": f"{m.train_loss:.6f}", "wall_ms": wall})
        rows.append({"task_id": m.task_id, "eval_task": AGGREGATE, "accuracy": f"{m.aggregate:.6f}",
                     "loss": f"{m.train_loss:.6f}", "wall_ms": wall})
    return rows


def write_metrics(metrics: list[TaskMetrics], path, record_wall_time: bool = False) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(metric_rows(metrics, record_wall_time))


def run_experiment(config: ExperimentConfig, output_dir=None, export_prototypes: bool = False,
                   dump_fisher: bool = False, dump_trace: bool = False, dataset: VerticalDataset | None = None
                   ) -> RunResult:
    """Run every task of ``config`` and write its artefacts into ``output_dir``."""
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json() + "\n", encoding="utf-8")
    ds = dataset if dataset is not None else build_dataset(config)
    trace = [] if dump_trace else None
    orch = Orchestrator(config, ds, trace=trace)
    try:
        metrics = orch.run()
    except NumericalError as exc:
        diag = {"error": str(exc), "config": config.to_dict(),
                "completed_tasks": [m.__dict__ for m in orch.history]}
        (out / "diagnostic.json").write_text(json.dumps(diag, indent=2, default=str), encoding="utf-8")
        logger.error("aborting: %s (diagnostics in %s)", exc, out / "diagnostic.json")
        raise
    write_metrics(metrics, out / "metrics.csv", config.record_wall_time)
    (out / "timing.json").write_text(json.dumps({m.task_id: round(m.wall_ms, 3) for m in metrics}), encoding="utf-8")
    if export_prototypes:
        with open(out / "prototypes.json", "w", encoding="utf-8") as fh:
            json.dump(orch.prototype_records, fh)
    if dump_fisher:
        for rec in orch.fisher_records:
            path = out / f"fisher_{rec['party_id']}_{rec['task_id']}.json"
            path.write_text(json.dumps(rec), encoding="utf-8")
    if dump_trace:
        with open(out / "trace.jsonl", "w", encoding="utf-8") as fh:
            for rec in trace:
                fh.write(json.dumps(rec) + "\n")
    return RunResult(metrics, out, orch)


# -- comparison -------------------------------------------------------------

def read_metrics(path) -> dict[tuple[int, str], float]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(METRIC_COLUMNS) - set(reader.fieldnames):
            raise ComparisonError(f"{path}: not a metrics file")
        return {(int(r["task_id"]), r["eval_task"]): float(r["accuracy"]) for r in reader}


def avg_accuracy(table: dict[tuple[int, str], float]) -> float:
    """Mean over tasks of the post-task aggregate accuracy."""
    vals = [v for (t, e), v in sorted(table.items()) if e == AGGREGATE]
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class Comparison:
    names: list[str]
    keys: list[tuple[int, str]]
    values: list[dict]
    avgs: list[float]

    def deltas(self, i: int) -> dict:
        return {k: self.values[i][k] - self.values[0][k] for k in self.keys}

    def avg_delta(self, i: int) -> float:
        return self.avgs[i] - self.avgs[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["task_id", "eval_task"] + self.names
        header += [f"delta_{n}" for n in self.names[1:]]
        w.writerow(header)
        for k in self.keys:
            row = [k[0], k[1]] + [f"{v[k]:.6f}" for v in self.values]
            row += [f"{self.values[i][k] - self.values[0][k]:+.6f}" for i in range(1, len(self.names))]
            w.writerow(row)
        row = ["AVG", ""] + [f"{a:.6f}" for a in self.avgs]
        row += [f"{self.avg_delta(i):+.6f}" for i in range(1, len(self.names))]
        w.writerow(row)
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(12, *(len(n) for n in self.names))
        head = f"{'task':>5} {'eval':>5} " + " ".join(f"{n:>{width}}" for n in self.names)
        head += "".join(f" {'d:' + n:>{width}}" for n in self.names[1:])
        lines = [head]
        for k in self.keys:
            line = f"{k[0]:>5} {k[1]:>5} " + " ".join(f"{v[k]:>{width}.4f}" for v in self.values)
            line += "".join(f" {self.values[i][k] - self.values[0][k]:>+{width}.4f}" for i in range(1, len(self.names)))
            lines.append(line)
        line = f"{'AVG':>5} {'':>5} " + " ".join(f"{a:>{width}.4f}" for a in self.avgs)
        line += "".join(f" {self.avg_delta(i):>+{width}.4f}" for i in range(1, len(self.names)))
        lines.append(line)
        return "\n".join(lines)


def compare_runs(paths, names=None) -> Comparison:
    """Per-row and AVG accuracy deltas of each run against the first."""
    paths = [Path(p) for p in paths]
    if len(paths) < 2:
        raise ComparisonError("need at least two metrics files")
    tables = [read_metrics(p) for p in paths]
    keys = sorted(tables[0], key=lambda k: (k[0], k[1] == AGGREGATE, int(k[1]) if k[1] != AGGREGATE else 0))
    for p, t in zip(paths[1:], tables[1:]):
        if set(t) != set(keys):
            raise ComparisonError(f"{p}: task schedule differs from {paths[0]}")
    names = names or _short_names(paths)
    return Comparison(list(names), keys, tables, [avg_accuracy(t) for t in tables])


def _short_names(paths) -> list[str]:
    parents = [p.parent.name or p.stem for p in paths]
    if len(set(parents)) == len(parents):
        return parents
    return [f"run{i}" for i in range(len(paths))]

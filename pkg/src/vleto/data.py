"""Vertically partitioned datasets and CIL/FIL task schedules."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import ConfigError, IngestionError

CIL = "CIL"
FIL = "FIL"


class PartyView:
    """Read-only feature access for one party. Deliberately has no route to labels."""

    def __init__(self, features: np.ndarray, columns: tuple[int, ...]):
        self._features = features
        self.columns = columns

    def rows(self, rows, columns=None) -> np.ndarray:
        cols = self.columns if columns is None else columns
        illegal = set(cols) - set(self.columns)
        if illegal:
            raise PermissionError(f"columns {sorted(illegal)} belong to another party")
        return self._features[np.ix_(np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))]


@dataclass(frozen=True)
class VerticalDataset:
    features: np.ndarray
    _labels: np.ndarray = field(repr=False)
    partition: Mapping[int, tuple[int, ...]]
    n_classes: int
    column_names: tuple[str, ...] = ()

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        feats.setflags(write=False)
        labels = np.asarray(self._labels, dtype=np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "_labels", labels)
        object.__setattr__(self, "partition", {int(k): tuple(int(c) for c in v) for k, v in self.partition.items()})
        if not self.column_names:
            object.__setattr__(self, "column_names", tuple(f"f{i}" for i in range(feats.shape[1])))
        if feats.ndim != 2 or labels.shape != (feats.shape[0],):
            raise ConfigError("features/labels shapes are inconsistent")
        cols = sorted(c for block in self.partition.values() for c in block)
        if cols != list(range(feats.shape[1])):
            raise ConfigError("partition blocks must be disjoint and cover every column", "partition")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ConfigError("label outside [0, n_classes)")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def active_view(self) -> np.ndarray:
        """Labels; only the active party should call this."""
        return self._labels

    def passive_view(self, party_id: int) -> PartyView:
        return PartyView(self.features, self.partition[party_id])

    def with_partition(self, partition: Mapping[int, tuple[int, ...]]) -> "VerticalDataset":
        return VerticalDataset(self.features, self._labels, partition, self.n_classes, self.column_names)


@dataclass(frozen=True)
class TaskDescriptor:
    task_id: int
    mode: str
    class_set: frozenset[int]
    feature_view: Mapping[int, tuple[int, ...]]
    epochs: int = 1
    batch_size: int = 32


@dataclass(frozen=True)
class TaskSchedule:
    tasks: tuple[TaskDescriptor, ...]

    def __post_init__(self):
        if [t.task_id for t in self.tasks] != list(range(len(self.tasks))):
            raise ConfigError("task ids must be 0..T-1 in order")

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self) -> Iterator[TaskDescriptor]:
        return iter(self.tasks)

    def __getitem__(self, i) -> TaskDescriptor:
        return self.tasks[i]

    @property
    def mode(self) -> str:
        return self.tasks[0].mode


def _split_sizes(n: int, k: int) -> list[int]:
    base, extra = divmod(n, k)
    return [base + 1 if i < extra else base for i in range(k)]


def partition_vertically(features, k_parties: int, seed=None, shuffle: bool = False) -> dict[int, tuple[int, ...]]:
    """Contiguous near-equal column blocks, larger blocks first.

    With ``shuffle`` the columns are permuted by ``seed`` before blocking.
    """
    m = np.asarray(features).shape[1] if np.ndim(features) == 2 else int(features)
    if k_parties < 1:
        raise ConfigError("need at least one party", "k_parties")
    if k_parties > m:
        raise ConfigError(f"{k_parties} parties but only {m} feature columns", "k_parties")
    order = list(range(m))
    if shuffle:
        order = [int(c) for c in np.random.default_rng(seed).permutation(m)]
    out, start = {}, 0
    for pid, size in enumerate(_split_sizes(m, k_parties)):
        out[pid] = tuple(sorted(order[start:start + size]) if shuffle else order[start:start + size])
        start += size
    return out


def make_cil_schedule(n_classes: int, n_tasks: int, partition=None, epochs: int = 1, batch_size: int = 32) -> TaskSchedule:
    if n_tasks < 1:
        raise ConfigError("need at least one task", "n_tasks")
    if n_tasks > n_classes:
        raise ConfigError(f"{n_tasks} tasks for only {n_classes} classes", "n_tasks")
    view = dict(partition or {})
    tasks, start = [], 0
    for t, size in enumerate(_split_sizes(n_classes, n_tasks)):
        classes = frozenset(range(start, start + size))
        start += size
        tasks.append(TaskDescriptor(t, CIL, classes, view, epochs, batch_size))
    return TaskSchedule(tuple(tasks))


def fil_view_size(n_columns: int, task: int, n_tasks: int) -> int:
    return min(n_columns, math.ceil((task + 1) * n_columns / n_tasks))


def make_fil_schedule(partition, n_tasks: int, n_classes: int | None = None, epochs: int = 1,
                      batch_size: int = 32, growing_parties=None) -> TaskSchedule:
    """Cumulative feature views: task t shows the first ceil((t+1)/T * n) columns of each growing party.

    Parties not listed in ``growing_parties`` (default: all grow) expose every column from task 0.
    Parties with fewer columns than tasks simply repeat a view size.
    """
    if n_tasks < 1:
        raise ConfigError("need at least one task", "n_tasks")
    growing = set(partition) if growing_parties is None else set(growing_parties)
    classes = frozenset(range(n_classes)) if n_classes is not None else frozenset()
    tasks = []
    for t in range(n_tasks):
        view = {}
        for pid, cols in partition.items():
            size = fil_view_size(len(cols), t, n_tasks) if pid in growing else len(cols)
            view[pid] = tuple(cols[:size])
        tasks.append(TaskDescriptor(t, FIL, classes, view, epochs, batch_size))
    return TaskSchedule(tuple(tasks))


def generate_synthetic(n_samples: int, n_features: int, n_classes: int, class_separation: float,
                       seed=0, k_parties: int = 1) -> VerticalDataset:
    """Balanced Gaussian blobs with unit variance around class means on a sphere of radius ``class_separation``."""
    if min(n_samples, n_features, n_classes) < 1:
        raise ConfigError("sample, feature and class counts must be >= 1")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((n_classes, n_features))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    means = class_separation * directions / norms
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    features = means[labels] + rng.standard_normal((n_samples, n_features))
    return VerticalDataset(features, labels, partition_vertically(n_features, k_parties), n_classes)


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise IngestionError(f"non-numeric feature value {cell!r}", row=row, column=column) from None
    if not math.isfinite(v):
        raise IngestionError(f"non-finite feature value {cell!r}", row=row, column=column)
    return v


def _index_labels(raw: list[str]) -> tuple[np.ndarray, list[str]]:
    try:
        ints = [int(v) for v in raw]
    except ValueError:
        ints = None
    if ints is not None:
        order = sorted(set(ints))
        lookup = {v: i for i, v in enumerate(order)}
        return np.array([lookup[v] for v in ints], dtype=np.int64), [str(v) for v in order]
    lookup: dict[str, int] = {}
    for v in raw:
        lookup.setdefault(v, len(lookup))
    return np.array([lookup[v] for v in raw], dtype=np.int64), list(lookup)


def load_csv(path, label_column: str = "label", partition_spec=None) -> VerticalDataset:
    """Read a header-row CSV into a z-scored VerticalDataset.

    ``partition_spec`` is ``None`` (one party), an int (contiguous blocks), or a
    mapping of party id to a list of column names.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise IngestionError("empty file", row=1)
        header = [h.strip() for h in header]
        if label_column not in header:
            raise IngestionError("label column missing from header", row=1, column=label_column)
        li = header.index(label_column)
        names = [h for i, h in enumerate(header) if i != li]
        rows, raw_labels = [], []
        for rno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise IngestionError(f"expected {len(header)} cells, found {len(rec)}", row=rno)
            raw_labels.append(rec[li].strip())
            rows.append([_parse_float(c.strip(), rno, header[i]) for i, c in enumerate(rec) if i != li])
    if not rows:
        raise IngestionError("no data rows", row=2)
    x = np.array(rows, dtype=np.float64)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    x = (x - x.mean(axis=0)) / std
    labels, classes = _index_labels(raw_labels)

    if partition_spec is None:
        partition = {0: tuple(range(len(names)))}
    elif isinstance(partition_spec, int):
        partition = partition_vertically(len(names), partition_spec)
    else:
        partition = {}
        for pid, cols in partition_spec.items():
            idx = []
            for c in cols:
                if c not in names:
                    raise IngestionError("partition names an unknown column", column=c)
                idx.append(names.index(c))
            partition[int(pid)] = tuple(idx)
    return VerticalDataset(x, labels, partition, len(classes), tuple(names))


def write_csv(dataset: VerticalDataset, path, label_column: str = "label") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(dataset.column_names) + [label_column])
        for x, y in zip(dataset.features, dataset.active_view()):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


@dataclass(frozen=True)
class TaskSplit:
    train: np.ndarray
    test: np.ndarray


def _stratified_holdout(rows: np.ndarray, labels: np.ndarray, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for c in np.unique(labels[rows]):
        members = rows[labels[rows] == c]
        members = members[rng.permutation(members.size)]
        n_test = int(round(fraction * members.size))
        if members.size > 1:
            n_test = min(max(n_test, 1), members.size - 1)
        test.append(members[:n_test])
        train.append(members[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def assign_task_samples(dataset: VerticalDataset, schedule: TaskSchedule, test_fraction: float = 0.2,
                        seed=0) -> list[TaskSplit]:
    """Rows owned by each task, with a class-stratified held-out test split.

    CIL tasks own every sample whose label is in their class set. FIL tasks get
    disjoint class-stratified chunks of the sample pool.
    """
    rng = np.random.default_rng(seed)
    labels = dataset.active_view()
    all_rows = np.arange(dataset.n_samples)
    if schedule.mode == CIL:
        owned = [all_rows[np.isin(labels, sorted(t.class_set))] for t in schedule]
    else:
        chunks: list[list[np.ndarray]] = [[] for _ in schedule]
        for c in np.unique(labels):
            members = all_rows[labels == c]
            members = members[rng.permutation(members.size)]
            for t, part in enumerate(np.array_split(members, len(schedule))):
                chunks[t].append(part)
        owned = [np.sort(np.concatenate(ch)) for ch in chunks]
    return [TaskSplit(*_stratified_holdout(rows, labels, test_fraction, rng)) for rows in owned]


def iter_batches(rows: np.ndarray, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
    order = rows if rng is None else rows[rng.permutation(rows.size)]
    for start in range(0, order.size, batch_size):
        yield order[start:start + batch_size]

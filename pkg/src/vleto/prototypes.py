"""Class prototypes: generation from global embeddings, evolution, and the cross-task store."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, DomainError, MissingClassError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class Prototype:
    class_id: int
    vector: np.ndarray
    source_task: int = 0

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(1, -1)
        if not np.all(np.isfinite(self.vector)):
            raise DomainError(f"prototype for class {self.class_id} is not finite")

    @property
    def dim(self) -> int:
        return self.vector.shape[1]


@dataclass
class PrototypeBatch:
    vectors: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class GlobalPrototypeList:
    """Latest prototype per class, plus the raw per-task prototypes of the last task that saw each class."""

    entries: dict[int, Prototype] = field(default_factory=dict)
    previous: dict[int, Prototype] = field(default_factory=dict)

    def __contains__(self, class_id) -> bool:
        return class_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, class_id) -> Prototype:
        return self.entries[class_id]

    def classes(self) -> list[int]:
        return sorted(self.entries)

    def snapshot(self, task_id: int) -> list[dict]:
        return [
            {"class_id": c, "task_id": task_id, "vector": [float(v) for v in self.entries[c].vector.ravel()]}
            for c in self.classes()
        ]


def generate_prototypes(global_emb, labels, classes) -> list[Prototype]:
    """Per-class mean of ``global_emb`` rows, in ascending class order."""
    emb = np.asarray(global_emb, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if emb.shape[0] != y.shape[0]:
        raise ShapeError(f"{emb.shape[0]} embeddings for {y.shape[0]} labels")
    wanted = sorted(int(c) for c in classes)
    missing = [c for c in wanted if not np.any(y == c)]
    if missing:
        raise MissingClassError(missing)
    return [Prototype(c, emb[y == c].mean(axis=0)) for c in wanted]


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"vector lengths differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def evolve_class_prototype(prev: Prototype, drift_pairs, gamma: float) -> Prototype:
    """Shift a stored prototype by ``gamma`` times the mean cosine drift of the pairs.

    The scalar shift is added to every component. With no pairs the stored
    prototype is returned unchanged.
    """
    if gamma < 0:
        raise DomainError("gamma must be non-negative")
    pairs = list(drift_pairs)
    if not pairs:
        logger.warning("no drift pairs for class %d; replaying its stored prototype unchanged", prev.class_id)
        return Prototype(prev.class_id, prev.vector.copy(), prev.source_task)
    drift = float(np.mean([cosine_sim(before, after) for before, after in pairs]))
    return Prototype(prev.class_id, prev.vector + gamma * drift, prev.source_task)


def fuse_feature_prototype(current: Prototype, store: GlobalPrototypeList, beta: float) -> Prototype:
    if not 0.0 <= beta <= 1.0:
        raise DomainError("beta must lie in [0, 1]")
    if current.class_id not in store:
        return Prototype(current.class_id, current.vector.copy(), current.source_task)
    stored = store[current.class_id].vector
    return Prototype(current.class_id, beta * current.vector + (1.0 - beta) * stored, current.source_task)


def update_global_list(store: GlobalPrototypeList, fused, raw=None) -> GlobalPrototypeList:
    """Overwrite or insert fused prototypes. ``raw`` (defaults to ``fused``) refreshes the previous-task cache."""
    for p in fused:
        store.entries[p.class_id] = Prototype(p.class_id, p.vector.copy(), p.source_task)
    for p in (fused if raw is None else raw):
        store.previous[p.class_id] = Prototype(p.class_id, p.vector.copy(), p.source_task)
    return store


def make_prototype_batch(prototypes, batch_size: int, jitter_sigma: float = 0.0, seed=None) -> PrototypeBatch:
    """Round-robin replication of prototypes, optionally with Gaussian jitter.

    ``seed`` may be an int or a ``np.random.Generator``.
    """
    protos = list(prototypes)
    if not protos:
        raise DomainError("cannot build a batch from zero prototypes")
    if batch_size < 1:
        raise DomainError("batch_size must be >= 1")
    idx = np.arange(batch_size) % len(protos)
    stacked = np.vstack([p.vector for p in protos])
    vectors = stacked[idx].copy()
    if jitter_sigma > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        vectors += rng.normal(0.0, jitter_sigma, size=vectors.shape)
    labels = np.array([protos[i].class_id for i in idx], dtype=np.int64)
    return PrototypeBatch(vectors, labels)


def export_prototypes(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1)

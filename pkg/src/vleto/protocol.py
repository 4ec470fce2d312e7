"""Simulated VFL rounds between one active party and the feature-holding passive parties."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import continual, prototypes
from .config import ExperimentConfig
from .continual import FisherInfo, FreezePolicy, LossWeights
from .data import (CIL, FIL, TaskDescriptor, TaskSplit, VerticalDataset, assign_task_samples,
                   iter_batches, make_cil_schedule, make_fil_schedule)
from .errors import DomainError, NumericalError, ProtocolError, ShapeError, StateError
from .nn import DenseNet, GradientSet, sgd_step, softmax_cross_entropy
from .prototypes import GlobalPrototypeList, PrototypeBatch

logger = logging.getLogger(__name__)

EMBEDDING_UP = "EmbeddingUp"
GRADIENT_DOWN = "GradientDown"


@dataclass
class RoundMessage:
    direction: str
    party_id: int
    batch_index: int
    payload: np.ndarray

    def to_dict(self, include_payload: bool = True) -> dict:
        d = {"direction": self.direction, "party_id": self.party_id,
             "batch_index": self.batch_index, "shape": list(self.payload.shape)}
        if include_payload:
            d["payload"] = [float(v).hex() for v in self.payload.ravel()]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoundMessage":
        data = np.array([float.fromhex(v) for v in d["payload"]], dtype=np.float64)
        return cls(d["direction"], int(d["party_id"]), int(d["batch_index"]), data.reshape(d["shape"]))


@dataclass
class PassiveParty:
    party_id: int
    local_model: DenseNet
    feature_view: tuple[int, ...]
    fisher: FisherInfo | None = None
    freeze_mask: list[np.ndarray] | None = None
    _pending: tuple | None = field(default=None, repr=False)

    def check_view(self) -> None:
        if self.local_model.input_dim != len(self.feature_view):
            raise StateError(f"party {self.party_id}: model expects {self.local_model.input_dim} inputs, "
                             f"view has {len(self.feature_view)} columns")

    def embed(self, dataset: VerticalDataset, rows, visible=None) -> np.ndarray:
        """Embeddings without caching. Columns outside ``visible`` are zero-filled."""
        self.check_view()
        x = dataset.passive_view(self.party_id).rows(rows, self.feature_view)
        if visible is not None:
            hidden = [j for j, c in enumerate(self.feature_view) if c not in set(visible)]
            x[:, hidden] = 0.0
        return self.local_model.forward(x, cache=False)

    def set_view(self, view, rng: np.random.Generator) -> None:
        """Resize the input layer for a new feature view; surviving rows and their Fisher/mask carry over."""
        view = tuple(view)
        if view == self.feature_view:
            return
        old = {c: i for i, c in enumerate(self.feature_view)}
        old_to_new = [old.get(c) for c in view]
        self.local_model.remap_inputs(old_to_new, rng)
        if self.fisher is not None:
            self.fisher = self.fisher.remap_first(old_to_new)
        if self.freeze_mask is not None:
            first = self.freeze_mask[0]
            m = np.zeros((len(view), first.shape[1]), dtype=bool)
            for j, src in enumerate(old_to_new):
                if src is not None:
                    m[j] = first[src]
            self.freeze_mask = [m] + self.freeze_mask[1:]
        self.feature_view = view


@dataclass
class ActiveParty:
    server_model: DenseNet
    labels: np.ndarray
    weights: LossWeights
    lr: float
    gamma: float = 0.5
    beta: float = 0.5
    cil_batch: PrototypeBatch | None = None
    fil_batch: PrototypeBatch | None = None


@dataclass
class TaskMetrics:
    task_id: int
    accuracies: dict[int, float]
    aggregate: float
    train_loss: float
    wall_ms: float = 0.0


def passive_forward(party: PassiveParty, batch_rows, dataset: VerticalDataset, batch_index: int = 0) -> RoundMessage:
    party.check_view()
    x = dataset.passive_view(party.party_id).rows(batch_rows, party.feature_view)
    payload = party.local_model.forward(x)
    party._pending = (batch_index, payload.shape)
    return RoundMessage(EMBEDDING_UP, party.party_id, batch_index, payload)


def aggregate_embeddings(messages, expected_parties=None) -> np.ndarray:
    """Elementwise sum of EmbeddingUp payloads, summed in ascending party-id order."""
    msgs = sorted(messages, key=lambda m: m.party_id)
    if not msgs:
        raise ProtocolError("no embeddings to aggregate")
    if expected_parties is not None:
        absent = sorted(set(expected_parties) - {m.party_id for m in msgs})
        if absent:
            raise ProtocolError(f"missing embeddings from parties {absent}")
    ids = [m.party_id for m in msgs]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate party ids {ids}")
    shape = msgs[0].payload.shape
    total = np.zeros(shape)
    for m in msgs:
        if m.direction != EMBEDDING_UP:
            raise ProtocolError(f"unexpected {m.direction} message from party {m.party_id}")
        if m.payload.shape != shape:
            raise ProtocolError(f"party {m.party_id} sent shape {m.payload.shape}, expected {shape}")
        total = total + m.payload
    return total


def active_step(active: ActiveParty, global_emb, labels, task: TaskDescriptor | None = None,
                party_ids=(0,), batch_index: int = 0):
    """Composite loss, server backward + SGD, and one GradientDown per party.

    Returns ``(loss, messages, composite)``.
    """
    y = np.asarray(labels, dtype=np.int64)
    n_out = active.server_model.output_dim
    if y.size and (y.min() < 0 or y.max() >= n_out):
        raise DomainError(f"label outside known class range [0, {n_out})")
    if task is not None and task.mode == CIL and not set(y.tolist()) <= task.class_set:
        raise DomainError("batch contains labels outside the task's class set")
    res = continual.compose_loss(active.server_model, global_emb, y, active.cil_batch, active.fil_batch,
                                 active.weights)
    if not np.isfinite(res.total):
        raise NumericalError(f"non-finite loss at batch {batch_index}")
    grads = active.server_model.backward(res.dlogits)
    demb = grads.input_gradient[: res.n_real].copy()
    sgd_step(active.server_model, grads, active.lr)
    msgs = [RoundMessage(GRADIENT_DOWN, pid, batch_index, demb) for pid in party_ids]
    return res.total, msgs, res


def passive_backward(party: PassiveParty, grad_msg: RoundMessage, lr: float) -> PassiveParty:
    if party._pending is None:
        raise StateError(f"party {party.party_id} has no cached forward pass")
    batch_index, shape = party._pending
    if grad_msg.direction != GRADIENT_DOWN or grad_msg.party_id != party.party_id:
        raise ProtocolError("gradient message addressed to another party or of the wrong kind")
    if grad_msg.batch_index != batch_index or grad_msg.payload.shape != shape:
        raise ProtocolError(f"gradient for batch {grad_msg.batch_index} {grad_msg.payload.shape} does not match "
                            f"cached forward for batch {batch_index} {shape}")
    grads = party.local_model.backward(grad_msg.payload)
    sgd_step(party.local_model, grads, lr, party.freeze_mask)
    party._pending = None
    return party


def _seed_streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


class Orchestrator:
    """Owns the parties, the prototype store and the task loop for one experiment."""

    def __init__(self, config: ExperimentConfig, dataset: VerticalDataset, trace=None):
        self.config = config
        self.dataset = dataset
        self.trace = trace
        (self._split_rng, self._init_rng, self._shuffle_rng, self._jitter_rng,
         self._grow_rng) = _seed_streams(config.seed, 5)
        if len(dataset.partition) < 1:
            raise ShapeError("dataset has no parties")
        if config.mode == CIL:
            self.schedule = make_cil_schedule(dataset.n_classes, config.n_tasks, dataset.partition,
                                              config.epochs, config.batch_size)
        else:
            self.schedule = make_fil_schedule(dataset.partition, config.n_tasks, dataset.n_classes,
                                              config.epochs, config.batch_size, config.growing_parties)
        self.splits: list[TaskSplit] = assign_task_samples(dataset, self.schedule, config.test_fraction,
                                                           self._split_rng)
        first = self.schedule[0]
        self.parties = [
            PassiveParty(pid, DenseNet.init([len(first.feature_view[pid]), *config.local_hidden, config.d_emb],
                                            self._init_rng), first.feature_view[pid])
            for pid in sorted(dataset.partition)
        ]
        n_out = len(first.class_set) if config.mode == CIL else dataset.n_classes
        server = DenseNet.init([config.d_emb, *config.server_hidden, n_out], self._init_rng)
        self.active = ActiveParty(server, dataset.active_view(), LossWeights(*config.effective_weights),
                                  config.lr, config.gamma, config.beta)
        self.store = GlobalPrototypeList()
        self.prototype_records: list[dict] = []
        self.fisher_records: list[dict] = []
        self.history: list[TaskMetrics] = []
        self._pool = ThreadPoolExecutor(max_workers=len(self.parties)) if config.concurrent else None

    @property
    def party_ids(self) -> list[int]:
        return [p.party_id for p in self.parties]

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _map_parties(self, fn, *args):
        if self._pool is None:
            return [fn(p, *args) for p in self.parties]
        return list(self._pool.map(lambda p: fn(p, *args), self.parties))

    # -- embeddings ---------------------------------------------------------

    def global_embeddings(self, rows, visible=None) -> np.ndarray:
        """Sum of party embeddings for ``rows`` without touching training caches."""
        total = None
        for p in self.parties:
            vis = None if visible is None else visible[p.party_id]
            e = p.embed(self.dataset, rows, vis)
            total = e if total is None else total + e
        return total

    # -- task phases --------------------------------------------------------

    def _resize(self, task: TaskDescriptor) -> None:
        for p in self.parties:
            p.set_view(task.feature_view[p.party_id], self._grow_rng)
        seen = set(self.store.classes()) | set(task.class_set)
        n_out = max(seen) + 1 if self.config.mode == CIL else self.dataset.n_classes
        self.active.server_model.grow_outputs(n_out, self._grow_rng)

    def _replay_sets(self, task: TaskDescriptor, rows) -> tuple[list, list]:
        """Evolved old-class prototypes and fused current-class prototypes for this task's replay batches."""
        cfg = self.config
        lam_ce, lam_a, lam_f = self.active.weights.lambda_ce, self.active.weights.lambda_a, self.active.weights.lambda_f
        old = [c for c in self.store.classes() if c not in task.class_set]
        shared = [c for c in sorted(task.class_set) if c in self.store]
        probe = {}
        if shared and (lam_a > 0 or lam_f > 0):
            labels = self.active.labels[rows]
            present = [c for c in shared if np.any(labels == c)]
            emb = self.global_embeddings(rows)
            probe = {p.class_id: p for p in prototypes.generate_prototypes(emb, labels, present)}
        evolved = []
        if lam_a > 0 and old:
            pairs = [(self.store.previous[c].vector, probe[c].vector) for c in shared if c in probe]
            evolved = [prototypes.evolve_class_prototype(self.store[p], pairs, cfg.gamma) for p in old]
        fused = []
        if lam_f > 0 and shared:
            if cfg.fil_target == "probe":
                fused = [prototypes.fuse_feature_prototype(probe[c], self.store, cfg.beta) for c in shared if c in probe]
            else:
                fused = [self.store[c] for c in shared]
        return evolved, fused

    def _replay_batch(self, protos) -> PrototypeBatch | None:
        if not protos:
            return None
        return prototypes.make_prototype_batch(protos, self.config.batch_size, self.config.jitter_sigma,
                                               self._jitter_rng)

    def _train_step(self, task: TaskDescriptor, rows, batch_index: int, evolved, fused) -> float:
        ups = self._map_parties(passive_forward, rows, self.dataset, batch_index)
        emb = aggregate_embeddings(ups, self.party_ids)
        if self.config.jitter_sigma > 0:
            self.active.cil_batch = self._replay_batch(evolved)
            self.active.fil_batch = self._replay_batch(fused)
        loss, downs, _ = active_step(self.active, emb, self.active.labels[rows], task, self.party_ids, batch_index)
        for up, down in zip(ups, downs):
            if up.payload.shape != down.payload.shape or up.party_id != down.party_id:
                raise ProtocolError("message conservation violated")
        by_party = {m.party_id: m for m in downs}
        self._map_parties(lambda p: passive_backward(p, by_party[p.party_id], self.config.lr))
        if self.trace is not None:
            for m in ups + downs:
                self.trace.append({"task_id": task.task_id, **m.to_dict(include_payload=False)})
        return loss

    def per_sample_gradients(self, rows):
        """Per-party per-sample local gradients of the plain CE loss (batch size 1, no updates)."""
        out = {p.party_id: [] for p in self.parties}
        server = self.active.server_model
        for r in rows:
            ups = [passive_forward(p, [r], self.dataset) for p in self.parties]
            emb = aggregate_embeddings(ups)
            logits = server.forward(emb)
            _, dlogits = softmax_cross_entropy(logits, self.active.labels[[r]])
            demb = server.backward(dlogits).input_gradient
            for p in self.parties:
                gs: GradientSet = p.local_model.backward(demb)
                out[p.party_id].append(gs)
                p._pending = None
        server.clear_cache()
        for p in self.parties:
            p.local_model.clear_cache()
        return out

    def _refresh_masks(self, task: TaskDescriptor, rows) -> None:
        cfg = self.config
        samples = self.per_sample_gradients(rows)
        policy = FreezePolicy(cfg.k0, cfg.alpha, task.task_id)
        for p in self.parties:
            f = continual.estimate_fisher(samples[p.party_id], p.local_model)
            if cfg.accumulate_fisher and p.fisher is not None:
                f = f.maximum(p.fisher)
            kappa = continual.compute_threshold(f, policy, cfg.per_layer_threshold)
            p.fisher = f
            p.freeze_mask = continual.build_freeze_mask(f, kappa, cfg.max_frozen_fraction)
            self.fisher_records.append({
                "party_id": p.party_id, "task_id": task.task_id, "delta": policy.delta,
                "kappa": kappa, "frozen_fraction": continual.frozen_fraction(p.freeze_mask),
                "fisher": f.to_dict(),
                "mask": [{"shape": list(m.shape), "data": m.ravel().astype(int).tolist()} for m in p.freeze_mask],
            })

    def _finish_task(self, task: TaskDescriptor, rows) -> None:
        labels = self.active.labels[rows]
        emb = self.global_embeddings(rows)
        raw = prototypes.generate_prototypes(emb, labels, task.class_set)
        for p in raw:
            p.source_task = task.task_id
        fused = [prototypes.fuse_feature_prototype(p, self.store, self.config.beta) for p in raw]
        prototypes.update_global_list(self.store, fused, raw)
        self.prototype_records.extend(self.store.snapshot(task.task_id))
        if self.config.use_lmo:
            self._refresh_masks(task, rows)

    def evaluate(self, upto: int) -> tuple[dict[int, float], float]:
        accs, correct, total = {}, 0, 0
        fil = self.config.mode == FIL
        for j in range(upto + 1):
            rows = self.splits[j].test
            if rows.size == 0:
                accs[j] = 0.0
                continue
            visible = self.schedule[j].feature_view if fil else None
            logits = self.active.server_model.forward(self.global_embeddings(rows, visible), cache=False)
            hits = int(np.sum(np.argmax(logits, axis=1) == self.active.labels[rows]))
            accs[j] = hits / rows.size
            correct += hits
            total += rows.size
        return accs, (correct / total if total else 0.0)

    def run_task(self, task: TaskDescriptor) -> TaskMetrics:
        start = time.perf_counter()
        rows = self.splits[task.task_id].train
        self._resize(task)
        evolved, fused = self._replay_sets(task, rows)
        self.active.cil_batch = self._replay_batch(evolved)
        self.active.fil_batch = self._replay_batch(fused)
        last_epoch_loss = 0.0
        for _ in range(task.epochs):
            losses = []
            for b, batch in enumerate(iter_batches(rows, task.batch_size, self._shuffle_rng)):
                losses.append(self._train_step(task, batch, b, evolved, fused))
            last_epoch_loss = float(np.mean(losses)) if losses else 0.0
        self.active.cil_batch = self.active.fil_batch = None
        self._finish_task(task, rows)
        accs, agg = self.evaluate(task.task_id)
        m = TaskMetrics(task.task_id, accs, agg, last_epoch_loss, (time.perf_counter() - start) * 1000.0)
        self.history.append(m)
        return m

    def run(self) -> list[TaskMetrics]:
        try:
            for task in self.schedule:
                self.run_task(task)
        finally:
            self.close()
        return self.history

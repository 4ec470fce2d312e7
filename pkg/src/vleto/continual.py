"""Composite server loss and Fisher-information parameter freezing for local models."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .nn import DenseNet, as_matrix, softmax_cross_entropy
from .prototypes import PrototypeBatch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda_ce: float = 0.5
    lambda_a: float = 0.5
    lambda_f: float = 0.5

    def __post_init__(self):
        for name in ("lambda_ce", "lambda_a", "lambda_f"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError("loss weight must be finite and >= 0", name)


@dataclass
class CompositeLoss:
    total: float
    terms: dict[str, float]
    dlogits: np.ndarray
    n_real: int


def compose_loss(server: DenseNet, global_emb, labels, cil_batch: PrototypeBatch | None,
                 fil_batch: PrototypeBatch | None, weights: LossWeights) -> CompositeLoss:
    """Weighted sum of real-data CE and the two prototype-replay CE terms.

    The three blocks go through ``server`` in one stacked forward pass, so a
    single ``server.backward(result.dlogits)`` accumulates all weighted gradients;
    rows ``[:n_real]`` of the input gradient belong to the real embeddings.
    """
    emb = as_matrix(global_emb)
    blocks = [("ce", emb, np.asarray(labels), weights.lambda_ce)]
    if cil_batch is not None and len(cil_batch):
        blocks.append(("a", cil_batch.vectors, cil_batch.labels, weights.lambda_a))
    if fil_batch is not None and len(fil_batch):
        blocks.append(("f", fil_batch.vectors, fil_batch.labels, weights.lambda_f))
    for _, x, _, _ in blocks:
        if x.shape[1] != server.input_dim:
            raise ShapeError(f"batch width {x.shape[1]} != server input {server.input_dim}")

    logits = server.forward(np.vstack([b[1] for b in blocks]))
    terms = {"ce": 0.0, "a": 0.0, "f": 0.0}
    dlogits = np.zeros_like(logits)
    start = 0
    total = 0.0
    for name, x, y, w in blocks:
        stop = start + x.shape[0]
        loss, d = softmax_cross_entropy(logits[start:stop], y)
        terms[name] = loss
        total += w * loss
        dlogits[start:stop] = w * d
        start = stop
    return CompositeLoss(total, terms, dlogits, emb.shape[0])


@dataclass
class FisherInfo:
    values: list[np.ndarray]
    sample_count: int

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values])

    def remap_first(self, old_to_new) -> "FisherInfo":
        """Carry rows of the first weight tensor into a new input layout; new rows get zero."""
        first = self.values[0]
        w = np.zeros((len(old_to_new), first.shape[1]))
        for j, src in enumerate(old_to_new):
            if src is not None:
                w[j] = first[src]
        return FisherInfo([w] + [v.copy() for v in self.values[1:]], self.sample_count)

    def maximum(self, other: "FisherInfo") -> "FisherInfo":
        return FisherInfo([np.maximum(a, b) for a, b in zip(self.values, other.values)],
                          self.sample_count + other.sample_count)

    def to_dict(self) -> dict:
        return {"sample_count": self.sample_count,
                "values": [{"shape": list(v.shape), "data": v.ravel().tolist()} for v in self.values]}


@dataclass(frozen=True)
class FreezePolicy:
    k0: float = 15.0
    alpha: float = 3.0
    task_index: int = 0

    @property
    def delta(self) -> float:
        return self.k0 + self.alpha * math.log(self.task_index + 1)


def estimate_fisher(gradient_samples, reference: DenseNet | None = None) -> FisherInfo:
    """Diagonal Fisher: elementwise mean of squared per-sample parameter gradients."""
    samples = list(gradient_samples)
    if not samples:
        raise StateError("Fisher estimation needs at least one gradient sample")
    shapes = [g.shape for g in samples[0].params]
    if reference is not None and shapes != [p.shape for p in reference.params()]:
        raise ShapeError("gradient samples do not match the party's model")
    acc = [np.zeros(s) for s in shapes]
    for gs in samples:
        if [g.shape for g in gs.params] != shapes:
            raise ShapeError("inconsistent gradient sample shapes")
        for a, g in zip(acc, gs.params):
            a += g * g
    return FisherInfo([a / len(samples) for a in acc], len(samples))


def _threshold(values: np.ndarray, delta: float) -> float:
    return float(values.mean() - delta * values.std())


def compute_threshold(f: FisherInfo, policy: FreezePolicy, per_layer: bool = False):
    """kappa = mean(F) - delta * std(F), population std over all entries.

    With ``per_layer`` a list with one kappa per parameter tensor is returned.
    """
    if per_layer:
        return [_threshold(v.ravel(), policy.delta) for v in f.values]
    flat = f.flat()
    if flat.size == 0:
        raise StateError("empty Fisher information")
    return _threshold(flat, policy.delta)


def build_freeze_mask(f: FisherInfo, kappa, max_frozen_fraction: float | None = None) -> list[np.ndarray]:
    """True where F >= kappa (parameter kept from the previous task).

    When more than ``max_frozen_fraction`` of entries would freeze, the
    lowest-F frozen entries are released until the cap holds.
    """
    kappas = kappa if isinstance(kappa, (list, tuple)) else [kappa] * len(f.values)
    mask = [v >= k for v, k in zip(f.values, kappas)]
    if max_frozen_fraction is None:
        return mask
    flat_mask = np.concatenate([m.ravel() for m in mask])
    cap = int(math.floor(max_frozen_fraction * flat_mask.size))
    frozen = int(flat_mask.sum())
    if frozen <= cap:
        return mask
    logger.info("freeze mask saturated (%d/%d); releasing %d lowest-Fisher entries",
                frozen, flat_mask.size, frozen - cap)
    flat_f = f.flat()
    candidates = np.flatnonzero(flat_mask)
    order = candidates[np.lexsort((candidates, flat_f[candidates]))]
    flat_mask[order[: frozen - cap]] = False
    out, start = [], 0
    for v in f.values:
        out.append(flat_mask[start:start + v.size].reshape(v.shape))
        start += v.size
    return out


def frozen_fraction(mask) -> float:
    total = sum(m.size for m in mask)
    return float(sum(int(m.sum()) for m in mask) / total) if total else 0.0


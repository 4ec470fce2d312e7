"""Dense feed-forward networks in float64 numpy with hand-written backprop.

Matrices are plain 2-D ``np.ndarray`` of dtype float64. Weights are stored as
``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, NumericalError, ShapeError, StateError

ACTIVATIONS = ("relu", "identity")


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite values in {what}")


def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator, rows=None) -> np.ndarray:
    """Glorot-uniform draw. ``rows`` overrides the number of rows drawn (for partial re-init)."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    n = fan_in if rows is None else rows
    return rng.uniform(-bound, bound, size=(n, fan_out))


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = as_matrix(self.weight)
        self.bias = as_matrix(self.bias)
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (1, self.weight.shape[1]):
            raise ShapeError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class GradientSet:
    """Parameter gradients in ``DenseNet.params()`` order plus the input gradient."""

    params: list[np.ndarray]
    input_gradient: np.ndarray


@dataclass
class DenseNet:
    layers: list[Layer]
    _cache: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a DenseNet needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, hidden_activation="relu", output_activation="identity"):
        """Build a net with layer widths ``sizes`` (input first), Glorot-uniform weights and zero biases."""
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"invalid layer sizes {sizes}")
        layers = []
        for i, (fi, fo) in enumerate(zip(sizes, sizes[1:])):
            act = output_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(Layer(xavier_uniform(fi, fo, rng), np.zeros((1, fo)), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def forward(self, batch, cache: bool = True) -> np.ndarray:
        x = as_matrix(batch)
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"batch has {x.shape[1]} columns, net expects {self.input_dim}")
        acts = [x]
        pre = []
        with np.errstate(over="ignore", invalid="ignore"):
            for layer in self.layers:
                z = x @ layer.weight + layer.bias
                x = np.maximum(z, 0.0) if layer.activation == "relu" else z
                pre.append(z)
                acts.append(x)
        _check_finite(x, "forward output")
        if cache:
            self._cache = (acts, pre)
        return x

    def backward(self, dout) -> GradientSet:
        if self._cache is None:
            raise StateError("backward called without a cached forward pass")
        acts, pre = self._cache
        d = as_matrix(dout)
        if d.shape != acts[-1].shape:
            raise ShapeError(f"upstream gradient {d.shape} does not match output {acts[-1].shape}")
        grads: list[np.ndarray] = []
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.activation == "relu":
                d = d * (pre[i] > 0)
            grads.append(d.sum(axis=0, keepdims=True))
            grads.append(acts[i].T @ d)
            d = d @ layer.weight.T
        grads.reverse()
        return GradientSet(grads, d)

    def clear_cache(self) -> None:
        self._cache = None

    # -- resizing -----------------------------------------------------------

    def remap_inputs(self, old_to_new: list[int | None], rng: np.random.Generator) -> None:
        """Rebuild the first weight matrix for a new input layout.

        ``old_to_new[j]`` gives, for new input row ``j``, the old row to carry over,
        or ``None`` for a freshly initialised row.
        """
        first = self.layers[0]
        n_new = len(old_to_new)
        fresh = xavier_uniform(n_new, first.out_dim, rng, rows=n_new)
        w = np.empty((n_new, first.out_dim))
        for j, src in enumerate(old_to_new):
            w[j] = first.weight[src] if src is not None else fresh[j]
        first.weight = w
        self._cache = None

    def grow_outputs(self, n_out: int, rng: np.random.Generator) -> None:
        """Append freshly initialised output units; existing columns are untouched."""
        last = self.layers[-1]
        extra = n_out - last.out_dim
        if extra < 0:
            raise ShapeError("output layer can only grow")
        if extra == 0:
            return
        new_w = xavier_uniform(last.in_dim, n_out, rng)[:, last.out_dim:]
        last.weight = np.hstack([last.weight, new_w])
        last.bias = np.hstack([last.bias, np.zeros((1, extra))])
        self._cache = None

    # -- checkpoints --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "vleto-densenet",
            "layers": [
                {
                    "shape": list(l.weight.shape),
                    "activation": l.activation,
                    "weight": [float(v).hex() for v in l.weight.ravel()],
                    "bias": [float(v).hex() for v in l.bias.ravel()],
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNet":
        layers = []
        for ld in d["layers"]:
            r, c = ld["shape"]
            w = np.array([float.fromhex(v) for v in ld["weight"]], dtype=np.float64).reshape(r, c)
            b = np.array([float.fromhex(v) for v in ld["bias"]], dtype=np.float64).reshape(1, c)
            layers.append(Layer(w, b, ld["activation"]))
        return cls(layers)

    def save(self, path, fmt: str = "json") -> None:
        path = Path(path)
        if fmt == "json":
            path.write_text(json.dumps(self.to_dict()))
        elif fmt == "npz":
            arrays = {f"p{i}": p for i, p in enumerate(self.params())}
            acts = np.array([l.activation for l in self.layers])
            with open(path, "wb") as fh:
                np.savez(fh, activations=acts, **arrays)
        else:
            raise DomainError(f"unknown checkpoint format {fmt!r}")

    @classmethod
    def load(cls, path, fmt: str = "json") -> "DenseNet":
        path = Path(path)
        if fmt == "json":
            return cls.from_dict(json.loads(path.read_text()))
        if fmt == "npz":
            with np.load(path) as z:
                acts = [str(a) for a in z["activations"]]
                return cls([Layer(z[f"p{2 * i}"], z[f"p{2 * i + 1}"], a) for i, a in enumerate(acts)])
        raise DomainError(f"unknown checkpoint format {fmt!r}")


def forward(net: DenseNet, batch) -> np.ndarray:
    return net.forward(batch)


def backward(net: DenseNet, dlogits) -> GradientSet:
    return net.backward(dlogits)


def softmax(logits) -> np.ndarray:
    z = as_matrix(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``labels`` under row-wise softmax, and its gradient w.r.t. ``logits``."""
    z = as_matrix(logits)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = z.shape
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for {n} logit rows")
    if n == 0:
        return 0.0, np.zeros_like(z)
    if y.min() < 0 or y.max() >= c:
        raise DomainError(f"label out of range [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, y]))
    probs = np.exp(shifted - log_norm[:, None])
    probs[rows, y] -= 1.0
    return loss, probs / n


def sgd_step(net: DenseNet, grads: GradientSet, lr: float, freeze_mask=None) -> DenseNet:
    """In-place ``theta -= lr * g``; entries where ``freeze_mask`` is true are left bit-identical."""
    if not lr > 0:
        raise DomainError("learning rate must be positive")
    params = net.params()
    if len(grads.params) != len(params):
        raise ShapeError("gradient set does not match network")
    if freeze_mask is not None and len(freeze_mask) != len(params):
        raise ShapeError("freeze mask does not match network")
    for i, (p, g) in enumerate(zip(params, grads.params)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if freeze_mask is None:
            p -= lr * g
        else:
            m = freeze_mask[i]
            if m.shape != p.shape:
                raise ShapeError(f"mask shape {m.shape} != parameter shape {p.shape}")
            upd = ~m
            p[upd] -= lr * g[upd]
    net.clear_cache()
    return net

"""Float64 numerical substrate: seeded splittable RNG, dense layers with
manual backprop, an Adam optimizer, and a finite-difference gradient checker.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

Array = np.ndarray

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes violate the operation's contract."""


class StateError(RuntimeError):
    """Operation called out of order (e.g. backward before forward)."""


def as_matrix(x, name: str = "x") -> Array:
    """Coerce to a 2-D float64 array; 1-D input becomes a single row."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


class Rng:
    """Deterministic counter-based generator with named substreams.

    Substream keys are derived by hashing (seed, path), so draws on one
    stream never shift another, and the same seed reproduces the same
    stream on any platform (Philox is counter based and portable).
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(str(p) for p in path)
        digest = hashlib.blake2b(
            repr((self.seed, self.path)).encode("utf-8"), digest_size=16
        ).digest()
        self._bitgen = np.random.Philox(key=int.from_bytes(digest, "big"))
        self.gen = np.random.Generator(self._bitgen)

    def split(self, *labels) -> "Rng":
        """Derive an independent substream named by `labels`."""
        return Rng(self.seed, self.path + tuple(str(x) for x in labels))

    def normal(self, shape=(), scale: float = 1.0) -> Array:
        return scale * self.gen.standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None):
        out = self.gen.uniform(low, high, size=shape)
        return float(out) if shape is None else out

    def integers(self, low: int, high: int, shape=None):
        """Uniform integers in [low, high)."""
        out = self.gen.integers(low, high, size=shape)
        return int(out) if shape is None else out

    def permutation(self, n: int) -> Array:
        return self.gen.permutation(n)

    def choice(self, n: int, size: int) -> Array:
        return self.gen.choice(n, size=size, replace=False)

    def state(self) -> dict:
        """JSON-serializable snapshot of the underlying bit generator."""
        raw = self._bitgen.state
        return {
            "seed": self.seed,
            "path": list(self.path),
            "counter": [int(v) for v in raw["state"]["counter"]],
            "key": [int(v) for v in raw["state"]["key"]],
        }


class LinearLayer:
    """Dense layer y = x @ W.T + b with explicit gradient buffers.

    forward(..., cache=True) stashes the input for backward; backward
    accumulates into gweight/gbias and returns the gradient w.r.t. the
    input. Gradients add up across calls until zero_grad().
    """

    def __init__(self, weight, bias):
        self.weight = np.array(weight, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError(
                f"weight must be 2-D and bias 1-D, got {self.weight.shape} / {self.bias.shape}"
            )
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} does not match weight rows {self.weight.shape[0]}"
            )
        self.gweight = np.zeros_like(self.weight)
        self.gbias = np.zeros_like(self.bias)
        self._x: Array | None = None

    @classmethod
    def create(cls, in_dim: int, out_dim: int, rng: Rng) -> "LinearLayer":
        w = rng.normal((out_dim, in_dim), scale=1.0 / math.sqrt(in_dim))
        return cls(w, np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def forward(self, x, cache: bool = False) -> Array:
        x = as_matrix(x, "input")
        if x.shape[1] != self.in_dim:
            raise ShapeError(
                f"linear expects inputs with {self.in_dim} columns, got shape {x.shape}"
            )
        if cache:
            self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out) -> Array:
        if self._x is None:
            raise StateError("linear backward called before a cached forward")
        grad_out = as_matrix(grad_out, "grad_out")
        if grad_out.shape != (self._x.shape[0], self.out_dim):
            raise ShapeError(
                f"grad_out shape {grad_out.shape} does not match forward output "
                f"({self._x.shape[0]}, {self.out_dim})"
            )
        self.gweight += grad_out.T @ self._x
        self.gbias += grad_out.sum(axis=0)
        return grad_out @ self.weight

    def zero_grad(self) -> None:
        self.gweight.fill(0.0)
        self.gbias.fill(0.0)

    def copy(self) -> "LinearLayer":
        return LinearLayer(self.weight.copy(), self.bias.copy())


def linear_forward(x, layer: LinearLayer) -> Array:
    return layer.forward(x)


def softmax(logits) -> Array:
    """Row-wise softmax, stabilized by max subtraction."""
    z = as_matrix(logits, "logits")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def relu(x) -> Array:
    return np.maximum(x, 0.0)


def cross_entropy(probs, labels) -> float:
    """Mean negative log-probability of the true class.

    Probabilities are floored at 1e-12 before the log so a confidently
    wrong prediction yields a large but finite loss.
    """
    p = as_matrix(probs, "probs")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != p.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for {p.shape[0]} probability rows")
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise ValueError(
            f"labels must be class indices in [0, {p.shape[1]}), got {sorted(set(y.tolist()))}"
        )
    picked = p[np.arange(p.shape[0]), y]
    return float(np.mean(-np.log(np.maximum(picked, LOG_FLOOR))))


class Adam:
    """Adaptive-moment optimizer over a fixed list of (value, grad) arrays."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        for value, grad in self.params:
            if value.shape != grad.shape:
                raise ShapeError(
                    f"gradient shape {grad.shape} does not match parameter {value.shape}"
                )
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = [np.zeros_like(v) for v, _ in self.params]
        self.v = [np.zeros_like(v) for v, _ in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for (value, grad), m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def grad_check(loss_fn, params, n_probes: int = 30, h: float = 1e-5,
               seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    `loss_fn()` must return the scalar loss for the current parameter
    values and refresh the gradient buffers as a side effect. Random
    coordinates are probed across all parameters; returns the maximum
    relative error with denominator max(|analytic|, |numeric|, 1e-8).
    """
    params = list(params)
    loss_fn()
    analytic = [g.copy() for _, g in params]
    sizes = [v.size for v, _ in params]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    rng = Rng(seed, ("grad_check",))
    picked = rng.choice(total, min(n_probes, total))
    worst = 0.0
    for flat in sorted(int(i) for i in picked):
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        k = flat - int(offsets[pi])
        value = params[pi][0]
        old = value.flat[k]
        value.flat[k] = old + h
        lo_hi = loss_fn()
        value.flat[k] = old - h
        lo_lo = loss_fn()
        value.flat[k] = old
        numeric = (lo_hi - lo_lo) / (2.0 * h)
        ana = analytic[pi].flat[k]
        rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
        worst = max(worst, rel)
    loss_fn()
    return worst

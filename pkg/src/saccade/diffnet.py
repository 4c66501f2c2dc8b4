"""Minimal differentiable substrate for the attention networks.

Parameters live in one flat float64 vector per network, with named slices
for each layer. Forward computations append records to a Tape; calling
``Tape.backward`` with seed values on chosen scalar outputs accumulates
gradients additively into the owning ParameterVector. The tape is retained
by rollouts so estimators can re-seed the same computation with different
per-trajectory coefficients without re-running the forward pass.

Gradient accumulation is additive; callers zero ``grads`` between
estimator invocations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

ACTIVATIONS = ("relu", "identity", "softmax")
LAYER_KINDS = ("dense", "recurrent-cell", "categorical-head", "gaussian-head")


@dataclass
class LayerSpec:
    kind: str
    input_dim: int
    output_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ConfigurationError("layer dims must be strictly positive")


class Param:
    """A named contiguous slice of a ParameterVector, viewed with a shape."""

    __slots__ = ("pv", "start", "stop", "shape", "name")

    def __init__(self, pv: "ParameterVector", name: str, start: int, stop: int, shape):
        self.pv = pv
        self.name = name
        self.start = start
        self.stop = stop
        self.shape = tuple(shape)

    @property
    def value(self) -> np.ndarray:
        return self.pv.values[self.start:self.stop].reshape(self.shape)

    def add_grad(self, g: np.ndarray) -> None:
        self.pv.grads[self.start:self.stop] += np.asarray(g).ravel()


class ParameterVector:
    """Flat parameter storage with an aligned gradient accumulator."""

    def __init__(self):
        self.values = np.zeros(0)
        self.grads = np.zeros(0)
        self._slices: dict[str, Param] = {}

    def register(self, name: str, shape, init: np.ndarray | None = None) -> Param:
        if name in self._slices:
            raise ConfigurationError(f"duplicate parameter slice {name!r}")
        n = int(np.prod(shape))
        start = self.values.size
        self.values = np.concatenate([self.values, np.zeros(n)])
        self.grads = np.zeros(self.values.size)
        p = Param(self, name, start, start + n, shape)
        self._slices[name] = p
        if init is not None:
            self.values[start:start + n] = np.asarray(init, dtype=np.float64).ravel()
        return p

    def __getitem__(self, name: str) -> Param:
        return self._slices[name]

    def __contains__(self, name: str) -> bool:
        return name in self._slices

    @property
    def size(self) -> int:
        return self.values.size

    def layout(self) -> dict[str, tuple[int, int]]:
        return {k: (p.start, p.stop) for k, p in self._slices.items()}

    def zero_grad(self) -> None:
        self.grads[:] = 0.0

    def register_dense(self, name: str, in_dim: int, out_dim: int,
                       rng: np.random.Generator | None = None) -> None:
        limit = math.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-limit, limit, (out_dim, in_dim)) if rng is not None else None
        self.register(f"{name}.W", (out_dim, in_dim), w)
        self.register(f"{name}.b", (out_dim,))

    def register_recurrent(self, name: str, in_dim: int, out_dim: int,
                           rng: np.random.Generator | None = None) -> None:
        lim_h = math.sqrt(6.0 / (2 * out_dim))
        lim_x = math.sqrt(6.0 / (in_dim + out_dim))
        wh = rng.uniform(-lim_h, lim_h, (out_dim, out_dim)) if rng is not None else None
        wx = rng.uniform(-lim_x, lim_x, (out_dim, in_dim)) if rng is not None else None
        self.register(f"{name}.Wh", (out_dim, out_dim), wh)
        self.register(f"{name}.Wx", (out_dim, in_dim), wx)
        self.register(f"{name}.b", (out_dim,))


class Node:
    """An intermediate array value on a tape."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value


def value_of(x):
    if isinstance(x, (Node, Param)):
        return x.value
    return x


class Tape:
    """Ordered record of forward operations supporting reverse replay.

    Each record is (out_node, inputs, vjp) where vjp maps the gradient at
    the output to per-input gradients (None entries mark constants).
    ``backward`` may be called repeatedly with different seeds; each call
    starts from fresh intermediate gradients and adds into parameter grads.
    """

    def __init__(self):
        self.records: list[tuple[Node, tuple, object]] = []

    def emit(self, value, inputs, vjp) -> Node:
        out = Node(value)
        self.records.append((out, tuple(inputs), vjp))
        return out

    def backward(self, seeds) -> None:
        """seeds: iterable of (node, seed value) pairs."""
        grads: dict[int, np.ndarray | float] = {}
        for node, seed in seeds:
            key = id(node)
            grads[key] = grads.get(key, 0.0) + seed
        for out, inputs, vjp in reversed(self.records):
            go = grads.pop(id(out), None)
            if go is None:
                continue
            for inp, gi in zip(inputs, vjp(go)):
                if gi is None:
                    continue
                if isinstance(inp, Param):
                    inp.add_grad(gi)
                elif isinstance(inp, Node):
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi


# ---------------------------------------------------------------------------
# tape ops

def _relu_vjp(z):
    mask = (z > 0).astype(np.float64)
    return lambda go: go * mask


def affine(tape: Tape, w: Param, b: Param, x) -> Node:
    """z = W x + b with x a Node, Param, or constant array."""
    xv = value_of(x)
    z = w.value @ xv + b.value

    def vjp(go):
        gx = go @ w.value if isinstance(x, (Node, Param)) else None
        return (np.outer(go, xv), go, gx)

    return tape.emit(z, (w, b, x), vjp)


def relu(tape: Tape, x: Node) -> Node:
    z = value_of(x)
    out = np.maximum(z, 0.0)
    mask = _relu_vjp(z)
    return tape.emit(out, (x,), lambda go: (mask(go),))


def softmax_op(tape: Tape, x: Node) -> Node:
    z = value_of(x)
    p = softmax(z)

    def vjp(go):
        return (p * (go - np.dot(go, p)),)

    return tape.emit(p, (x,), vjp)


def embedding_row(tape: Tape, table: Param, index: int) -> Node:
    row = table.value[index].copy()

    def vjp(go):
        g = np.zeros(table.shape)
        g[index] = go
        return (g,)

    return tape.emit(row, (table,), vjp)


def categorical_logprob(tape: Tape, logits: Node, index: int) -> Node:
    z = value_of(logits)
    if not 0 <= index < len(z):
        raise ConfigurationError(f"categorical index {index} out of range 0..{len(z) - 1}")
    p = softmax(z)
    lp = float(z[index] - logsumexp(z))

    def vjp(go):
        g = -go * p
        g[index] += go
        return (g,)

    return tape.emit(lp, (logits,), vjp)


def gaussian_logprob(tape: Tape, mean: Node, log_std: np.ndarray, action: np.ndarray) -> Node:
    """Diagonal Gaussian log-density; log_std is held constant."""
    mu = value_of(mean)
    a = np.asarray(action, dtype=np.float64)
    std = np.exp(log_std)
    zscore = (a - mu) / std
    lp = float(-0.5 * np.sum(zscore**2) - np.sum(log_std) - 0.5 * len(a) * math.log(2 * math.pi))

    def vjp(go):
        return (go * zscore / std,)

    return tape.emit(lp, (mean,), vjp)


def forward(spec: LayerSpec, pv: ParameterVector, name: str, x,
            tape: Tape, state=None):
    """Run one layer forward, appending records to the tape.

    Returns (output node, new-state node or None). Recurrent kinds require
    ``state``; head kinds produce raw distribution parameters (logits or
    means) with identity activation.
    """
    xv = value_of(x)
    if len(xv) != spec.input_dim:
        raise ConfigurationError(
            f"layer {name!r} expects input dim {spec.input_dim}, got {len(xv)}")
    if spec.kind == "recurrent-cell":
        if state is None:
            raise ConfigurationError(f"recurrent layer {name!r} requires state")
        wh, wx, b = pv[f"{name}.Wh"], pv[f"{name}.Wx"], pv[f"{name}.b"]
        sv = value_of(state)
        z = wh.value @ sv + wx.value @ xv + b.value
        out_v = np.maximum(z, 0.0)
        mask = (z > 0).astype(np.float64)

        def vjp(go):
            gz = go * mask
            gs = gz @ wh.value if isinstance(state, (Node, Param)) else None
            gx = gz @ wx.value if isinstance(x, (Node, Param)) else None
            return (np.outer(gz, sv), np.outer(gz, xv), gz, gs, gx)

        out = tape.emit(out_v, (wh, wx, b, state, x), vjp)
        return out, out
    # dense and head kinds
    z = affine(tape, pv[f"{name}.W"], pv[f"{name}.b"], x)
    if spec.activation == "relu":
        return relu(tape, z), None
    if spec.activation == "softmax":
        return softmax_op(tape, z), None
    return z, None


def backward(tape: Tape, seeds, pv: ParameterVector | None = None) -> None:
    """Accumulate gradients for the given output seeds into parameter grads."""
    tape.backward(seeds)


# ---------------------------------------------------------------------------
# distributions

def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def logsumexp(z: np.ndarray) -> float:
    z = np.asarray(z, dtype=np.float64)
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()))


@dataclass
class Categorical:
    logits: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def entropy(self) -> float:
        p = self.probs
        lp = self.logits - logsumexp(self.logits)
        return float(-np.sum(p * lp))


@dataclass
class Gaussian:
    mean: np.ndarray
    log_std: np.ndarray = field(default_factory=lambda: np.array([]))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        log_std = np.asarray(self.log_std, dtype=np.float64)
        if log_std.size == 0:
            log_std = np.zeros_like(self.mean)
        self.log_std = np.broadcast_to(log_std, self.mean.shape).astype(np.float64)

    def entropy(self) -> float:
        d = len(self.mean)
        return float(0.5 * d * (1 + math.log(2 * math.pi)) + np.sum(self.log_std))


def log_prob(dist, action) -> float:
    """Log-mass (categorical) or log-density (gaussian) of an action."""
    if isinstance(dist, Categorical):
        k = int(action)
        z = dist.logits
        if not 0 <= k < len(z):
            raise ConfigurationError(f"categorical index {k} out of range 0..{len(z) - 1}")
        return float(z[k] - logsumexp(z))
    a = np.asarray(action, dtype=np.float64)
    std = np.exp(dist.log_std)
    zscore = (a - dist.mean) / std
    return float(-0.5 * np.sum(zscore**2) - np.sum(dist.log_std)
                 - 0.5 * len(a) * math.log(2 * math.pi))


def sample(dist, rng: np.random.Generator):
    """Draw one action; identical generator state gives an identical draw."""
    if isinstance(dist, Categorical):
        return int(rng.choice(len(dist.logits), p=dist.probs))
    return dist.mean + np.exp(dist.log_std) * rng.standard_normal(len(dist.mean))


def temperature_scaled(dist, tau: float):
    """Flatten (tau > 1) or sharpen (tau < 1) a distribution."""
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    if isinstance(dist, Categorical):
        return Categorical(dist.logits / tau)
    return Gaussian(dist.mean, dist.log_std + math.log(tau))


# ---------------------------------------------------------------------------

def finite_difference_gradient(loss_fn, pv: ParameterVector, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a deterministic scalar loss over pv."""
    if step <= 0:
        raise ConfigurationError("finite-difference step must be positive")
    g = np.zeros(pv.size)
    base = pv.values.copy()
    for i in range(pv.size):
        pv.values[i] = base[i] + step
        hi = loss_fn(pv)
        pv.values[i] = base[i] - step
        lo = loss_fn(pv)
        pv.values[i] = base[i]
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError("non-finite loss during finite differencing")
        g[i] = (hi - lo) / (2 * step)
    return g

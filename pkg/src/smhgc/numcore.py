"""Numeric substrate: dense float64 matrices, a reverse-mode tape, Adam and a
counter-based random generator.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Operations
on :class:`Var` handles are recorded on the owning :class:`Tape`; the same
operations on bare arrays just compute the value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from smhgc.errors import ContractError, DimensionError, NumericError

log = logging.getLogger(__name__)

CLAMP_EPS = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")


# --------------------------------------------------------------------------
# RNG


class Rng:
    """Philox stream keyed by ``(seed, *path)``.

    ``spawn(i, j)`` gives an independent child stream; the same key always
    yields the same draws regardless of how many draws were taken elsewhere.
    """

    def __init__(self, seed: int, *path: int):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(entropy=self.seed % 2**64, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *index: int) -> "Rng":
        return Rng(self.seed, *self.path, *index)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, size: int, replace: bool = False, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


# --------------------------------------------------------------------------
# Tape


@dataclass
class _Node:
    op: str
    inputs: tuple
    forward: Callable | None
    vjp: Callable | None
    needs_grad: bool
    name: str | None = None


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    @property
    def name(self):
        return self.tape.nodes[self.index].name

    @property
    def trainable(self) -> bool:
        node = self.tape.nodes[self.index]
        return node.op == "leaf" and node.needs_grad

    @property
    def T(self):
        return transpose(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __hash__(self):
        return hash((id(self.tape), self.index))

    def __eq__(self, other):
        return isinstance(other, Var) and other.tape is self.tape and other.index == self.index

    def __repr__(self):
        return f"Var({self.tape.nodes[self.index].op}#{self.index}, shape={self.shape})"


class Tape:
    """Ordered record of primitive operations, their values and adjoints."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []
        self.adjoints: list[np.ndarray | None] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, trainable: bool = False, name: str | None = None) -> Var:
        a = np.array(as_matrix(value, name or "leaf"), copy=True)
        check_finite(a, f"leaf {name or len(self.nodes)}")
        return self._push(_Node("leaf", (), None, None, trainable, name), a)

    def _push(self, node: _Node, value: np.ndarray) -> Var:
        self.nodes.append(node)
        self.values.append(value)
        return Var(self, len(self.nodes) - 1)

    @property
    def trainable_leaves(self) -> list[Var]:
        return [Var(self, i) for i, n in enumerate(self.nodes) if n.op == "leaf" and n.needs_grad]

    def replay(self) -> list[np.ndarray]:
        """Recompute every node value from the leaves and stored constants."""
        out: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                out.append(self.values[i])
                continue
            args = [out[x.index] if isinstance(x, Var) else x for x in node.inputs]
            out.append(node.forward(*args))
        return out


def _apply(op: str, forward: Callable, vjp: Callable, *inputs, name: str | None = None):
    tapes = {id(x.tape): x.tape for x in inputs if isinstance(x, Var)}
    if len(tapes) > 1:
        raise ContractError(f"{op}: inputs belong to different tapes")
    inputs = tuple(x if isinstance(x, Var) else as_matrix(x) for x in inputs)
    vals = [x.value if isinstance(x, Var) else x for x in inputs]
    with np.errstate(over="ignore", invalid="ignore"):
        out = forward(*vals)
    if not tapes:
        check_finite(out, op)
        return out
    tape = next(iter(tapes.values()))
    needs = any(tape.nodes[x.index].needs_grad for x in inputs if isinstance(x, Var))
    var = tape._push(_Node(op, tuple(inputs), forward, vjp, needs, name), out)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite values produced by {op} (tape node {var.index}{', ' + name if name else ''})")
    return var


def _val(x):
    return x.value if isinstance(x, Var) else as_matrix(x)


def backward(tape: Tape, loss: Var) -> dict[Var, np.ndarray]:
    """Accumulate d(loss)/d(node) for every node and return leaf gradients.

    The result maps each trainable leaf (keyed by its Var) to its gradient;
    trainable leaves that do not influence the loss get zeros.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ContractError("loss must be a Var recorded on this tape")
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    adj: list[np.ndarray | None] = [None] * len(tape.nodes)
    adj[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        g = adj[i]
        node = tape.nodes[i]
        if g is None or node.op == "leaf" or not node.needs_grad:
            continue
        vals = [tape.values[x.index] if isinstance(x, Var) else x for x in node.inputs]
        needs = [isinstance(x, Var) and tape.nodes[x.index].needs_grad for x in node.inputs]
        grads = node.vjp(g, tape.values[i], vals, needs)
        for x, need, gx in zip(node.inputs, needs, grads):
            if not need:
                continue
            adj[x.index] = gx if adj[x.index] is None else adj[x.index] + gx
    tape.adjoints = adj
    out = {}
    for leaf in tape.trainable_leaves:
        g = adj[leaf.index]
        out[leaf] = np.zeros_like(leaf.value) if g is None else g
    return out


# --------------------------------------------------------------------------
# Primitives


def matmul(a, b):
    sa, sb = _val(a).shape, _val(b).shape
    if sa[1] != sb[0]:
        raise DimensionError(f"matmul shape mismatch: {sa} x {sb}")

    def vjp(g, out, vals, needs):
        x, y = vals
        return (g @ y.T if needs[0] else None, x.T @ g if needs[1] else None)

    return _apply("matmul", np.matmul, vjp, a, b)


def transpose(a):
    return _apply("transpose", lambda x: np.ascontiguousarray(x.T), lambda g, o, v, n: (g.T,), a)


def add(a, b):
    sa, sb = _val(a).shape, _val(b).shape
    if sa != sb:
        raise DimensionError(f"add shape mismatch: {sa} + {sb}")
    return _apply("add", np.add, lambda g, o, v, n: (g, g), a, b)


def add_row(a, row):
    """``a + row`` with ``row`` of shape (1, cols) repeated over rows."""
    sa, sr = _val(a).shape, _val(row).shape
    if sr != (1, sa[1]):
        raise DimensionError(f"add_row shape mismatch: {sa} + {sr}")
    return _apply("add_row", np.add, lambda g, o, v, n: (g, g.sum(axis=0, keepdims=True)), a, row)


def scale(a, c: float):
    c = float(c)
    return _apply("scale", lambda x: x * c, lambda g, o, v, n: (g * c,), a)


def mul(a, b):
    sa, sb = _val(a).shape, _val(b).shape
    if sa != sb:
        raise DimensionError(f"mul shape mismatch: {sa} * {sb}")

    def vjp(g, out, vals, needs):
        return (g * vals[1], g * vals[0])

    return _apply("mul", np.multiply, vjp, a, b)


def relu(a):
    return _apply("relu", lambda x: np.maximum(x, 0.0), lambda g, o, v, n: (g * (v[0] > 0),), a)


def total(a):
    """Sum of all entries as a 1x1 matrix."""
    return _apply("total", lambda x: np.array([[x.sum()]]), lambda g, o, v, n: (np.full_like(v[0], g[0, 0]),), a)


def _row_normalize(m: np.ndarray) -> np.ndarray:
    s = m.sum(axis=1, keepdims=True)
    safe = np.where(s > 0, s, 1.0)
    return np.where(s > 0, m / safe, 0.0)


def row_normalize(m):
    """Divide each row by its sum; all-zero rows stay zero.

    Works on bare arrays (the ``D^-1 A`` normalization) and on tape values.
    """
    v = _val(m)
    if np.any(v < 0):
        raise ContractError("row_normalize requires non-negative entries")

    def vjp(g, out, vals, needs):
        s = vals[0].sum(axis=1, keepdims=True)
        safe = np.where(s > 0, s, 1.0)
        inner = (g * out).sum(axis=1, keepdims=True)
        return (np.where(s > 0, (g - inner) / safe, 0.0),)

    return _apply("row_normalize", _row_normalize, vjp, m)


def mse_gram(z, target):
    """Mean over all entries of ``(z z^T - target)^2``; target is constant."""
    t = as_matrix(target, "target")
    n = _val(z).shape[0]
    if t.shape != (n, n):
        raise DimensionError(f"mse_gram target shape {t.shape} does not match gram {(n, n)}")

    def fwd(x):
        r = x @ x.T - t
        return np.array([[np.mean(r * r)]])

    def vjp(g, out, vals, needs):
        x = vals[0]
        r = x @ x.T - t
        return (g[0, 0] * (2.0 / r.size) * ((r + r.T) @ x),)

    return _apply("mse_gram", fwd, vjp, z)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_cross_entropy(logits, target):
    """Mean binary cross-entropy between sigmoid(logits) and a constant target in [0, 1]."""
    t = as_matrix(target, "target")
    if _val(logits).shape != t.shape:
        raise DimensionError(f"cross-entropy shape mismatch: {_val(logits).shape} vs {t.shape}")

    def fwd(x):
        ce = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
        return np.array([[ce.mean()]])

    def vjp(g, out, vals, needs):
        return (g[0, 0] * (sigmoid(vals[0]) - t) / t.size,)

    return _apply("cross_entropy", fwd, vjp, logits)


def kl_divergence(p, q):
    """``sum(p * ln(p / q)) / n_rows`` with ``p`` held constant and ``q`` clamped at 1e-12."""
    pv = _val(p)
    if _val(q).shape != pv.shape:
        raise DimensionError(f"kl shape mismatch: {pv.shape} vs {_val(q).shape}")
    n = pv.shape[0]
    plogp = np.where(pv > 0, pv * np.log(np.where(pv > 0, pv, 1.0)), 0.0)

    def fwd(x):
        qc = np.maximum(x, CLAMP_EPS)
        return np.array([[(plogp - pv * np.log(qc)).sum() / n]])

    def vjp(g, out, vals, needs):
        x = vals[0]
        return (np.where(x > CLAMP_EPS, -g[0, 0] * pv / np.maximum(x, CLAMP_EPS) / n, 0.0),)

    return _apply("kl_divergence", fwd, vjp, q)


def _sq_dist(h: np.ndarray, mu: np.ndarray) -> np.ndarray:
    d = (h * h).sum(1)[:, None] - 2.0 * h @ mu.T + (mu * mu).sum(1)[None, :]
    return np.maximum(d, 0.0)


def student_t(h, mu):
    """Row-normalized Student-t kernel ``(1 + |h_i - mu_j|^2)^-1`` (alpha = 1)."""
    sh, sm = _val(h).shape, _val(mu).shape
    if sh[1] != sm[1]:
        raise DimensionError(f"student_t dim mismatch: points {sh} vs centroids {sm}")

    def fwd(x, m):
        w = 1.0 / (1.0 + _sq_dist(x, m))
        return w / w.sum(axis=1, keepdims=True)

    def vjp(g, q, vals, needs):
        x, m = vals
        w = 1.0 / (1.0 + _sq_dist(x, m))
        s = w.sum(axis=1, keepdims=True)
        gw = (g - (g * q).sum(axis=1, keepdims=True)) / s
        b = -gw * w * w
        gx = 2.0 * (b.sum(1)[:, None] * x - b @ m) if needs[0] else None
        gm = -2.0 * (b.T @ x - b.sum(0)[:, None] * m) if needs[1] else None
        return (gx, gm)

    return _apply("student_t", fwd, vjp, h, mu)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    """One bias-corrected Adam update. Returns new parameter arrays."""
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise DimensionError(
            f"adam_step got {len(params)} params, {len(grads)} grads, {len(state.first_moment)} moments"
        )
    for i, (p, g, m) in enumerate(zip(params, grads, state.first_moment)):
        if np.shape(p) != np.shape(g) or np.shape(p) != m.shape:
            raise DimensionError(f"adam_step param {i}: shape {np.shape(p)} vs grad {np.shape(g)} vs moment {m.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = b1 * state.first_moment[i] + (1.0 - b1) * g
        v = b2 * state.second_moment[i] + (1.0 - b2) * g * g
        state.first_moment[i], state.second_moment[i] = m, v
        out.append(p - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon))
    return out

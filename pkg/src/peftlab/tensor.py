"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything runs in 64-bit floats so numeric gradient checks have headroom.
Broadcasting is limited to what the encoder stack needs: elementwise ops
broadcast trailing dimensions, matmul broadcasts leading (batch) dimensions.

Each operation whose inputs require gradients records its parents and a
backward rule on the result. ``backward(loss)`` collects the reachable
operations into a :class:`GradTape` and replays it in reverse topological
order, accumulating gradients into ``.grad`` buffers. Tapes are built per
backward pass and discarded afterwards; graphs are never reused.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

from .errors import ShapeError

# Floor applied to probabilities before log() inside KL/CE compositions;
# keeps the loss finite when a softmax output underflows to ~0.
PROB_FLOOR = 1e-12

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Global matmul counter used to instrument computational cost (the routed
# mixture must do the same number of matrix products regardless of how many
# modules a site holds). Single-threaded by contract.
_matmul_calls = 0


def matmul_calls() -> int:
    """Number of matmul operations executed since the last reset."""
    return _matmul_calls


def reset_matmul_calls() -> None:
    global _matmul_calls
    _matmul_calls = 0


ArrayLike = Union[float, int, Sequence, np.ndarray]


class Tensor:
    """Row-major float64 array that can participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_rule")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._rule: Optional[Callable[[np.ndarray], tuple]] = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{grad})"

    # -- graph plumbing ------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple, rule: Callable) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._rule = rule
        return out

    def detach(self) -> "Tensor":
        """Same data, cut off from the tape (no gradient flows through)."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), _const(-1.0)))

    def __neg__(self):
        return mul(self, _const(-1.0))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(x: float) -> Tensor:
    return Tensor(np.float64(x))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def rule(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return Tensor._result(data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def rule(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return Tensor._result(data, (a, b), rule)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def rule(g):
        return (g / x.data,)

    return Tensor._result(data, (x,), rule)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    data = np.maximum(x.data, floor)

    def rule(g):
        return (g * (x.data > floor),)

    return Tensor._result(data, (x,), rule)


def gelu(x: Tensor) -> Tensor:
    """Exact erf-form GeLU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    e = erf(x.data * _INV_SQRT2)
    data = 0.5 * x.data * (1.0 + e)

    def rule(g):
        local = 0.5 * (1.0 + e) + x.data * np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * local,)

    return Tensor._result(data, (x,), rule)


# -- shape manipulation ---------------------------------------------------


def reshape(x: Tensor, shape: tuple) -> Tensor:
    data = x.data.reshape(shape)

    def rule(g):
        return (g.reshape(x.shape),)

    return Tensor._result(data, (x,), rule)


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs >=2 dims, got shape {x.shape}")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(x.data, axes)

    def rule(g):
        return (np.transpose(g, inverse),)

    return Tensor._result(data, (x,), rule)


def select_position(x: Tensor, index: int) -> Tensor:
    """Pick one position from (B, S, d): returns (B, d)."""
    data = x.data[:, index, :]

    def rule(g):
        full = np.zeros_like(x.data)
        full[:, index, :] = g
        return (full,)

    return Tensor._result(data, (x,), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any shape, result shape ids.shape + (d,)."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def rule(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids, g)
        return (acc,)

    return Tensor._result(data, (table,), rule)


# -- contractions and reductions ------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    global _matmul_calls
    _matmul_calls += 1
    data = np.matmul(a.data, b.data)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return Tensor._result(data, (a, b), rule)


def tensor_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(data, (x,), rule)


def tensor_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), _const(1.0 / n))


# -- neural-net ops --------------------------------------------------------


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax: rows sum to 1, invariant to adding a constant."""
    if not -z.ndim <= axis < z.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {z.shape}")
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return Tensor._result(y, (z,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    gain, bias = _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must match last dim {d}: got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gain.data * xhat + bias.data

    def rule(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        return (dx, dgain, dbias)

    return Tensor._result(data, (x, gain, bias), rule)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    Fused log-sum-exp with max subtraction; labels are plain integer class
    indices, not tensors.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise IndexError(f"label out of range [0, {c})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    nll = lse - z[np.arange(n), labels]
    data = np.float64(nll.mean())

    probs = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (np.asarray(g) / n),)

    return Tensor._result(data, (logits,), rule)


def kl_divergence(logits_p: Tensor, logits_q: Tensor) -> Tensor:
    """Mean over the batch of KL(softmax(logits_p) || softmax(logits_q)).

    Composed from primitive ops so gradients flow into both arguments.
    Logs are floored at PROB_FLOOR; identical inputs give exactly zero.
    """
    if logits_p.shape != logits_q.shape:
        raise ShapeError(
            f"kl_divergence shapes disagree: {logits_p.shape} vs {logits_q.shape}"
        )
    p = softmax(logits_p, axis=-1)
    q = softmax(logits_q, axis=-1)
    log_p = log(clamp_min(p, PROB_FLOOR))
    log_q = log(clamp_min(q, PROB_FLOOR))
    per_row = tensor_sum(mul(p, add(log_p, mul(log_q, _const(-1.0)))), axis=-1)
    return tensor_mean(per_row)


# -- backward pass ---------------------------------------------------------


class GradTape:
    """Ordered list of recorded operations for one backward pass.

    Built from the graph reachable from a root; replaying in reverse order
    produces the gradient of every reachable requires_grad tensor exactly
    once. The tape is discarded after use.
    """

    def __init__(self, records: list):
        self.records = records

    @classmethod
    def from_root(cls, root: Tensor) -> "GradTape":
        order: list = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                if node._rule is not None:
                    order.append(node)
                continue
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent._rule is not None:
                    stack.append((parent, False))
        return cls(order)

    def replay(self, root: Tensor) -> None:
        acc: dict = {id(root): np.ones_like(root.data)}
        tensors: dict = {id(root): root}
        for node in reversed(self.records):
            g = acc.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            for parent, pg in zip(node._parents, node._rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in acc:
                    acc[key] = acc[key] + pg
                else:
                    acc[key] = pg
                    tensors[key] = parent
        # whatever is left in acc are leaves (parameters, inputs)
        for key, g in acc.items():
            leaf = tensors[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> None:
    """Populate .grad for every reachable requires_grad tensor."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = GradTape.from_root(loss)
    if loss._rule is None:
        loss.grad = np.ones_like(loss.data)
        return
    tape.replay(loss)


# -- finite-difference oracle ----------------------------------------------


@dataclass
class FiniteDiffReport:
    """Result of comparing backward() against central finite differences."""

    max_rel_error: float
    tol: float
    passed: bool
    per_input: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"grad check {status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:.1e})"


def finite_diff_check(f, x, h: float = 1e-5, tol: float = 1e-4) -> FiniteDiffReport:
    """Check the analytic gradient of a scalar function against central differences.

    ``x`` is one Tensor or a sequence of Tensors; ``f`` is called as ``f(*xs)``
    and must return a scalar Tensor. Frozen inputs are excluded from the report.
    """
    if h <= 0:
        raise ValueError("finite_diff_check requires h > 0")
    xs = [x] if isinstance(x, Tensor) else list(x)

    for t in xs:
        t.grad = None
    loss = f(*xs)
    backward(loss)

    per_input: dict = {}
    skipped: list = []
    worst = 0.0
    for idx, t in enumerate(xs):
        if not t.requires_grad:
            skipped.append(idx)
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(*xs).item()
            flat[i] = orig - h
            f_minus = f(*xs).item()
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        rel = float(np.max(np.abs(analytic - numeric) / denom)) if t.size else 0.0
        per_input[idx] = rel
        worst = max(worst, rel)

    return FiniteDiffReport(
        max_rel_error=worst, tol=tol, passed=worst <= tol,
        per_input=per_input, skipped=skipped,
    )

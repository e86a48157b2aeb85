"""Dense float64 tensors with reverse-mode differentiation, an LSTM cell and Adam.

Only what the sequence models need is here.  Every op records a closure that
pushes the output gradient back to its inputs; :func:`backward` walks the
recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import gzip
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """2-d (or batched 3-d @ 2-d) matrix product."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _result(a.data @ b.data, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: a._accumulate(g * (1.0 - y * y)))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(y, (a,), lambda g: a._accumulate(g * y * (1.0 - y)))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: a._accumulate(g * y))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor) -> Tensor:
    return tsum(a) * (1.0 / a.data.size)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        a._accumulate(full)

    return _result(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, k, axis=axis))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by an integer array."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return _result(table.data[ids], (table,), backward)


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax; positions where ``mask`` is False get probability zero."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        a._accumulate(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _result(y, (a,), backward)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Sum over rows of -log softmax(logits)[target], each row scaled by ``weights``."""
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    w = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=np.float64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    logp = z[rows, targets] - np.log(s[:, 0])

    def backward(g):
        p = e / s
        p[rows, targets] -= 1.0
        logits._accumulate(g * w[:, None] * p)

    return _result(np.asarray(-(w * logp).sum()), (logits,), backward)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it.

    Leaves not reachable from ``root`` keep ``grad = None`` (read as zero).
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    root._accumulate(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior gradients are not needed once propagated
            node.grad = None if node._parents else node.grad


# --------------------------------------------------------------------------
# LSTM


@dataclass
class LstmParams:
    """Affine map from (input; previous hidden) to the four gate
    pre-activations, ordered input, forget, output, candidate."""

    weight: Tensor  # (input + hidden, 4 * hidden)
    bias: Tensor  # (4 * hidden,)

    @property
    def hidden_size(self) -> int:
        return self.weight.shape[1] // 4

    @property
    def input_size(self) -> int:
        return self.weight.shape[0] - self.hidden_size


def init_lstm(rng: np.random.Generator, input_size: int, hidden: int, scale: float = 0.08) -> LstmParams:
    weight = rng.uniform(-scale, scale, size=(input_size + hidden, 4 * hidden))
    bias = np.zeros(4 * hidden)
    bias[hidden : 2 * hidden] = 1.0  # forget gate
    return LstmParams(parameter(weight), parameter(bias))


class ShapeError(ValueError):
    pass


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: LstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM update: gates from T(x; h_prev), c = f*c_prev + i*g, h = o*tanh(c)."""
    H = params.hidden_size
    if x.shape[-1] != params.input_size or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ShapeError(
            f"lstm_step: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"do not fit params ({params.input_size} -> {H})"
        )
    gates = concat([x, h_prev], axis=-1) @ params.weight + params.bias
    i = sigmoid(gates[..., :H])
    f = sigmoid(gates[..., H : 2 * H])
    o = sigmoid(gates[..., 2 * H : 3 * H])
    g = tanh(gates[..., 3 * H :])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def affine(rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True, scale: float = 0.08):
    w = parameter(rng.uniform(-scale, scale, size=(n_in, n_out)))
    return (w, parameter(np.zeros(n_out))) if bias else (w, None)


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values() if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """In-place bias-corrected Adam update from each parameter's ``.grad``."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "navinstruct.tensors"
CHECKPOINT_VERSION = 1


def save_tensors(path, tensors: dict[str, Tensor | np.ndarray], meta: dict | None = None) -> None:
    """Write named tensors (name, dims, row-major values) as a JSON document.

    A ``.gz`` suffix compresses the file.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": [
            {"name": name, "dims": list(np.shape(_data(t))), "values": np.ravel(_data(t)).tolist()}
            for name, t in tensors.items()
        ],
    }
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wt", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a tensor checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    tensors = {
        t["name"]: np.asarray(t["values"], dtype=np.float64).reshape(t["dims"]) for t in doc["tensors"]
    }
    return tensors, doc.get("meta", {})


def _data(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t)


# --------------------------------------------------------------------------
# finite-difference checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Normwise relative error ||a - n|| / max(||a||, ||n||, floor).

    Per-element ratios are dominated by finite-difference round-off on
    entries whose true gradient is ~1e-8, so the tensor norm is used.
    """
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def numeric_gradient(f: Callable[[], float], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x.data``."""
    grad = np.zeros_like(x.data)
    flat, gflat = x.data.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = f()
        flat[k] = orig - eps
        down = f()
        flat[k] = orig
        gflat[k] = (up - down) / (2 * eps)
    return grad


def gradcheck(loss_fn: Callable[[], Tensor], inputs: dict[str, Tensor], eps: float = 1e-6) -> dict[str, float]:
    """Relative error between backprop and central differences per input."""
    for t in inputs.values():
        t.grad = None
    backward(loss_fn())
    report = {}
    for name, t in inputs.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        with no_grad():
            numeric = numeric_gradient(lambda: float(loss_fn().data), t, eps)
        report[name] = relative_error(analytic, numeric)
    return report

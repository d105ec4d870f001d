"""Dense float64 tensors with tape-based reverse-mode differentiation.

Arrays are plain numpy buffers; a :class:`Tensor` only adds the bookkeeping
needed to replay operations backwards.  Recording happens only while a
:class:`Tape` is active, so inference code pays no graph overhead.

Example
-------
>>> w = Tensor([1.0, 2.0], requires_grad=True)
>>> with Tape() as tape:
...     loss = sum_(w * w)
>>> tape.backward(loss, {"w": w})["w"]
array([2., 4.])
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

class _ThreadState(threading.local):
    strict = False

    def __init__(self):
        self.tapes: list = []


_state = _ThreadState()


class NonFiniteError(FloatingPointError):
    """Raised in strict mode when an op produces NaN or Inf."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


def set_strict(flag: bool) -> None:
    """Turn NaN/Inf checks at op boundaries on or off (per thread)."""
    _state.strict = bool(flag)


def _strict() -> bool:
    return _state.strict


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = data if type(data) is np.ndarray and data.dtype == DTYPE else np.asarray(data, dtype=DTYPE)
        if _state.strict and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    Nodes are appended in execution order, which is a valid topological order.
    """

    nodes: list[_Node] = field(default_factory=list)
    _tracked: set[int] = field(default_factory=set)

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], vjp, op: str) -> None:
        self.nodes.append(_Node(out, parents, vjp, op))
        self._tracked.add(id(out))

    def gradients(self, output: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
        if output.data.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not (parent.requires_grad or id(parent) in self._tracked):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [
            np.asarray(grads[id(t)], dtype=DTYPE).reshape(t.shape)
            if id(t) in grads
            else np.zeros_like(t.data)
            for t in leaves
        ]

    def backward(self, output: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradient of scalar ``output`` w.r.t. every tensor in ``params``.

        Leaves that do not influence ``output`` get zero gradients.
        """
        names = list(params)
        grads = self.gradients(output, [params[n] for n in names])
        return dict(zip(names, grads))


def _active_tape() -> Tape | None:
    stack = _state.tapes
    return stack[-1] if stack else None


def backward(tape: Tape, output: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return tape.backward(output, params)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad or id(p) in tape._tracked for p in parents):
        tape._record(out, parents, vjp, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
        "div",
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        # subgradient 0 at the kink keeps orthogonal banks finite
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _make(out, (a,), vjp, "sqrt")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), vjp, "gelu")


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp, "matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(items: Sequence, axis: int = 0) -> Tensor:
    items = tuple(as_tensor(t) for t in items)
    out = np.concatenate([t.data for t in items], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in items])[:-1]
    return _make(out, items, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def index(a, idx) -> Tensor:
    """Basic or advanced indexing (slicing included)."""
    a = as_tensor(a)
    out = a.data[idx]

    basic = all(
        isinstance(i, (slice, int, type(Ellipsis), type(None)))
        for i in (idx if isinstance(idx, tuple) else (idx,))
    )

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), vjp, "index")


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    return _make(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        lambda g: (_unbroadcast(g, a.shape),),
        "broadcast",
    )


# ---------------------------------------------------------------- reductions


def sum_(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), vjp, "sum")


def mean(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp, "softmax")


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ContractError(f"softmax_rows expects a matrix, got shape {a.shape}")
    return softmax(a, axis=-1)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def masked_logsumexp(a, mask: np.ndarray, axis: int = -1) -> Tensor:
    """log(sum(exp(a) * mask)) along ``axis``; empty rows give -inf."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    x = np.where(mask, a.data, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(x - m_safe), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.log(s) + m_safe
    w = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def vjp(g):
        return (np.expand_dims(g, axis) * w,)

    return _make(np.squeeze(out, axis=axis), (a,), vjp, "masked_logsumexp")


# ---------------------------------------------------------------- composites


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(square(xc), axis=-1, keepdims=True)
    return xc / sqrt(var + eps) * gamma + beta


# ---------------------------------------------------------------- checking


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must rebuild the loss from the current contents of ``params``.
    When ``max_entries`` is given and smaller than the parameter count, a
    seeded random subset of at least 200 entries is checked.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    with Tape() as tape:
        loss = loss_fn()
    analytic = tape.backward(loss, params)
    base = float(loss.data)
    if float(loss_fn().data) != base:
        raise ContractError("loss_fn is not deterministic")

    entries = [(name, i) for name, t in params.items() for i in range(t.data.size)]
    if max_entries is not None and len(entries) > max_entries:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(entries), size=max(max_entries, 200), replace=False)
        entries = [entries[i] for i in sorted(pick)]

    worst = 0.0
    for name, i in entries:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(loss_fn().data)
        flat[i] = orig - eps
        fm = float(loss_fn().data)
        flat[i] = orig
        numeric = (fp - fm) / (2 * eps)
        a = float(analytic[name].reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- optimizer


@dataclass
class CosineSchedule:
    base_lr: float
    total_steps: int

    def lr(self, step: int) -> float:
        if self.total_steps <= 0:
            return self.base_lr
        t = min(max(step, 0), self.total_steps) / self.total_steps
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimizerState:
    """Plain SGD with cosine learning-rate decay.

    ``momentum`` and ``weight_decay`` exist as knobs but default to off.
    """

    base_lr: float
    total_steps: int
    step: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def schedule(self) -> CosineSchedule:
        return CosineSchedule(self.base_lr, self.total_steps)

    def lr(self, step: int | None = None) -> float:
        return self.schedule.lr(self.step if step is None else step)


def sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    opt: OptimizerState,
    trainable: Sequence[str] | None = None,
) -> dict[str, Tensor]:
    """Return new parameters ``theta - lr(step) * g``; inputs are not mutated."""
    names = list(params) if trainable is None else list(trainable)
    missing = [n for n in names if n not in grads]
    if missing:
        raise ContractError(f"missing gradients for {missing}")
    lr = opt.lr()
    out = dict(params)
    for n in names:
        g = grads[n]
        if opt.weight_decay:
            g = g + opt.weight_decay * params[n].data
        if opt.momentum:
            v = opt.momentum * opt.velocity.get(n, 0.0) + g
            opt.velocity[n] = v
            g = v
        out[n] = Tensor(params[n].data - lr * g, requires_grad=params[n].requires_grad, name=n)
    opt.step += 1
    return out

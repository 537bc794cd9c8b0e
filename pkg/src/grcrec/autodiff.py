"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only what the recommender needs: broadcasting arithmetic, batched matmul,
embedding lookup, (log-)softmax, layer norm, GELU/tanh, concat/slice,
additive masking and cross-entropy.  Arrays are numpy ``float64``.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NumericalFault

log = logging.getLogger(__name__)

# Additive mask value; exp(MASK_VALUE - max) underflows to exactly 0.
MASK_VALUE = -1e9


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as they execute, so the list is already in topological
    order.  ``backward`` walks it in reverse once and then clears it.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)


_tape_stack: list[Tape] = [Tape()]
_grad_enabled = [True]


def current_tape() -> Tape:
    return _tape_stack[-1]


@contextlib.contextmanager
def no_grad():
    """Disable recording; results never require grad."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def grad_enabled() -> bool:
    return _grad_enabled[-1]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if not (isinstance(data, np.ndarray) and data.dtype == np.float64):
            data = np.array(data, dtype=np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
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

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def exp(self):
        return exp(self)

    def log(self):
        return log_(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalFault(op)
    out = Tensor(data)
    out._op = op
    if _grad_enabled[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        current_tape().record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, *shapes) -> None:
    try:
        np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ContractViolation(f"{op}: shapes {shapes} do not broadcast") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul"
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log_(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("minimum", a.shape, b.shape)
    take_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _make(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)),
        "minimum",
    )


# ------------------------------------------------------------------ reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


# ------------------------------------------------------------------- structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    _check_broadcast("matmul", a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractViolation(f"reshape: {old} -> {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def slice_(a: Tensor, index) -> Tensor:
    shape = a.shape
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ContractViolation(f"slice: {index} out of range for {shape}") from exc

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ContractViolation(f"concat: {[t.shape for t in tensors]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def embedding(weight: Tensor, indices) -> Tensor:
    """Rows of ``weight`` selected by an integer array of any shape."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractViolation("embedding: indices must be integers")
    if weight.ndim != 2:
        raise ContractViolation(f"embedding: weight must be 2-D, got {weight.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise ContractViolation(f"embedding: index out of range [0, {weight.shape[0]})")
    wshape = weight.shape

    def backward(g):
        full = np.zeros(wshape)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, wshape[1]))
        return (full,)

    return _make(weight.data[idx], (weight,), backward, "embedding")


# --------------------------------------------------------- normalisation, probs


def softmax(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ContractViolation(f"layer_norm: gain/bias must have shape ({x.shape[-1]},)")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gd + beta.data, (a, gamma, beta), backward, "layer_norm")


def masked_fill(a: Tensor, mask: np.ndarray) -> Tensor:
    """Add a constant 0 / -inf mask (``-inf`` is stored as ``MASK_VALUE``)."""
    m = np.asarray(mask, dtype=np.float64)
    if not np.all((m == 0) | (m <= MASK_VALUE)):
        raise ContractViolation("masked_fill: mask entries must be 0 or -inf")
    _check_broadcast("masked_fill", a.shape, m.shape)
    m = np.where(m == 0, 0.0, MASK_VALUE)
    return _make(a.data + m, (a,), lambda g: (_unbroadcast(g, a.shape),), "masked_fill")


def take_last(a: Tensor, indices) -> Tensor:
    """``a[..., indices[...]]`` along the last axis (gather)."""
    idx = np.asarray(indices)
    if idx.shape != a.shape[:-1]:
        raise ContractViolation(f"take_last: index shape {idx.shape} vs {a.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise ContractViolation("take_last: index out of range")
    expanded = idx[..., None]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, expanded, g[..., None], axis=-1)
        return (full,)

    return _make(np.take_along_axis(a.data, expanded, axis=-1)[..., 0], (a,), backward, "take_last")


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of ``logits[..., V]`` against integer ``targets[...]``."""
    idx = np.asarray(targets)
    if idx.shape != logits.shape[:-1]:
        raise ContractViolation(f"cross_entropy: target shape {idx.shape} vs logits {logits.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= logits.shape[-1]):
        raise ContractViolation("cross_entropy: target out of range")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    nll = -np.take_along_axis(logp, idx[..., None], axis=-1)[..., 0]
    if reduction == "none":
        out, scale = nll, None
    elif reduction == "sum":
        out, scale = nll.sum(), 1.0
    elif reduction == "mean":
        out, scale = nll.mean(), 1.0 / max(nll.size, 1)
    else:
        raise ContractViolation(f"cross_entropy: unknown reduction {reduction!r}")

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, idx[..., None], np.take_along_axis(grad, idx[..., None], axis=-1) - 1.0, axis=-1)
        gg = g[..., None] if scale is None else g * scale
        return (grad * gg,)

    return _make(np.asarray(out, dtype=np.float64), (logits,), backward, "cross_entropy")


# -------------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate dloss/dleaf into ``leaf.grad`` for every leaf that requires grad."""
    tape = tape or current_tape()
    if loss.data.size != 1:
        raise ContractViolation(f"backward: loss must be scalar, got shape {loss.shape}")
    if not tape.nodes or not loss.requires_grad:
        raise ContractViolation("backward: tape is empty or loss does not depend on parameters")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    tape.nodes.clear()


def reset_tape() -> None:
    """Drop any recorded but un-differentiated operations."""
    current_tape().nodes.clear()


# ------------------------------------------------------------------- optimiser


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState
) -> dict[str, np.ndarray]:
    """One Adam update.  Returns new parameter arrays; ``state`` is updated in place.

    Raises NumericalFault (without touching ``state``) if any gradient is non-finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalFault("optimizer_step", f"gradient of {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        out[name] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return out


class Adam:
    """Stateful wrapper applying :func:`optimizer_step` to named Tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clip_grad_norm(self, max_norm: float) -> float:
        total = math.sqrt(sum(float((p.grad**2).sum()) for p in self.params.values() if p.grad is not None))
        if total > max_norm > 0:
            scale = max_norm / (total + 1e-12)
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = p.grad * scale
        return total

    def step(self) -> bool:
        """Apply one update; returns False (and skips) on non-finite gradients."""
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        try:
            new = optimizer_step({k: p.data for k, p in self.params.items()}, grads, self.state)
        except NumericalFault as exc:
            log.warning("optimizer step skipped: %s", exc)
            return False
        for k, p in self.params.items():
            p.data = new[k]
        return True


# ------------------------------------------------------------------ checkpoint


def save_params(path, params: dict[str, Tensor | np.ndarray], header: dict | None = None) -> None:
    """JSON checkpoint.  Python's float repr round-trips float64 exactly."""
    body = {}
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name], dtype=np.float64)
        body[name] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
    with open(path, "w") as fh:
        json.dump({"header": header or {}, "params": body}, fh)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        raw = json.load(fh)
    params = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"]) for name, entry in raw["params"].items()
    }
    return params, raw.get("header", {})

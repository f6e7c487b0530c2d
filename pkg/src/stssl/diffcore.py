"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every op records its parents and a vector-Jacobian closure; ``backward``
walks the recorded graph in reverse topological order.  The graph is dropped
with the loss tensor, so each training step starts from a clean tape.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "backward",
    "zero_grad",
    "finite_difference_check",
    "AdamState",
    "adam_step",
    "Adam",
    "ContractError",
    "NumericError",
    "NondeterminismError",
]


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class NumericError(FloatingPointError):
    """A non-finite value appeared while differentiating."""


class NondeterminismError(RuntimeError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op", "name")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), vjp, "div")


def power(a: Tensor, p: float) -> Tensor:
    def vjp(g):
        return (g * p * a.data ** (p - 1),)

    return _make(a.data ** p, (a,), vjp, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; pick the matching branch per sign
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, ex) / (1.0 + ex)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(a)) without overflow."""
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(-x),), "log_sigmoid")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data >= lo
    return _make(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


# ----------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), vjp, "mean")


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = np.exp(_log_softmax_np(a.data, axis))

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax_np(a.data, axis)

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp, "log_softmax")


# -------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul expects operands with at least 2 dims")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


def temporal_conv(x: Tensor, w: Tensor) -> Tensor:
    """Valid 1-D convolution along axis -3.

    x: [..., T, N, C_in], w: [k, C_in, C_out] -> [..., T-k+1, N, C_out].
    Output step τ reads input steps τ .. τ+k-1; tap k-1 is the newest step.
    """
    k, c_in, c_out = w.shape
    T = x.shape[-3]
    if T < k:
        raise ContractError(f"temporal_conv needs T >= k, got T={T}, k={k}")
    if x.shape[-1] != c_in:
        raise ContractError(f"channel mismatch: input {x.shape[-1]}, kernel {c_in}")
    t_out = T - k + 1
    out = x.data[..., 0:t_out, :, :] @ w.data[0]
    for j in range(1, k):
        out = out + x.data[..., j:j + t_out, :, :] @ w.data[j]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gw = np.empty_like(w.data)
        g2 = g.reshape(-1, c_out)
        for j in range(k):
            gx[..., j:j + t_out, :, :] += g @ w.data[j].T
            gw[j] = x.data[..., j:j + t_out, :, :].reshape(-1, c_in).T @ g2
        return gx, gw

    return _make(out, (x, w), vjp, "temporal_conv")


# ------------------------------------------------------------------ structure

def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), vjp, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), vjp, "concat")


def roll(a: Tensor, shift: int, axis: int = 0) -> Tensor:
    return _make(np.roll(a.data, shift, axis=axis), (a,),
                 lambda g: (np.roll(g, -shift, axis=axis),), "roll")


# ------------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    With ``params`` given, their grads are zeroed first and a name -> gradient
    map is returned (zeros for parameters the loss never touched).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError(f"non-finite loss produced by '{loss.op}'")
    if params is not None:
        zero_grad(params)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not np.isfinite(pg).all():
                raise NumericError(f"non-finite gradient flowing out of '{node.op}'")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    if params is None:
        return None
    return {name: p.grad if p.grad is not None else np.zeros_like(p.data)
            for name, p in params.items()}


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = np.zeros_like(p.data)


def finite_difference_check(f: Callable[[Mapping[str, Tensor]], Tensor],
                            params: Mapping[str, Tensor],
                            eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    Relative error per entry is |analytic - fd| / max(1, |analytic|, |fd|).
    ``f`` must be deterministic; any random draws have to be frozen by the caller.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    loss = f(params)
    with no_grad():
        again = f(params)
    if not np.array_equal(loss.data, again.data):
        raise NondeterminismError("f returned different values for identical parameters")
    analytic = backward(loss, params)

    worst = 0.0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            ana = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = f(params).item()
                flat[i] = orig - eps
                down = f(params).item()
                flat[i] = orig
                fd = (up - down) / (2.0 * eps)
                err = np.abs(ana[i] - fd) / max(1.0, np.abs(ana[i]), np.abs(fd))
                worst = max(worst, float(err))
    return worst


# ----------------------------------------------------------------------- adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update.  Inputs are left untouched."""
    t = state.step_count + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ContractError(f"grad shape {g.shape} != param shape {value.shape} for '{name}'")
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        if m.shape != value.shape:
            raise ContractError(f"moment shape mismatch for '{name}'")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        new_params[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_hat)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps_hat,
                                 t, new_m, new_v)


class Adam:
    """Stateful wrapper applying ``adam_step`` to a dict of Tensors in place."""

    def __init__(self, params: Mapping[str, Tensor], lr=1e-3, beta1=0.9,
                 beta2=0.999, eps_hat=1e-8):
        self.params = params
        self.state = AdamState(lr, beta1, beta2, eps_hat)

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        values = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data)
                 for k, p in self.params.items()}
        updated, self.state = adam_step(values, grads, self.state)
        for k, p in self.params.items():
            p.data = updated[k]

"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy buffers. Operations executed while a
``Graph`` is active are recorded on that graph's tape in execution
order; ``Graph.backward`` replays the tape in exact reverse order and
accumulates gradients into the leaves that were created with
``requires_grad=True``.

Conventions:

- float32 is the working precision for training and inference, float64
  is used for gradient checking. Operands of a single op must share a
  dtype; nothing promotes silently. Python scalars are folded into the
  op and never create gradient paths.
- Outside an active Graph every op is a plain numpy computation, which
  is the inference fast path.
- Gradients accumulate additively: calling backward twice without
  clearing ``.grad`` doubles leaf gradients.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "ContractError",
    "NumericError",
    "set_finite_checks",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softplus",
    "softmax",
    "layernorm",
    "tsum",
    "tmean",
    "tmax",
    "reshape",
    "swapaxes",
    "concat",
    "narrow",
    "gather_rows",
    "pad2d",
    "cumsum",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class ContractError(ValueError):
    """An op or method was called outside its stated contract."""


class NumericError(ArithmeticError):
    """Non-finite values appeared while finite checking was enabled."""


_ALLOWED_DTYPES = (np.float32, np.float64)

_state = threading.local()

_finite_checks = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op output finiteness validation (global, off by default).

    Checking costs one extra pass over every op output, so it stays off
    in training loops; tests and debugging turn it on.
    """
    global _finite_checks
    _finite_checks = bool(enabled)


def _graph_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def _active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus gradient bookkeeping.

    ``requires_grad=True`` marks a leaf whose gradient should be
    produced by ``Graph.backward``. Tensors produced by recorded ops
    get ``requires_grad=True`` automatically so the tape can chain
    through them.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Detached copy of the underlying buffer."""
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    # Arithmetic sugar. Scalars are folded as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"


class Graph:
    """Tape of recorded ops; a context manager.

    Entering pushes the graph onto a thread-local stack; ops record on
    the innermost active graph only. Tapes are independent per thread,
    so shards can build and differentiate graphs concurrently as long
    as gradient reduction into shared leaves happens single-threaded.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _graph_stack().pop()
        if popped is not self:
            raise RuntimeError("graph stack corrupted")
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        self._nodes.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def backward(self, loss: Tensor, accumulate: bool = True) -> dict:
        """Reverse sweep from a scalar loss.

        Returns ``{leaf Tensor: gradient array}`` for every
        requires_grad leaf reached by the sweep. With
        ``accumulate=True`` the same gradients are also added into each
        leaf's ``.grad`` buffer.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._nodes):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            in_grads = backward_fn(g_out)
            for t, g_in in zip(inputs, in_grads):
                if g_in is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = g_in if prev is None else prev + g_in
        result: dict[Tensor, np.ndarray] = {}
        seen: set[int] = set()
        for _, inputs, _ in self._nodes:
            for t in inputs:
                if (
                    isinstance(t, Tensor)
                    and t.requires_grad
                    and id(t) not in self._produced
                    and id(t) not in seen
                ):
                    seen.add(id(t))
                    g = grads.get(id(t))
                    if g is None:
                        continue
                    g = np.ascontiguousarray(g)
                    result[t] = g
                    if accumulate:
                        t.grad = g.copy() if t.grad is None else t.grad + g
        if id(loss) not in self._produced and loss.requires_grad:
            # Degenerate but legal: the loss itself is a leaf.
            g = np.ones_like(loss.data)
            result[loss] = g
            if accumulate:
                loss.grad = g if loss.grad is None else loss.grad + g
        return result


def _as_const_like(x, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = _as_const_like(b, a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = _as_const_like(a, b)
    if a.data.dtype != b.data.dtype:
        raise ContractError(
            f"dtype mismatch: {a.data.dtype.name} vs {b.data.dtype.name}; cast explicitly"
        )
    return a, b


def _finish(out_data: np.ndarray, inputs: tuple, backward_fn: Callable, op: str) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values in output of {op}")
    out = Tensor(out_data)
    graph = _active_graph()
    if graph is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    ):
        out.requires_grad = True
        graph._record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _finish(out, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _finish(out, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data * b.data

    def backward_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _finish(out, (a, b), backward_fn, "mul")


def neg(a: Tensor) -> Tensor:
    def backward_fn(g):
        return (-g,)

    return _finish(-a.data, (a,), backward_fn, "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs ndim >= 2 operands, got shapes {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(
            f"matmul batch dims not broadcastable: {a.data.shape} @ {b.data.shape}"
        ) from e

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _finish(out, (a, b), backward_fn, "matmul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, a.data.dtype.type(0))

    def backward_fn(g):
        return (g * mask,)

    return _finish(out, (a,), backward_fn, "relu")


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_stable(a.data)

    def backward_fn(g):
        return (g * y * (1.0 - y),)

    return _finish(y, (a,), backward_fn, "sigmoid")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward_fn(g):
        return (g * y,)

    return _finish(y, (a,), backward_fn, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward_fn(g):
        return (g / a.data,)

    return _finish(out, (a,), backward_fn, "log")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(a.data.dtype.type(0), a.data)

    def backward_fn(g):
        return (g * _sigmoid_stable(a.data),)

    return _finish(out, (a,), backward_fn, "softplus")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _finish(y, (a,), backward_fn, "softmax")


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    gamma and beta are 1-D with length equal to the last axis of ``a``.
    Variance is the biased estimate.
    """
    a, gamma = _coerce_pair(a, gamma)
    _, beta = _coerce_pair(a, beta)
    d = a.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layernorm scale/shift must have shape ({d},), got {gamma.data.shape} and {beta.data.shape}"
        )
    mu = np.mean(a.data, axis=-1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.data.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        g_gamma = np.sum(g * xhat, axis=lead)
        g_beta = np.sum(g, axis=lead)
        gx_hat = g * gamma.data
        m1 = np.mean(gx_hat, axis=-1, keepdims=True)
        m2 = np.mean(gx_hat * xhat, axis=-1, keepdims=True)
        g_a = inv * (gx_hat - m1 - xhat * m2)
        return g_a, g_gamma, g_beta

    return _finish(out, (a, gamma, beta), backward_fn, "layernorm")


def _restore_axes(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.asarray(g).reshape((1,) * len(shape)), shape)
    if keepdims:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward_fn(g):
        return (np.ascontiguousarray(_restore_axes(np.asarray(g), a.data.shape, axis, keepdims)),)

    return _finish(np.asarray(out), (a,), backward_fn, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    scale = a.data.dtype.type(1.0 / count)

    def backward_fn(g):
        return (np.ascontiguousarray(_restore_axes(np.asarray(g), a.data.shape, axis, keepdims)) * scale,)

    return _finish(np.asarray(out), (a,), backward_fn, "mean")


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction. Ties route the gradient to the first maximal element
    (first in flat order for axis=None, lowest index along the axis otherwise).
    """
    if axis is None:
        out = np.max(a.data, keepdims=keepdims)
        flat_idx = int(np.argmax(a.data))

        def backward_fn(g):
            gi = np.zeros_like(a.data)
            gi.reshape(-1)[flat_idx] = np.asarray(g).reshape(())
            return (gi,)

        return _finish(np.asarray(out), (a,), backward_fn, "max")

    out = np.max(a.data, axis=axis, keepdims=keepdims)
    idx = np.argmax(a.data, axis=axis)

    def backward_fn(g):
        gi = np.zeros_like(a.data)
        g_arr = np.asarray(g)
        if not keepdims:
            g_arr = np.expand_dims(g_arr, axis)
        np.put_along_axis(gi, np.expand_dims(idx, axis), g_arr, axis)
        return (gi,)

    return _finish(np.asarray(out), (a,), backward_fn, "max")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.data.shape} to {shape}") from e

    def backward_fn(g):
        return (g.reshape(a.data.shape),)

    return _finish(np.ascontiguousarray(out), (a,), backward_fn, "reshape")


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    out = np.swapaxes(a.data, axis1, axis2)

    def backward_fn(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _finish(np.ascontiguousarray(out), (a,), backward_fn, "swapaxes")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    dt = tensors[0].data.dtype
    nd = tensors[0].data.ndim
    ax = axis % nd
    for t in tensors:
        if t.data.dtype != dt:
            raise ContractError("concat operands must share a dtype")
        if t.data.ndim != nd or any(
            i != ax and t.data.shape[i] != tensors[0].data.shape[i] for i in range(nd)
        ):
            raise ShapeError(
                f"concat shapes incompatible along axis {axis}: "
                + ", ".join(str(t.data.shape) for t in tensors)
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.data.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        slicer = [slice(None)] * nd
        parts = []
        for i in range(len(sizes)):
            slicer[ax] = slice(int(offsets[i]), int(offsets[i + 1]))
            parts.append(np.ascontiguousarray(g[tuple(slicer)]))
        return tuple(parts)

    return _finish(out, tuple(tensors), backward_fn, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along one axis."""
    nd = a.data.ndim
    ax = axis % nd
    if start < 0 or length < 0 or start + length > a.data.shape[ax]:
        raise ShapeError(
            f"narrow range [{start}, {start + length}) outside axis {axis} of shape {a.data.shape}"
        )
    slicer = [slice(None)] * nd
    slicer[ax] = slice(start, start + length)
    out = np.ascontiguousarray(a.data[tuple(slicer)])

    def backward_fn(g):
        gi = np.zeros_like(a.data)
        gi[tuple(slicer)] = g
        return (gi,)

    return _finish(out, (a,), backward_fn, "narrow")


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; repeated indices allowed.

    The backward pass scatter-adds into the source rows using one
    bincount per column, which keeps accumulation order deterministic.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D tensor, got shape {a.data.shape}")
    idx = np.asarray(indices)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("gather_rows indices must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ContractError(
            f"gather_rows index out of range for {a.data.shape[0]} rows"
        )
    out = a.data[idx]
    n_rows = a.data.shape[0]

    def backward_fn(g):
        gi = np.zeros_like(a.data)
        for c in range(a.data.shape[1]):
            gi[:, c] = np.bincount(idx, weights=g[:, c], minlength=n_rows).astype(
                a.data.dtype, copy=False
            )
        return (gi,)

    return _finish(out, (a,), backward_fn, "gather_rows")


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the two leading spatial axes of an (H, W, C) tensor."""
    if a.data.ndim != 3:
        raise ShapeError(f"pad2d needs an (H, W, C) tensor, got shape {a.data.shape}")
    if pad < 0:
        raise ContractError("pad2d pad must be non-negative")
    out = np.pad(a.data, ((pad, pad), (pad, pad), (0, 0)))

    def backward_fn(g):
        if pad == 0:
            return (g,)
        return (np.ascontiguousarray(g[pad:-pad, pad:-pad, :]),)

    return _finish(out, (a,), backward_fn, "pad2d")


def cumsum(a: Tensor, axis: int = -1, exclusive: bool = False) -> Tensor:
    """Running sum along an axis; ``exclusive`` shifts by one so entry i
    sums strictly-earlier entries (entry 0 is zero)."""
    inc = np.cumsum(a.data, axis=axis)
    if exclusive:
        out = np.zeros_like(a.data)
        nd = a.data.ndim
        ax = axis % nd
        src = [slice(None)] * nd
        dst = [slice(None)] * nd
        src[ax] = slice(0, -1)
        dst[ax] = slice(1, None)
        out[tuple(dst)] = inc[tuple(src)]
    else:
        out = inc

    def backward_fn(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        if exclusive:
            rev = rev - g
        return (np.ascontiguousarray(rev),)

    return _finish(out, (a,), backward_fn, "cumsum")


class GradCheckReport:
    """Per-parameter worst relative error from a finite-difference sweep."""

    def __init__(self, per_param: dict, tol: float):
        self.per_param = per_param
        self.tol = float(tol)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def worst_param(self) -> str:
        if not self.per_param:
            return ""
        return max(self.per_param, key=self.per_param.get)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"GradCheckReport({status}, max_rel_err={self.max_rel_err:.3e} "
            f"at {self.worst_param!r}, tol={self.tol:g})"
        )


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-6,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients against central differences.

    ``loss_fn`` must be deterministic, return a scalar Tensor, and read
    the parameter buffers in ``params`` by reference so that in-place
    perturbation is visible. Relative error per entry is
    ``|a - n| / max(|a|, |n|, 1e-6)``. The absolute floor sits well
    above central-difference roundoff (~1e-10 at h=1e-6), so
    structurally zero gradients (for instance a bias that cancels in a
    softmax) compare as zero-vs-noise instead of noise-vs-noise. Use
    float64 parameters; float32 rounding swamps the h=1e-6 stencil.
    """
    with Graph() as graph:
        loss = loss_fn()
    analytic = graph.backward(loss, accumulate=False)
    per_param: dict[str, float] = {}
    for name, p in params.items():
        a = analytic.get(p)
        if a is None:
            a = np.zeros_like(p.data)
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-6)
        rel = np.abs(a - num) / denom
        per_param[name] = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(per_param, tol)

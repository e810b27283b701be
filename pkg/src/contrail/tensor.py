"""Dense float tensors with tape-based reverse-mode differentiation.

Only the primitives the policy needs are provided. Each primitive checks its
input shapes and finiteness, computes its forward value with numpy, and, when a
:class:`Tape` is active and any input requires a gradient, records a node with
a vector-Jacobian product closure.

Axis rules for the binary elementwise ops (``add``, ``sub``, ``mul``): the two
operand shapes must be equal, or one shape must be a suffix of the other (the
shorter operand is repeated over the leading axes, as a bias is). Nothing else
broadcasts.

The activation used throughout the model is the tanh-approximated GELU.

Arrays are float64 unless a float32 array is passed in, in which case float32
is kept; gradients always take the dtype of the tensor they belong to.

Gradient policy: leaf gradients accumulate into ``Tensor.grad`` (call
``zero_grad`` between steps). A tape is consumed by ``backward``; a second
backward on the same tape raises ``RuntimeError``.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "backward", "no_tape", "finite_diff_check", "GradCheckError",
    "add", "sub", "mul", "scale", "exp", "log", "matmul", "softmax", "log_softmax",
    "layer_norm", "gelu", "concat", "sum", "mean", "max", "conv2d",
    "upsample_bilinear", "gather", "one_hot", "l2_normalize", "reshape",
    "transpose", "slice_axis",
]

_state = threading.local()


class Tensor:
    """A float array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        self.data = arr if arr.dtype == np.float32 else arr.astype(np.float64, copy=False)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, _as_tensor(other))
    def __radd__(self, other): return add(_as_tensor(other), self)
    def __sub__(self, other): return sub(self, _as_tensor(other))
    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))
    def __rmul__(self, other): return self.__mul__(other)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives executed inside the block are appended
    in execution order, which is already a topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, output: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("backward: tape already consumed; re-record the forward pass")
        if output.size != 1:
            raise ValueError(f"backward: output must be scalar, got shape {output.shape}")
        if output._node is None or not any(n is output._node for n in reversed(self.nodes)):
            raise ValueError("backward: output was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                gi = gi.astype(t.data.dtype, copy=False)
                if t._node is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    grads[key] = gi if key not in grads else grads[key] + gi
        # output <-> node is a reference cycle; break it so buffers free without the cyclic collector
        for node in self.nodes:
            node.output._node = None
            node.vjp = None
        self.nodes = []
        self.consumed = True


def backward(tape: Tape, output: Tensor) -> None:
    tape.backward(output)


class no_tape:
    """Suspend recording inside the block."""

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(None)

    def __exit__(self, *exc):
        _state.stack.pop()


def _active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _check(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        # the sum is finite for finite inputs short of overflow; confirm elementwise otherwise
        if not np.isfinite(a.sum()) and not np.all(np.isfinite(a)):
            raise FloatingPointError(f"{op}: non-finite input")


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    res = Tensor(out, requires_grad=needs)
    if needs:
        node = _Node(op, inputs, res, vjp)
        res._node = node
        tape.nodes.append(node)
    return res


def _shape_err(op: str, a, b) -> ValueError:
    return ValueError(f"{op}: shape mismatch {tuple(a)} vs {tuple(b)}")


def _suffix_reduce(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise _shape_err(op, sa, sb)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    _check("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_suffix_reduce(g, sa), _suffix_reduce(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("sub", a, b)
    _check("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_suffix_reduce(g, sa), -_suffix_reduce(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    _check("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_suffix_reduce(g * bd, ad.shape), _suffix_reduce(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    _check("scale", a.data)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    _check("exp", a.data)
    with np.errstate(over="raise"):
        out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    _check("log", a.data)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be positive")
    ad = a.data
    return _emit("log", (a,), np.log(ad), lambda g: (g / ad,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    _check("gelu", a.data)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit("gelu", (a,), out, vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (..., k, n) with equal leading axes, or (..., m, k) @ (k, n)."""
    sa, sb = a.shape, b.shape
    ok = a.ndim >= 2 and b.ndim >= 2 and sa[-1] == sb[-2] and (b.ndim == 2 or sa[:-2] == sb[:-2])
    if not ok:
        raise _shape_err("matmul", sa, sb)
    _check("matmul", a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, vjp)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"transpose: bad axes {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}") from None
    old = a.shape
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ValueError("concat: no inputs")
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise _shape_err("concat", xs[0].shape, x.shape)
    _check("concat", *(x.data for x in xs))
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _emit("concat", xs, np.concatenate([x.data for x in xs], axis=ax),
                 lambda g: tuple(np.split(g, bounds, axis=ax)))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ValueError(f"slice_axis: [{start}:{stop}] out of range for axis {ax} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _emit("slice", (a,), a.data[idx], vjp)


# ---------------------------------------------------------------- reductions

def _axes(a: Tensor, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(a.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % a.ndim for ax in axis))


def sum(a: Tensor, axis=None) -> Tensor:
    axes = _axes(a, axis)
    _check("sum", a.data)
    shape = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
    return _emit("sum", (a,), a.data.sum(axis=axes),
                 lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),))


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _axes(a, axis)
    n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axes), 1.0 / n)


def max(a: Tensor, axis=None) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry."""
    axes = _axes(a, axis)
    _check("max", a.data)
    rest = tuple(i for i in range(a.ndim) if i not in axes)
    perm = rest + axes
    moved = np.transpose(a.data, perm)
    flat = moved.reshape(moved.shape[:len(rest)] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        return (np.transpose(gf.reshape(moved.shape), np.argsort(perm)),)

    return _emit("max", (a,), out, vjp)


# ---------------------------------------------------------------- normalizations

def _masked_logits(op: str, x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return x
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(mask.any(axis=-1)):
        raise ValueError(f"{op}: a row has every entry masked out")
    return np.where(mask, x, -np.inf)


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis`` (last axis only when ``mask`` is given).

    ``mask`` is a boolean array broadcastable to ``a`` (numpy rules apply to
    masks only); masked entries get probability exactly 0.
    """
    _check("softmax", a.data)
    x = a.data if mask is None else _masked_logits("softmax", a.data, mask)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), p, vjp)


def log_softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Log-softmax; masked entries are excluded from the normalizer and read 0."""
    _check("log_softmax", a.data)
    x = a.data if mask is None else _masked_logits("log_softmax", a.data, mask)
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    if mask is not None:
        out = np.where(np.isfinite(out), out, 0.0)

    def vjp(g):
        gm = g if mask is None else np.where(np.isfinite(z), g, 0.0)
        return (gm - p * gm.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (a,), out, vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise _shape_err("layer_norm", x.shape, gamma.shape)
    _check("layer_norm", x.data, gamma.data, beta.data)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    gd = gamma.data

    def vjp(g):
        gxh = g * gd
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                    - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xh).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", (x, gamma, beta), xh * gd + beta.data, vjp)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Unit-normalize along the last axis."""
    _check("l2_normalize", a.data)
    n = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    n = np.maximum(n, eps)
    y = a.data / n

    def vjp(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return _emit("l2_normalize", (a,), y, vjp)


# ---------------------------------------------------------------- indexing

def gather(a: Tensor, index) -> Tensor:
    """Pick ``a[..., index[...]]`` along the last axis; ``index`` has shape ``a.shape[:-1]``."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise _shape_err("gather", a.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise ValueError(f"gather: index out of range for last axis {a.shape[-1]}")
    _check("gather", a.data)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _emit("gather", (a,), np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0], vjp)


def one_hot(index, n: int) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"one_hot: index out of range for {n} classes")
    return Tensor(np.eye(n)[idx])


# ---------------------------------------------------------------- spatial

def _windows(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) with odd square kernels.

    x: (N, C, H, W); w: (O, C, k, k); b: (O,).
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3] \
            or w.shape[2] % 2 == 0 or b.shape != (w.shape[0],):
        raise _shape_err("conv2d", x.shape, w.shape)
    _check("conv2d", x.data, w.data, b.data)
    k = w.shape[2]
    xd, wd = x.data, w.data
    cols = _windows(xd, k)  # N, C, H, W, k, k
    out = np.einsum("nchwuv,ocuv->nohw", cols, wd, optimize=True) + b.data[None, :, None, None]

    def vjp(g):
        gw = np.einsum("nchwuv,nohw->ocuv", cols, g, optimize=True)
        gcols = _windows(g, k)
        gx = np.einsum("nohwuv,ocuv->nchw", gcols, wd[:, :, ::-1, ::-1], optimize=True)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _emit("conv2d", (x, w, b), out, vjp)


_interp_cache: dict[tuple[int, int], np.ndarray] = {}


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel (align_corners=False) linear interpolation matrix, edge-clamped."""
    key = (n_in, n_out)
    m = _interp_cache.get(key)
    if m is None:
        m = np.zeros((n_out, n_in))
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        m[np.arange(n_out), i0] += 1.0 - frac
        m[np.arange(n_out), i1] += frac
        m.setflags(write=False)
        _interp_cache[key] = m
    return m


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes to ``size``."""
    if x.ndim < 2:
        raise ValueError(f"upsample_bilinear: need at least 2 axes, got {x.shape}")
    _check("upsample_bilinear", x.data)
    ry = interp_matrix(x.shape[-2], size[0]).astype(x.data.dtype, copy=False)
    rx = interp_matrix(x.shape[-1], size[1]).astype(x.data.dtype, copy=False)
    out = ry @ x.data @ rx.T
    return _emit("upsample_bilinear", (x,), out, lambda g: (ry.T @ g @ rx,))


# ---------------------------------------------------------------- gradient check

class GradCheckError(FloatingPointError):
    def __init__(self, index: int, msg: str):
        super().__init__(f"coordinate {index}: {msg}")
        self.index = index


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-3,
                      coords: Sequence[int] | None = None) -> float:
    """Max relative error between the tape gradient and central differences.

    The error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``. ``coords``
    restricts the check to a subset of flat coordinates.
    """
    x = np.array(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("finite_diff_check: x must be finite")
    xt = Tensor(x.copy(), requires_grad=True)
    try:
        with Tape() as tape:
            y = f(xt)
    except FloatingPointError as exc:
        raise GradCheckError(-1, f"f(x) is non-finite ({exc})") from exc
    if not np.all(np.isfinite(y.data)):
        raise GradCheckError(-1, "f(x) is non-finite")
    tape.backward(y)
    analytic = np.zeros_like(x) if xt.grad is None else xt.grad
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        vals = []
        for s in (1.0, -1.0):
            xp = flat.copy()
            xp[i] += s * eps
            try:
                with no_tape():
                    v = float(f(Tensor(xp.reshape(x.shape))).data)
            except (FloatingPointError, ValueError) as exc:
                # domain errors under perturbation (log of a non-positive value, overflow)
                raise GradCheckError(i, f"f is non-finite under perturbation ({exc})") from exc
            if not math.isfinite(v):
                raise GradCheckError(i, "f is non-finite under perturbation")
            vals.append(v)
        num = (vals[0] - vals[1]) / (2 * eps)
        a = float(analytic.reshape(-1)[i])
        worst = np.maximum(worst, abs(a - num) / np.maximum(1e-8, abs(a) + abs(num)))
    return float(worst)

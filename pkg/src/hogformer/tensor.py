"""Minimal dense tensor with reverse-mode differentiation.

Every network op in the package is built from the functions here. A
``Tensor`` wraps a numpy array; ops record a backward closure on their
output and ``Tensor.backward`` replays the graph in reverse topological
order.

Gradients accumulate into ``.grad`` across repeated ``backward`` calls.
Callers reset them explicitly (``Tensor.zero_grad`` / ``Module.zero_grad``).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from . import _kernels


class ConfigurationError(ValueError):
    """Raised when shapes or hyperparameters do not fit together."""


class InputValidationError(ValueError):
    """Raised on invalid input values (NaN sort keys, bad indices, ...)."""


_default_dtype = np.float32
_grad_enabled = True


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new parameters and constants."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


# ---------------------------------------------------------------------------
# Discrete-decision tape.
#
# Sorting and orientation binning are piecewise constant. While recording, the
# results of those decisions are appended to a tape; while replaying, the same
# decisions are reused. The finite-difference checker uses this to evaluate
# the function on the same smooth piece the analytic gradient describes.
# ---------------------------------------------------------------------------

_tape: list | None = None
_tape_mode: str | None = None
_tape_pos = 0


@contextlib.contextmanager
def discrete_tape(mode: str, tape: list):
    global _tape, _tape_mode, _tape_pos
    if mode not in ("record", "replay"):
        raise ValueError(f"unknown tape mode {mode!r}")
    saved = (_tape, _tape_mode, _tape_pos)
    _tape, _tape_mode, _tape_pos = tape, mode, 0
    try:
        yield tape
    finally:
        if mode == "replay" and _tape_pos != len(tape):
            consumed = _tape_pos
            _tape, _tape_mode, _tape_pos = saved
            raise RuntimeError(
                f"discrete tape replay consumed {consumed} of {len(tape)} decisions"
            )
        _tape, _tape_mode, _tape_pos = saved


def discrete(compute: Callable[[], np.ndarray]) -> np.ndarray:
    """Evaluate a piecewise-constant decision, honoring an active tape."""
    global _tape_pos
    if _tape_mode == "replay":
        value = _tape[_tape_pos]
        _tape_pos += 1
        return value
    value = compute()
    if _tape_mode == "record":
        _tape.append(value)
    return value


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(_default_dtype)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable tensor that requires grad.

        ``self`` must be a scalar unless an explicit upstream ``grad`` is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ------------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A leaf tensor that always requires grad."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        dtype = _default_dtype
    return Tensor(x, dtype=dtype)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward(g)`` receives the upstream gradient and returns one gradient
    (or ``None``) per parent.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return make_op(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return make_op((x * cdf).astype(x.dtype), (a,), lambda g: ((g * (cdf + x * pdf)).astype(x.dtype),))


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_op(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ConfigurationError(f"cannot reshape {old} into {tuple(shape)}") from None
    return make_op(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, old),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if _has_advanced(index):
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return make_op(a.data[index], (a,), backward)


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != axis
        ):
            raise ConfigurationError(
                f"concat along axis {axis}: shapes {[x.shape for x in tensors]} disagree"
            )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def split(a: Tensor, sections: int, axis: int = 0) -> list[Tensor]:
    """Split into ``sections`` equal chunks along ``axis``."""
    n = a.shape[axis]
    if n % sections:
        raise ConfigurationError(f"cannot split extent {n} into {sections} equal parts")
    step = n // sections
    out = []
    for i in range(sections):
        index = [slice(None)] * a.ndim
        index[axis] = slice(i * step, (i + 1) * step)
        out.append(getitem(a, tuple(index)))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ConfigurationError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------------------
# Padding
# ---------------------------------------------------------------------------


def pad2d(x: Tensor, pad: int | tuple, mode: str = "reflect") -> Tensor:
    """Pad the last two axes; ``pad`` is ``p`` or ``(top, bottom, left, right)``.

    ``mode`` is ``"reflect"`` (edge not repeated, as numpy) or ``"constant"``.
    """
    if isinstance(pad, int):
        pad = (pad, pad, pad, pad)
    top, bottom, left, right = pad
    if not any(pad):
        return x
    H, W = x.shape[-2:]
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    if mode == "constant":
        out = np.pad(x.data, widths)
        crop = (..., slice(top, top + H), slice(left, left + W))
        return make_op(out, (x,), lambda g: (g[crop],))
    if mode != "reflect":
        raise ConfigurationError(f"unknown pad mode {mode!r}")
    if (H == 1 and (top or bottom)) or (W == 1 and (left or right)):
        raise ConfigurationError(f"cannot reflect-pad an extent of 1 (shape {x.shape})")
    rows = np.pad(np.arange(H), (top, bottom), mode="reflect")
    cols = np.pad(np.arange(W), (left, right), mode="reflect")
    out = x.data[..., rows[:, None], cols[None, :]]

    def backward(g):
        # Fold the padded gradient back onto source rows, then columns.
        gr = np.zeros(g.shape[:-2] + (H, g.shape[-1]), dtype=g.dtype)
        np.add.at(gr, (..., rows, slice(None)), g)
        gc = np.zeros(g.shape[:-2] + (H, W), dtype=g.dtype)
        np.add.at(gc, (..., slice(None), cols), gr)
        return (gc,)

    return make_op(out, (x,), backward)


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    return getitem(x, (..., slice(0, h), slice(0, w)))


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Cross-correlation over an NCHW batch with zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv2d expects NCHW input and OIkk weight, got {x.shape}, {weight.shape}")
    N, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    if C % groups or O % groups:
        raise ConfigurationError(f"conv2d: channels in={C}, out={O} not divisible by groups={groups}")
    if Cg != C // groups:
        raise ConfigurationError(
            f"conv2d: weight expects {Cg} channels per group but input has {C}/{groups}={C // groups}"
        )
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ConfigurationError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")

    if kh == kw == 1 and stride == 1 and padding == 0 and groups == 1:
        out = _pointwise(x, weight)
    elif groups == C and O == C and Cg == 1 and stride == 1:
        out = _depthwise(x, weight, padding)
    else:
        out = _conv_general(x, weight, stride, padding, groups)
    if bias is not None:
        out = out + reshape(bias, (1, O, 1, 1))
    return out


def _pointwise(x: Tensor, weight: Tensor) -> Tensor:
    N, C, H, W = x.shape
    O = weight.shape[0]
    w2 = weight.data.reshape(O, C)
    x3 = x.data.reshape(N, C, H * W)
    out = np.matmul(w2, x3).reshape(N, O, H, W)

    def backward(g):
        g3 = g.reshape(N, O, H * W)
        gx = np.matmul(w2.T, g3).reshape(N, C, H, W) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = sum(g3[n] @ x3[n].T for n in range(N)).reshape(weight.shape)
        return gx, gw

    return make_op(out, (x, weight), backward)


def _depthwise(x: Tensor, weight: Tensor, padding: int) -> Tensor:
    N, C, H, W = x.shape
    kh, kw = weight.shape[2:]
    dtype = np.result_type(x.dtype, weight.dtype)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xp = np.ascontiguousarray(xp, dtype=dtype)
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    w = np.ascontiguousarray(weight.data[:, 0], dtype=dtype)
    out = np.zeros((N, C, Ho, Wo), dtype=dtype)
    _kernels.dw_forward(xp, w, out)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=dtype)
            _kernels.dw_grad_input(g, w, gxp)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        if weight.requires_grad:
            gw = np.empty((C, kh, kw), dtype=dtype)
            _kernels.dw_grad_weight(g, xp, gw)
            gw = gw.reshape(weight.shape)
        return gx, gw

    return make_op(out, (x, weight), backward)


def _conv_general(x: Tensor, weight: Tensor, stride: int, padding: int, groups: int) -> Tensor:
    N, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    G, Og = groups, O // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Hp, Wp = xp.shape[2:]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    xg = xp.reshape(N, G, Cg, Hp, Wp)
    cols = np.lib.stride_tricks.sliding_window_view(xg, (kh, kw), axis=(3, 4))
    cols = cols[:, :, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    wg = weight.data.reshape(G, Og, Cg, kh, kw)
    out = np.einsum("ngchwij,gocij->ngohw", cols, wg, optimize=True).reshape(N, O, Ho, Wo)

    def backward(g):
        gg = g.reshape(N, G, Og, Ho, Wo)
        gx = gw = None
        if weight.requires_grad:
            gw = np.einsum("ngohw,ngchwij->gocij", gg, cols, optimize=True).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.einsum("ngohw,gocij->ngchwij", gg, wg, optimize=True)
            gxp = np.zeros((N, G, Cg, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[..., i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[..., i, j]
            gxp = gxp.reshape(N, C, Hp, Wp)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gw

    return make_op(out, (x, weight), backward)


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Average pooling; zero padding counts toward the divisor."""
    stride = kernel if stride is None else stride
    C = x.shape[1]
    if kernel == 1 and stride == 1 and padding == 0:
        return x
    w = Tensor(np.full((C, 1, kernel, kernel), 1.0 / (kernel * kernel), dtype=x.dtype))
    if stride == 1:
        return conv2d(x, w, stride=1, padding=padding, groups=C)
    return _conv_general(x, w, stride, padding, C)


# ---------------------------------------------------------------------------
# Normalization and attention primitives
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, axis: int = 1) -> Tensor:
    """Normalize over ``axis`` (channels for NCHW) at every other position."""
    C = x.shape[axis]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ConfigurationError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} != ({C},)")
    bshape = [1] * x.ndim
    bshape[axis] = C
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gxhat = g * gd
            gx = rstd * (
                gxhat
                - gxhat.mean(axis=axis, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True)
            )
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=reduce_axes)
        if beta.requires_grad:
            gbeta = g.sum(axis=reduce_axes)
        return gx, ggamma, gbeta

    return make_op(out, (x, gamma, beta), backward)


def softmax_last(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_op(out, (x,), backward)


def argsort_stable(keys, axis: int = -1) -> np.ndarray:
    """Ascending stable argsort; ties keep their original order."""
    data = keys.data if isinstance(keys, Tensor) else np.asarray(keys)

    def compute():
        if np.isnan(data).any():
            raise InputValidationError("argsort_stable: sort keys contain NaN")
        return np.argsort(data, axis=axis, kind="stable")

    return discrete(compute)


def _check_index(idx: np.ndarray, extent: int, op: str) -> np.ndarray:
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise InputValidationError(f"{op}: index array must be integer, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= extent):
        raise IndexError(f"{op}: index out of range for axis of extent {extent}")
    return idx


def gather_axis(x: Tensor, idx: np.ndarray, axis: int = -1) -> Tensor:
    """``out[..., i, ...] = x[..., idx[i], ...]`` along ``axis``.

    ``idx`` must be a permutation per slice and broadcastable to ``x``.
    Indices are constants; the gradient is the matching scatter.
    """
    axis = axis % x.ndim
    idx = _check_index(idx, x.shape[axis], "gather_axis")
    full = np.broadcast_to(idx, x.shape[:axis] + idx.shape[axis:axis + 1] + x.shape[axis + 1:])
    out = np.take_along_axis(x.data, full, axis=axis)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, full, g, axis=axis)
        return (gx,)

    return make_op(out, (x,), backward)


def scatter_axis(x: Tensor, idx: np.ndarray, axis: int = -1) -> Tensor:
    """Inverse of :func:`gather_axis` for the same permutation ``idx``."""
    axis = axis % x.ndim
    idx = _check_index(idx, x.shape[axis], "scatter_axis")
    full = np.broadcast_to(idx, x.shape)
    out = np.zeros(x.shape, dtype=x.dtype)
    np.put_along_axis(out, full, x.data, axis=axis)
    return make_op(out, (x,), lambda g: (np.take_along_axis(g, full, axis=axis),))


def invert_permutation(perm: np.ndarray, axis: int = -1) -> np.ndarray:
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    ar = np.broadcast_to(
        np.arange(perm.shape[axis]).reshape([-1 if i == axis % perm.ndim else 1 for i in range(perm.ndim)]),
        perm.shape,
    )
    np.put_along_axis(inv, perm, ar, axis=axis)
    return inv


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """(..., C, H, W) -> (..., C*r*r, H/r, W/r)."""
    *lead, C, H, W = x.shape
    if H % r or W % r:
        raise ConfigurationError(f"pixel_unshuffle: H={H}, W={W} not divisible by r={r}")
    n = len(lead)
    y = reshape(x, (*lead, C, H // r, r, W // r, r))
    y = transpose(y, (*range(n), n, n + 2, n + 4, n + 1, n + 3))
    return reshape(y, (*lead, C * r * r, H // r, W // r))


def pixel_shuffle(x: Tensor, r: int, direction: str = "up") -> Tensor:
    """(..., C*r*r, H, W) -> (..., C, H*r, W*r); ``direction="down"`` unshuffles."""
    if direction == "down":
        return pixel_unshuffle(x, r)
    if direction != "up":
        raise ConfigurationError(f"pixel_shuffle: direction must be 'up' or 'down', got {direction!r}")
    *lead, C, H, W = x.shape
    if C % (r * r):
        raise ConfigurationError(f"pixel_shuffle: C={C} not divisible by r^2={r * r}")
    n = len(lead)
    y = reshape(x, (*lead, C // (r * r), r, r, H, W))
    y = transpose(y, (*range(n), n, n + 3, n + 1, n + 4, n + 2))
    return reshape(y, (*lead, C // (r * r), H * r, W * r))


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


class Module:
    """Container that discovers parameters and submodules by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterable[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

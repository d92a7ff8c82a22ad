"""Dense float64 tensors with a reverse-mode differentiation tape.

Every differentiable operation goes through :func:`apply_primitive`, which runs a
numpy kernel and, when any input requires a gradient, appends a node to the
active :class:`Tape`.  :func:`backward` walks that tape once in reverse order.

Example
-------
>>> x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
>>> with Tape() as tape:
...     y = (x * x).sum()
>>> grads = backward(y, tape)
>>> grads[x]
array([ 2., -4.,  6.])
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

MAX_RANK = 5
LAYER_NORM_EPS = 1e-5

_uid_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when a primitive receives inputs whose shapes do not conform."""

    def __init__(self, kind: str, expected: Any, actual: Any):
        self.kind = kind
        self.expected = expected
        self.actual = actual
        super().__init__(f"{kind}: expected {expected}, got {actual}")


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable float64 array that may participate in differentiation."""

    __slots__ = ("data", "requires_grad", "_node", "_tape", "_uid", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, data, requires_grad: bool = False, _owned: bool = False):
        if _owned:
            arr = np.asarray(data, dtype=np.float64)
            if not arr.flags.c_contiguous:
                arr = arr.copy()
        else:
            arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim > MAX_RANK:
            raise ShapeError("tensor", f"rank <= {MAX_RANK}", arr.shape)
        if arr.size == 0:
            raise ShapeError("tensor", "extents >= 1", arr.shape)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node: int | None = None
        self._tape: Tape | None = None
        self._uid = next(_uid_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tape_id(self) -> int | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar; every path ends in apply_primitive
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        if _is_basic_index(index):
            return slice_(self, index)
        return gather(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    out_uid: int
    out_shape: tuple[int, ...]
    saved: Any
    attrs: dict


@dataclass
class Tape:
    """Ordered record of primitive applications; consumable by one backward."""

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> Tape:
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t._node is None and t._uid not in seen:
                    seen[t._uid] = t
        return list(seen.values())


_tape_stack: list[Tape] = []
_default_tape: Tape | None = None


def current_tape() -> Tape:
    global _default_tape
    if _tape_stack:
        return _tape_stack[-1]
    if _default_tape is None or _default_tape.consumed:
        _default_tape = Tape()
    return _default_tape


class Gradients(dict):
    """Mapping from leaf tensors to gradient arrays, keyed by tensor identity."""

    def __init__(self):
        super().__init__()
        self._tensors: dict[int, Tensor] = {}

    def __setitem__(self, t: Tensor, value: np.ndarray) -> None:
        self._tensors[t._uid] = t
        super().__setitem__(t._uid, value)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return super().__getitem__(t._uid)

    def __contains__(self, t) -> bool:
        return isinstance(t, Tensor) and super().__contains__(t._uid)

    def get(self, t: Tensor, default=None):
        return super().get(t._uid, default)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())


# ---------------------------------------------------------------------------
# primitive kernels: forward(arrays, attrs) -> (out, saved);
# backward(g, saved, arrays, attrs) -> tuple of input grads (None = no grad)
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, "broadcast-compatible shapes", (a.shape, b.shape)) from None


def _add_fwd(arrs, attrs):
    a, b = arrs
    _check_broadcast("add", a, b)
    return a + b, None


def _add_bwd(g, saved, arrs, attrs):
    a, b = arrs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(arrs, attrs):
    a, b = arrs
    _check_broadcast("sub", a, b)
    return a - b, None


def _sub_bwd(g, saved, arrs, attrs):
    a, b = arrs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_fwd(arrs, attrs):
    a, b = arrs
    _check_broadcast("mul", a, b)
    return a * b, None


def _mul_bwd(g, saved, arrs, attrs):
    a, b = arrs
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_fwd(arrs, attrs):
    a, b = arrs
    _check_broadcast("div", a, b)
    return a / b, None


def _div_bwd(g, saved, arrs, attrs):
    a, b = arrs
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _neg_fwd(arrs, attrs):
    return -arrs[0], None


def _neg_bwd(g, saved, arrs, attrs):
    return (-g,)


def _pow_fwd(arrs, attrs):
    return np.power(arrs[0], attrs["exponent"]), None


def _pow_bwd(g, saved, arrs, attrs):
    p = attrs["exponent"]
    return (g * p * np.power(arrs[0], p - 1),)


def _square_fwd(arrs, attrs):
    return arrs[0] * arrs[0], None


def _square_bwd(g, saved, arrs, attrs):
    return (2.0 * g * arrs[0],)


def _sqrt_fwd(arrs, attrs):
    out = np.sqrt(arrs[0])
    return out, out


def _sqrt_bwd(g, out, arrs, attrs):
    return (g * 0.5 / out,)


def _exp_fwd(arrs, attrs):
    out = np.exp(arrs[0])
    return out, out


def _exp_bwd(g, out, arrs, attrs):
    return (g * out,)


def _log_fwd(arrs, attrs):
    return np.log(arrs[0]), None


def _log_bwd(g, saved, arrs, attrs):
    return (g / arrs[0],)


def _sigmoid_fwd(arrs, attrs):
    out = 0.5 * (1.0 + np.tanh(0.5 * arrs[0]))
    return out, out


def _sigmoid_bwd(g, out, arrs, attrs):
    return (g * out * (1.0 - out),)


def _tanh_fwd(arrs, attrs):
    out = np.tanh(arrs[0])
    return out, out


def _tanh_bwd(g, out, arrs, attrs):
    return (g * (1.0 - out * out),)


def _relu_fwd(arrs, attrs):
    return np.maximum(arrs[0], 0.0), None


def _relu_bwd(g, saved, arrs, attrs):
    return (g * (arrs[0] > 0),)


def _leaky_relu_fwd(arrs, attrs):
    x = arrs[0]
    return np.where(x > 0, x, attrs["slope"] * x), None


def _leaky_relu_bwd(g, saved, arrs, attrs):
    return (np.where(arrs[0] > 0, g, attrs["slope"] * g),)


def _clip_fwd(arrs, attrs):
    lo, hi = attrs.get("min"), attrs.get("max")
    return np.clip(arrs[0], lo, hi), None


def _clip_bwd(g, saved, arrs, attrs):
    x = arrs[0]
    keep = np.ones_like(x, dtype=bool)
    if attrs.get("min") is not None:
        keep &= x >= attrs["min"]
    if attrs.get("max") is not None:
        keep &= x <= attrs["max"]
    return (g * keep,)


def _matmul_fwd(arrs, attrs):
    a, b = arrs
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "(..., m, k) @ (..., k, n)", (a.shape, b.shape))
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", "broadcastable batch dims", (a.shape, b.shape)) from None
    return np.matmul(a, b), None


def _matmul_bwd(g, saved, arrs, attrs):
    a, b = arrs
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, H, W, C) -> (N, H, W, kh*kw*C) zero-padded patches, (i, j, c) order."""
    n, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    return np.concatenate([xp[:, i : i + h, j : j + w, :] for i in range(kh) for j in range(kw)], axis=-1)


def _col2im(cols: np.ndarray, kh: int, kw: int, c: int) -> np.ndarray:
    n, h, w, _ = cols.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, h + 2 * ph, w + 2 * pw, c))
    k = 0
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + h, j : j + w, :] += cols[..., k * c : (k + 1) * c]
            k += 1
    return xp[:, ph : ph + h, pw : pw + w, :]


def _conv2d_fwd(arrs, attrs):
    x, w = arrs
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != x.shape[3]:
        raise ShapeError("conv2d", "x (N,H,W,Cin), w (kh,kw,Cin,Cout)", (x.shape, w.shape))
    kh, kw, cin, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", "odd kernel extents", w.shape)
    cols = x if kh == kw == 1 else _im2col(x, kh, kw)
    out = cols.reshape(-1, kh * kw * cin) @ w.reshape(kh * kw * cin, cout)
    return out.reshape(x.shape[:3] + (cout,)), cols


def _conv2d_bwd(g, cols, arrs, attrs):
    x, w = arrs
    kh, kw, cin, cout = w.shape
    g2 = g.reshape(-1, cout)
    gw = (cols.reshape(-1, kh * kw * cin).T @ g2).reshape(w.shape)
    gcols = (g2 @ w.reshape(kh * kw * cin, cout).T).reshape(x.shape[:3] + (kh * kw * cin,))
    gx = gcols if kh == kw == 1 else _col2im(gcols, kh, kw, cin)
    return gx, gw


def _pool_windows(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)


def _max_pool_fwd(arrs, attrs):
    x = arrs[0]
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError("max_pool2d", "(N, even H, even W, C)", x.shape)
    win = _pool_windows(x)
    idx = np.argmax(win, axis=-1)  # first occurrence in row-major window scan
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _max_pool_bwd(g, idx, arrs, attrs):
    n, h, w, c = arrs[0].shape
    win = np.zeros(g.shape + (4,))
    np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
    gx = win.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
    return (gx,)


def _upsample_fwd(arrs, attrs):
    x = arrs[0]
    if x.ndim != 4:
        raise ShapeError("nearest_upsample2d", "(N,H,W,C)", x.shape)
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), None


def _upsample_bwd(g, saved, arrs, attrs):
    n, h, w, c = arrs[0].shape
    return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)


def _concat_fwd(arrs, attrs):
    axis = attrs["axis"]
    ref = arrs[0]
    for a in arrs[1:]:
        if a.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(a.shape, ref.shape)) if i != axis % ref.ndim
        ):
            raise ShapeError("concat", f"shapes equal except axis {axis}", [x.shape for x in arrs])
    return np.concatenate(arrs, axis=axis), None


def _concat_bwd(g, saved, arrs, attrs):
    axis = attrs["axis"]
    cuts = np.cumsum([a.shape[axis] for a in arrs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _softmax_fwd(arrs, attrs):
    x = arrs[0]
    axis = attrs["axis"]
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    return out, out


def _softmax_bwd(g, out, arrs, attrs):
    axis = attrs["axis"]
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


def _layer_norm_fwd(arrs, attrs):
    x = arrs[0]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LAYER_NORM_EPS)
    xhat = xc * inv
    return xhat, (xhat, inv)


def _layer_norm_bwd(g, saved, arrs, attrs):
    xhat, inv = saved
    gx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return (gx,)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _sum_fwd(arrs, attrs):
    axes = _norm_axes(attrs.get("axis"), arrs[0].ndim)
    return arrs[0].sum(axis=axes, keepdims=attrs.get("keepdims", False)), axes


def _sum_bwd(g, axes, arrs, attrs):
    x = arrs[0]
    if not attrs.get("keepdims", False):
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, x.shape).copy(),)


def _mean_fwd(arrs, attrs):
    axes = _norm_axes(attrs.get("axis"), arrs[0].ndim)
    return arrs[0].mean(axis=axes, keepdims=attrs.get("keepdims", False)), axes


def _mean_bwd(g, axes, arrs, attrs):
    x = arrs[0]
    count = int(np.prod([x.shape[a] for a in axes]))
    if not attrs.get("keepdims", False):
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g / count, x.shape).copy(),)


def _broadcast_fwd(arrs, attrs):
    try:
        return np.broadcast_to(arrs[0], attrs["shape"]).copy(), None
    except ValueError:
        raise ShapeError("broadcast", attrs["shape"], arrs[0].shape) from None


def _broadcast_bwd(g, saved, arrs, attrs):
    return (_unbroadcast(g, arrs[0].shape),)


def _reshape_fwd(arrs, attrs):
    try:
        return arrs[0].reshape(attrs["shape"]), None
    except ValueError:
        raise ShapeError("reshape", attrs["shape"], arrs[0].shape) from None


def _reshape_bwd(g, saved, arrs, attrs):
    return (g.reshape(arrs[0].shape),)


def _transpose_fwd(arrs, attrs):
    axes = attrs.get("axes")
    if axes is not None and sorted(a % arrs[0].ndim for a in axes) != list(range(arrs[0].ndim)):
        raise ShapeError("transpose", f"permutation of {arrs[0].ndim} axes", axes)
    return np.transpose(arrs[0], axes), None


def _transpose_bwd(g, saved, arrs, attrs):
    axes = attrs.get("axes")
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort([a % g.ndim for a in axes])),)


def _slice_fwd(arrs, attrs):
    try:
        return arrs[0][attrs["index"]], None
    except IndexError as e:
        raise ShapeError("slice", "index within bounds", (arrs[0].shape, str(e))) from None


def _slice_bwd(g, saved, arrs, attrs):
    gx = np.zeros_like(arrs[0])
    gx[attrs["index"]] = g
    return (gx,)


def _gather_fwd(arrs, attrs):
    try:
        return arrs[0][attrs["index"]], None
    except IndexError as e:
        raise ShapeError("gather", "indices within bounds", (arrs[0].shape, str(e))) from None


def _gather_bwd(g, saved, arrs, attrs):
    gx = np.zeros_like(arrs[0])
    np.add.at(gx, attrs["index"], g)
    return (gx,)


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    backward: Callable
    arity: int | None  # None = variadic


PRIMITIVES: dict[str, Primitive] = {
    "add": Primitive(_add_fwd, _add_bwd, 2),
    "sub": Primitive(_sub_fwd, _sub_bwd, 2),
    "mul": Primitive(_mul_fwd, _mul_bwd, 2),
    "div": Primitive(_div_fwd, _div_bwd, 2),
    "neg": Primitive(_neg_fwd, _neg_bwd, 1),
    "pow": Primitive(_pow_fwd, _pow_bwd, 1),
    "square": Primitive(_square_fwd, _square_bwd, 1),
    "sqrt": Primitive(_sqrt_fwd, _sqrt_bwd, 1),
    "exp": Primitive(_exp_fwd, _exp_bwd, 1),
    "log": Primitive(_log_fwd, _log_bwd, 1),
    "sigmoid": Primitive(_sigmoid_fwd, _sigmoid_bwd, 1),
    "tanh": Primitive(_tanh_fwd, _tanh_bwd, 1),
    "relu": Primitive(_relu_fwd, _relu_bwd, 1),
    "leaky_relu": Primitive(_leaky_relu_fwd, _leaky_relu_bwd, 1),
    "clip": Primitive(_clip_fwd, _clip_bwd, 1),
    "matmul": Primitive(_matmul_fwd, _matmul_bwd, 2),
    "conv2d": Primitive(_conv2d_fwd, _conv2d_bwd, 2),
    "max_pool2d": Primitive(_max_pool_fwd, _max_pool_bwd, 1),
    "nearest_upsample2d": Primitive(_upsample_fwd, _upsample_bwd, 1),
    "concat": Primitive(_concat_fwd, _concat_bwd, None),
    "softmax": Primitive(_softmax_fwd, _softmax_bwd, 1),
    "layer_norm": Primitive(_layer_norm_fwd, _layer_norm_bwd, 1),
    "sum": Primitive(_sum_fwd, _sum_bwd, 1),
    "mean": Primitive(_mean_fwd, _mean_bwd, 1),
    "broadcast": Primitive(_broadcast_fwd, _broadcast_bwd, 1),
    "reshape": Primitive(_reshape_fwd, _reshape_bwd, 1),
    "transpose": Primitive(_transpose_fwd, _transpose_bwd, 1),
    "slice": Primitive(_slice_fwd, _slice_bwd, 1),
    "gather": Primitive(_gather_fwd, _gather_bwd, 1),
}


def apply_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Run primitive ``kind`` on ``inputs`` and record it on the active tape.

    Pass ``check_finite=True`` to raise :class:`NonFiniteError` when the
    output contains NaN or infinity.
    """
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    tensors = tuple(as_tensor(t) for t in inputs)
    if prim.arity is not None and len(tensors) != prim.arity:
        raise ShapeError(kind, f"{prim.arity} inputs", len(tensors))
    check_finite = attrs.pop("check_finite", False)
    arrs = tuple(t.data for t in tensors)
    out_data, saved = prim.forward(arrs, attrs)
    if check_finite and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{kind} produced non-finite output")
    needs_grad = any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=needs_grad, _owned=True)
    if needs_grad:
        tape = current_tape()
        if tape.consumed:
            raise TapeError("cannot record on a consumed tape")
        for t in tensors:
            if t._tape is not None and t._tape is not tape:
                raise TapeError("inputs were recorded on a different tape")
        out._tape = tape
        out._node = len(tape.nodes)
        tape.nodes.append(Node(kind, tensors, out._uid, out.shape, saved, attrs))
    return out


def backward(root: Tensor, tape: Tape | None = None) -> Gradients:
    """Gradients of scalar ``root`` for every requires-grad leaf on ``tape``.

    Leaves recorded on the tape but unreachable from ``root`` receive zeros.
    """
    if root.data.size != 1:
        raise ShapeError("backward", "scalar root", root.shape)
    if tape is None:
        tape = root._tape
    if tape is None or root._tape is not tape:
        raise TapeError("root is not on the given tape")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {root._uid: np.ones(root.shape)}
    for node in reversed(tape.nodes[: root._node + 1]):
        g = grads.pop(node.out_uid, None)
        if g is None:
            continue
        in_grads = PRIMITIVES[node.kind].backward(g, node.saved, tuple(t.data for t in node.inputs), node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t._uid)
            grads[t._uid] = gi if prev is None else prev + gi

    result = Gradients()
    for leaf in tape.leaves():
        result[leaf] = grads.get(leaf._uid, np.zeros(leaf.shape))
    tape.nodes = []  # release saved activations
    return result


# ---------------------------------------------------------------------------
# functional front-end
# ---------------------------------------------------------------------------


def add(a, b):
    return apply_primitive("add", (a, b))


def sub(a, b):
    return apply_primitive("sub", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def div(a, b):
    return apply_primitive("div", (a, b))


def neg(a):
    return apply_primitive("neg", (a,))


def power(a, exponent: float):
    return apply_primitive("pow", (a,), exponent=float(exponent))


def square(a):
    return apply_primitive("square", (a,))


def sqrt(a):
    return apply_primitive("sqrt", (a,))


def exp(a):
    return apply_primitive("exp", (a,))


def log(a):
    return apply_primitive("log", (a,))


def sigmoid(a):
    return apply_primitive("sigmoid", (a,))


def tanh(a):
    return apply_primitive("tanh", (a,))


def relu(a):
    return apply_primitive("relu", (a,))


def leaky_relu(a, slope: float = 0.2):
    return apply_primitive("leaky_relu", (a,), slope=slope)


def clip(a, min=None, max=None):
    return apply_primitive("clip", (a,), min=min, max=max)


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def conv2d(x, w):
    """Stride-1, zero-filled same-padding convolution; x (N,H,W,Cin), w (kh,kw,Cin,Cout)."""
    return apply_primitive("conv2d", (x, w))


def max_pool2d(x):
    return apply_primitive("max_pool2d", (x,))


def upsample2d(x):
    return apply_primitive("nearest_upsample2d", (x,))


def concat(tensors, axis: int = -1):
    return apply_primitive("concat", tuple(tensors), axis=axis)


def stack(tensors, axis: int = 0):
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


def softmax(a, axis: int = -1):
    return apply_primitive("softmax", (a,), axis=axis)


def layer_norm(a):
    return apply_primitive("layer_norm", (a,))


def sum_(a, axis=None, keepdims: bool = False):
    return apply_primitive("sum", (a,), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False):
    return apply_primitive("mean", (a,), axis=axis, keepdims=keepdims)


def broadcast(a, shape):
    return apply_primitive("broadcast", (a,), shape=tuple(shape))


def reshape(a, shape):
    return apply_primitive("reshape", (a,), shape=tuple(shape))


def transpose(a, axes=None):
    return apply_primitive("transpose", (a,), axes=None if axes is None else tuple(axes))


def slice_(a, index):
    return apply_primitive("slice", (a,), index=index)


def gather(a, index):
    return apply_primitive("gather", (a,), index=index)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    eps: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``point`` to central differences.

    The per-entry error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    entries whose true gradient is zero from dividing by rounding noise.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        y = f(x)
    analytic = backward(y, tape)[x] if y._tape is tape else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite near entry {i}")
        flat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
    return GradCheckReport(err, analytic, numeric, tol)

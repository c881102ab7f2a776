"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Ops run eagerly on numpy arrays.  While a :class:`Tape` is active, every op
whose inputs require gradients appends a node holding a backward closure;
:func:`backward` walks the nodes in reverse recording order.  Without an
active tape nothing is recorded, which is how inference runs.

Images use the ``(N, C, H, W)`` layout throughout.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = [np.float32]
_TAPE: list["Tape"] = []
_DEBUG = [False]


class NonFiniteError(FloatingPointError):
    pass


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors in ``dtype`` inside the block (64-bit for grad checks)."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf."""
    _DEBUG[0] = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or default_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)
    size = property(lambda self: self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype.name})"

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
        if isinstance(other, Tensor):
            raise TypeError("only division by a constant is supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Parameter(Tensor):
    """Learnable tensor with gradient and optimizer moment buffers."""

    __slots__ = ("moment1", "moment2")

    def __init__(self, data, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)
        self.grad = np.zeros_like(self.data)
        self.moment1 = np.zeros_like(self.data)
        self.moment2 = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype) -> None:
        for attr in ("data", "grad", "moment1", "moment2"):
            setattr(self, attr, getattr(self, attr).astype(dtype))


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records differentiable ops in execution (hence topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPE.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE.remove(self)

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] = ()):
        return backward(self, loss, wrt)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def _finish(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    if _DEBUG[0] and not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    res = Tensor(out, requires_grad=needs, dtype=out.dtype.type)
    if needs and _TAPE:
        _TAPE[-1].nodes.append(Node(op, inputs, res, grad_fn))
    return res


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] = ()) -> list[np.ndarray | None]:
    """Accumulate d(loss)/d(param) into ``.grad`` of every Parameter on the tape.

    Gradients of the non-parameter tensors in ``wrt`` are returned instead of
    being stored; other leaves are left untouched.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = [grads.get(id(t)) for t in wrt]
    # a parameter feeding several nodes had its contributions summed above
    for node in tape.nodes:
        for t in node.inputs:
            if isinstance(t, Parameter) and id(t) in grads:
                t.grad += grads.pop(id(t))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _finish("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _finish("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _finish(
        "mul", ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


hadamard = mul


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _finish("relu", x.data * pos, (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _finish("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _finish("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; with ``floor > 0`` inputs are clamped below (zero gradient there)."""
    d = x.data
    if floor > 0:
        keep = d > floor
        safe = np.where(keep, d, floor)
        return _finish("log", np.log(safe), (x,), lambda g: (np.where(keep, g / safe, 0).astype(d.dtype),))
    return _finish("log", np.log(d), (x,), lambda g: (g / d,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _finish("exp", y, (x,), lambda g: (g * y,))


# -------------------------------------------------------------- reductions, shapes


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else math.prod(x.shape[a] for a in np.atleast_1d(axis))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice) indexing."""
    shape, dtype = x.shape, x.dtype

    def grad(g):
        out = np.zeros(shape, dtype=dtype)
        out[key] = g
        return (out,)

    return _finish("getitem", np.ascontiguousarray(x.data[key]), (x,), grad)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _finish("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def grad(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(lo, hi), axis=axis)) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _finish("concat", np.concatenate([x.data for x in xs], axis=axis), xs, grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def grad(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _finish("matmul", np.matmul(ad, bd), (a, b), grad)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _finish("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


# -------------------------------------------------------------- convolution


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation; ``w`` is ``(C_out, C_in, kH, kW)``."""
    xd, wd = x.data, w.data
    n, c, h, wid = xd.shape
    o, ci, kh, kw = wd.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {ci}")
    hp, wp = h + 2 * pad, wid + 2 * pad
    if kh > hp or kw > wp:
        raise ValueError("conv2d: kernel larger than padded input")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = _pad(xd, pad)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    w2 = wd.reshape(o, -1)
    y = np.matmul(w2, cols).reshape(n, o, ho, wo)
    inputs = (x, w)
    if b is not None:
        y += b.data.reshape(1, o, 1, 1)
        inputs = (x, w, b)

    def grad(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(wd.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros((n, c, hp, wp), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + wid] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _finish("conv2d", y, inputs, grad)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``w`` is ``(C_in, C_out, kH, kW)``.

    Output extent is ``(H - 1) * stride - 2 * pad + kH``.
    """
    xd, wd = x.data, w.data
    n, c, h, wid = xd.shape
    ci, o, kh, kw = wd.shape
    if ci != c:
        raise ValueError(f"conv_transpose2d: input has {c} channels, kernel expects {ci}")
    hf, wf = (h - 1) * stride + kh, (wid - 1) * stride + kw
    ho, wo = hf - 2 * pad, wf - 2 * pad
    if ho <= 0 or wo <= 0:
        raise ValueError("conv_transpose2d: padding removes the whole output")
    x2 = xd.reshape(n, c, h * wid)
    w2 = wd.reshape(c, o * kh * kw)
    cols = np.matmul(w2.T, x2).reshape(n, o, kh, kw, h, wid)
    full = np.zeros((n, o, hf, wf), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + stride * h : stride, j : j + stride * wid : stride] += cols[:, :, i, j]
    y = np.ascontiguousarray(full[:, :, pad : pad + ho, pad : pad + wo])
    inputs = (x, w)
    if b is not None:
        y += b.data.reshape(1, o, 1, 1)
        inputs = (x, w, b)

    def grad(g):
        gfull = np.zeros((n, o, hf, wf), dtype=xd.dtype)
        gfull[:, :, pad : pad + ho, pad : pad + wo] = g
        gcols = np.empty((n, o, kh, kw, h, wid), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, i, j] = gfull[:, :, i : i + stride * h : stride, j : j + stride * wid : stride]
        gcols = gcols.reshape(n, o * kh * kw, h * wid)
        gx = np.matmul(w2, gcols).reshape(xd.shape) if x.requires_grad else None
        gw = np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(wd.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _finish("conv_transpose2d", y, inputs, grad)


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    y = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def grad(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _finish("upsample_nearest2d", y, (x,), grad)


# -------------------------------------------------------------- normalization

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance); eval mode uses the buffers.
    """
    xd = x.data
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: {c} channels but affine params of shape {gamma.shape}")
    axes = (0, 2, 3)
    shape = (1, c, 1, 1)
    gd = gamma.data.reshape(shape)
    if training:
        m = xd.size // c
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu) * inv
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(c) * (m / max(m - 1, 1))

        def grad(g):
            dxhat = g * gd
            gx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            return gx.astype(xd.dtype), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        inv = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
        xhat = (xd - running_mean.reshape(shape)) * inv

        def grad(g):
            return (g * gd * inv).astype(xd.dtype), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    y = (gd * xhat + beta.data.reshape(shape)).astype(xd.dtype)
    return _finish("batchnorm2d", y, (x, gamma, beta), grad)


# -------------------------------------------------------------- gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-3,
    n_samples: int | None = None,
    rng: np.random.Generator | None = None,
    atol: float = 1e-6,
    analytic: dict[int, np.ndarray] | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` must be deterministic and build its graph from ``params`` (which may
    include plain tensors flagged ``requires_grad``).  When ``n_samples`` is
    given, that many elements are checked per tensor, otherwise all of them.
    The relative error is ``|a - n| / max(|a|, |n|, atol)``.  ``analytic``
    lets callers substitute gradients (used to test the checker itself).
    """
    params = list(params)
    rng = rng or np.random.default_rng(0)
    for p in params:
        if isinstance(p, Parameter):
            p.zero_grad()
    with Tape() as tape:
        loss = f()
    extra = [p for p in params if not isinstance(p, Parameter)]
    extra_grads = dict(zip(map(id, extra), backward(tape, loss, extra)))
    worst = 0.0
    for p in params:
        if analytic is not None and id(p) in analytic:
            ga = analytic[id(p)]
        elif isinstance(p, Parameter):
            ga = p.grad
        else:
            ga = extra_grads[id(p)]
        if ga is None:
            ga = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if n_samples is not None and n_samples < flat.size:
            idx = rng.choice(flat.size, size=n_samples, replace=False)
        for k in idx:
            old = flat[k]
            flat[k] = old + eps
            fp = f().item()
            flat[k] = old - eps
            fm = f().item()
            flat[k] = old
            num = (fp - fm) / (2 * eps)
            ana = float(ga.reshape(-1)[k])
            err = abs(ana - num) / max(abs(ana), abs(num), atol)
            worst = max(worst, err)
    return worst

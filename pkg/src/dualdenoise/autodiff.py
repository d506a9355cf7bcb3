"""Reverse-mode automatic differentiation over numpy arrays.

A small tape machine: forward ops compute with numpy and, while a Tape is
active, append (output, inputs, backward-rule) nodes in execution order.
``backward`` replays the node list once, in reverse, accumulating vector-
Jacobian products into ``Tensor.grad``.

Two global precision modes exist.  ``test`` (the default) computes in
float64 and raises ``DomainError`` when log/sqrt/div leave their valid
domains; ``train`` computes in float32 and clamps those inputs away from
the singularity by ``EPS`` instead, trading exactness for robustness
inside optimization loops.

Broadcasting follows numpy's trailing-dimension rules; gradients of
broadcast operands are summed back onto the original shape.  Ops never
mutate their inputs, so a tensor can feed any number of downstream nodes.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, EvaluationError, ParameterError

EPS = 1e-12  # train-mode guard for log/sqrt/div singularities

_MODES = ("test", "train")
_mode = "test"


def set_mode(mode: str) -> None:
    """Switch the global precision/guard mode ('test' or 'train')."""
    global _mode
    if mode not in _MODES:
        raise ParameterError(f"unknown mode {mode!r}; expected one of {_MODES}")
    _mode = mode


def get_mode() -> str:
    return _mode


@contextmanager
def using_mode(mode: str):
    prev = _mode
    set_mode(mode)
    try:
        yield
    finally:
        set_mode(prev)


def default_dtype():
    return np.float64 if _mode == "test" else np.float32


def _strict() -> bool:
    return _mode == "test"


# ---------------------------------------------------------------------------
# Tensor and tape

_next_id = 0


class Tensor:
    """A numpy array plus gradient bookkeeping.

    ``requires_grad`` marks tensors whose gradient should be accumulated;
    it is set explicitly for parameters and inherited by op outputs while a
    tape is recording.  Constants never receive a ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        global _next_id
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = _next_id
        _next_id += 1
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; all routed through the module-level primitives
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return mul(self, -1.0)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def param(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or default_dtype()), requires_grad=requires_grad)


class Tape:
    """Ordered record of ops for one reverse sweep.

    Use as a context manager around the forward computation.  Nodes are
    appended in execution order, which is a valid topological order because
    every op's inputs already exist when it runs.
    """

    def __init__(self):
        self.nodes = []  # (out_tensor, input_tensors, backward_fn)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


_tape_stack: list = []


def _active_tape():
    if _tape_stack and _tape_stack[-1] is not None:
        return _tape_stack[-1]
    return None


@contextmanager
def pause_recording():
    """Evaluate without recording, even inside an active tape."""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce binary operands; bare scalars adopt the Tensor operand's dtype
    so mixing python floats into a float32 graph does not promote it."""
    ref = a if isinstance(a, Tensor) else (b if isinstance(b, Tensor) else None)
    return _as_tensor(a, like=ref), _as_tensor(b, like=ref)


def _record(out: Tensor, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    out._tape = tape
    tape.nodes.append((out, tuple(inputs), bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast when producing it."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise primitives


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if _strict():
        if np.any(bd == 0):
            raise DomainError("division by zero in strict mode")
        bsafe = bd
    else:
        eps = np.asarray(EPS, dtype=bd.dtype)
        bsafe = np.where(np.abs(bd) < eps, np.where(bd < 0, -eps, eps), bd)
    out = Tensor(ad / bsafe)

    def bwd(g):
        ga = g / bsafe
        gb = -g * ad / (bsafe * bsafe)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(out, (a, b), bwd)


def power(a, b) -> Tensor:
    """Elementwise a**b.  The exponent may be a scalar or a Tensor."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    frac = not np.all(bd == np.round(bd))
    if frac:
        if _strict():
            if np.any(ad < 0):
                raise DomainError("negative base with fractional exponent")
            abase = ad
        else:
            abase = np.maximum(ad, EPS)
    else:
        abase = ad
    out_data = np.power(abase, bd)
    out = Tensor(out_data)

    def bwd(g):
        ga = g * bd * np.power(abase, bd - 1.0)
        if b.requires_grad:
            if _strict() and np.any(abase <= 0):
                raise DomainError("log of non-positive base in power gradient")
            gb = g * out_data * np.log(np.maximum(abase, EPS))
        else:
            gb = None
        return _unbroadcast(ga, ad.shape), None if gb is None else _unbroadcast(gb, bd.shape)

    return _record(out, (a, b), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    out = Tensor(out_data)

    def bwd(g):
        return (g * out_data,)

    return _record(out, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    if _strict():
        if np.any(ad <= 0):
            raise DomainError("log of non-positive input in strict mode")
        safe = ad
    else:
        safe = np.maximum(ad, EPS)
    out = Tensor(np.log(safe))

    def bwd(g):
        if _strict():
            return (g / safe,)
        return (g * (ad >= EPS) / safe,)

    return _record(out, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    if _strict():
        if np.any(ad < 0):
            raise DomainError("sqrt of negative input in strict mode")
        safe = ad
    else:
        safe = np.maximum(ad, EPS)
    root = np.sqrt(safe)
    out = Tensor(root)

    def bwd(g):
        if _strict():
            return (g / (2.0 * root),)
        return (g * (ad >= EPS) / (2.0 * root),)

    return _record(out, (a,), bwd)


def maximum(a, b) -> Tensor:
    """Elementwise max; at ties the gradient routes to the first operand."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    take_a = ad >= bd
    out = Tensor(np.where(take_a, ad, bd))

    def bwd(g):
        return _unbroadcast(g * take_a, ad.shape), _unbroadcast(g * ~take_a, bd.shape)

    return _record(out, (a, b), bwd)


def minimum(a, b) -> Tensor:
    """Elementwise min; at ties the gradient routes to the first operand."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    take_a = ad <= bd
    out = Tensor(np.where(take_a, ad, bd))

    def bwd(g):
        return _unbroadcast(g * take_a, ad.shape), _unbroadcast(g * ~take_a, bd.shape)

    return _record(out, (a, b), bwd)


def absval(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = Tensor(np.abs(ad))
    sign = np.sign(ad)

    def bwd(g):
        return (g * sign,)

    return _record(out, (a,), bwd)


def clamp01(a) -> Tensor:
    """Clip to [0, 1].

    The gradient passes through wherever the input lies inside the interval,
    including values exactly at 0 or 1, and is zero strictly outside.  The
    boundary pass-through keeps pixels parked on the clip rails trainable.
    """
    a = _as_tensor(a)
    ad = a.data
    out = Tensor(np.clip(ad, 0.0, 1.0))
    inside = (ad >= 0.0) & (ad <= 1.0)

    def bwd(g):
        return (g * inside,)

    return _record(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    z = np.exp(-np.abs(ad))
    s = np.where(ad >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = Tensor(s)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _record(out, (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    pos = ad > 0
    out = Tensor(np.where(pos, ad, 0.0))

    def bwd(g):
        return (g * pos,)

    return _record(out, (a,), bwd)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    pos = ad > 0
    out = Tensor(np.where(pos, ad, slope * ad))
    factor = np.where(pos, np.asarray(1.0, ad.dtype), np.asarray(slope, ad.dtype))

    def bwd(g):
        return (g * factor,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Structured ops


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    datas = [t.data for t in ts]
    out = Tensor(np.concatenate(datas, axis=axis))
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return _record(out, ts, bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    if start < 0 or start + length > ad.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of size {ad.shape[axis]}"
        )
    index = [slice(None)] * ad.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(ad[index])

    def bwd(g):
        full = np.zeros_like(ad)
        full[index] = g
        return (full,)

    return _record(out, (a,), bwd)


def conv2d(x, w, b=None, stride: int = 1, pad: int | None = None) -> Tensor:
    """2-D cross-correlation on NCHW input with an OCkk weight stack.

    Zero padding; ``pad=None`` means same-size output, which requires an odd
    kernel.  Only stride 1 is supported.
    """
    x = _as_tensor(x)
    w = _as_tensor(w)
    if stride != 1:
        raise ParameterError("conv2d supports stride=1 only")
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {xd.shape} and {wd.shape}")
    n, c, h, width = xd.shape
    o, cw, kh, kw = wd.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if kh != kw:
        raise DimensionError(f"conv2d requires square kernels, got {kh}x{kw}")
    k = kh
    if pad is None:
        if k % 2 == 0:
            raise DimensionError("same-size conv2d requires an odd kernel")
        pad = (k - 1) // 2
    if h + 2 * pad < k or width + 2 * pad < k:
        raise DimensionError("conv2d input smaller than kernel")
    bt = None
    if b is not None:
        bt = _as_tensor(b, like=x)
        if bt.data.shape != (o,):
            raise DimensionError(f"conv2d bias must have shape ({o},), got {bt.data.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    oh, ow = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    # tap-accumulation form: for each of the k*k kernel offsets one slim GEMM
    # against an NHWC view of the input.  Avoids materialising the k*k-fold
    # patch matrix entirely; the NHWC copy is cached and reused backward.
    xl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # (N,H,W,C)
    wtaps = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))  # (k,k,O,C)
    acc = np.zeros((n, oh, ow, o), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            acc += xl[:, i:i + oh, j:j + ow, :] @ wtaps[i, j].T
    out_data = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if bt is not None:
        out_data += bt.data[None, :, None, None]
    out = Tensor(out_data)

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = np.empty((k, k, o, c), dtype=wd.dtype)
        gxl = np.zeros_like(xl)
        for i in range(k):
            for j in range(k):
                xs = xl[:, i:i + oh, j:j + ow, :].reshape(-1, c)
                gw[i, j] = gmat.T @ xs
                gxl[:, i:i + oh, j:j + ow, :] += (gmat @ wtaps[i, j]).reshape(n, oh, ow, c)
        gx = gxl.transpose(0, 3, 1, 2)
        if pad:
            gx = gx[:, :, pad:pad + h, pad:pad + width]
        gwk = np.ascontiguousarray(gw.transpose(2, 3, 0, 1))
        gb = g.sum(axis=(0, 2, 3)) if bt is not None else None
        if bt is not None:
            return gx, gwk, gb
        return gx, gwk

    inputs = (x, w) if bt is None else (x, w, bt)
    return _record(out, inputs, bwd)


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    """(N,C,H,W) -> (N*oh*ow, C*k*k) patch matrix for valid correlation."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    n, c, oh, ow = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * oh * ow, c * k * k)


def _corr2d(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation core: (N,C,H,W) x (O,C,k,k) -> (N,O,H',W')."""
    k = w.shape[2]
    n = xp.shape[0]
    o = w.shape[0]
    cols = _im2col(xp, k)
    oh, ow = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    out = (cols @ w.reshape(o, -1).T).reshape(n, oh, ow, o)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def pad_reflect(x, pad: int) -> Tensor:
    """Reflect-pad the two trailing spatial axes (edge excluded).

    Odd reflection preserves Bayer site parity for any pad width, so mosaic
    phase survives the border treatment.
    """
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"pad_reflect expects NCHW input, got shape {xd.shape}")
    if pad == 0:
        return x
    n, c, h, w = xd.shape
    if pad >= h or pad >= w:
        raise DimensionError(f"reflect pad {pad} too large for spatial size {h}x{w}")
    out = Tensor(np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect"))
    my = _reflect_index(h, pad)
    mx = _reflect_index(w, pad)

    def bwd(g):
        gx = np.zeros_like(xd)
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (ni, ci, my[None, None, :, None], mx[None, None, None, :]), g)
        return (gx,)

    return _record(out, (x,), bwd)


def _reflect_index(size: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, size + pad)
    idx = np.abs(idx)
    idx = np.where(idx >= size, 2 * (size - 1) - idx, idx)
    return idx


def pixel_unshuffle(x, r: int = 2) -> Tensor:
    """Fold each r x r spatial block into r*r channels (row-major block order)."""
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"pixel_unshuffle expects NCHW input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    if h % r or w % r:
        raise DimensionError(f"spatial size {h}x{w} not divisible by block size {r}")
    out = Tensor(_unshuffle_data(xd, r))

    def bwd(g):
        return (_shuffle_data(g, r),)

    return _record(out, (x,), bwd)


def pixel_shuffle(x, r: int = 2) -> Tensor:
    """Spread groups of r*r channels back onto r x r spatial blocks."""
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"pixel_shuffle expects NCHW input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    if c % (r * r):
        raise DimensionError(f"channel count {c} not divisible by r*r={r * r}")
    out = Tensor(_shuffle_data(xd, r))

    def bwd(g):
        return (_unshuffle_data(g, r),)

    return _record(out, (x,), bwd)


def _unshuffle_data(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    a = a.reshape(n, c, h // r, r, w // r, r)
    a = a.transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(a).reshape(n, c * r * r, h // r, w // r)


def _shuffle_data(a: np.ndarray, r: int) -> np.ndarray:
    n, cr2, h, w = a.shape
    c = cr2 // (r * r)
    a = a.reshape(n, c, r, r, h, w)
    a = a.transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(a).reshape(n, c, h * r, w * r)


# ---------------------------------------------------------------------------
# Reductions


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = Tensor(np.sum(ad))

    def bwd(g):
        return (np.full(ad.shape, float(g), dtype=ad.dtype),)

    return _record(out, (a,), bwd)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = Tensor(np.mean(ad))
    scale = 1.0 / ad.size

    def bwd(g):
        return (np.full(ad.shape, float(g) * scale, dtype=ad.dtype),)

    return _record(out, (a,), bwd)


def reduce_mean_abs(a, b) -> Tensor:
    """Mean absolute difference, the L1 building block of the loss."""
    return mean_all(absval(sub(a, b)))


# ---------------------------------------------------------------------------
# Backward sweep


def backward(loss: Tensor, seed=None) -> None:
    """Accumulate d(loss)/d(tensor) into ``grad`` for every tensor that
    requires grad and is reachable from ``loss``.

    Repeated calls keep accumulating; callers reset grads between steps.
    """
    if not isinstance(loss, Tensor):
        raise DimensionError("backward expects a Tensor")
    if loss.data.size != 1:
        raise DimensionError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    seed_grad = np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=loss.data.dtype)
    flow: dict[int, np.ndarray] = {id(loss): seed_grad}
    holders: dict[int, Tensor] = {id(loss): loss}
    tape = loss._tape
    nodes = tape.nodes if tape is not None else []
    for out, inputs, bwd in reversed(nodes):
        g = flow.pop(id(out), None)
        if g is None:
            continue
        holder = holders.pop(id(out))
        if holder.requires_grad:
            holder.grad = g.copy() if holder.grad is None else holder.grad + g
        grads = bwd(g)
        for t, gi in zip(inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in flow:
                flow[key] = flow[key] + gi
            else:
                flow[key] = gi
                holders[key] = t
    for key, g in flow.items():
        t = holders[key]
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# Finite-difference verification


def gradcheck(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Compare the tape gradient of scalar-valued ``f`` against central
    finite differences, elementwise, at 64-bit precision.

    Returns the max relative error with denominator max(|grad|, 1e-8).
    Non-finite values anywhere raise ``EvaluationError``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with using_mode("test"):
        xt = Tensor(x0.copy(), requires_grad=True)
        with Tape():
            out = f(xt)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise DimensionError("gradcheck requires a scalar-valued function")
        if not np.isfinite(out.data).all():
            raise EvaluationError("non-finite function value in gradcheck")
        backward(out)
        ad = np.zeros_like(x0) if xt.grad is None else np.asarray(xt.grad, dtype=np.float64)
        if not np.isfinite(ad).all():
            raise EvaluationError("non-finite autodiff gradient in gradcheck")

        fd = np.empty_like(x0)
        flat = fd.reshape(-1)
        base = x0.reshape(-1)
        with pause_recording():
            for i in range(base.size):
                xp = base.copy()
                xp[i] += eps
                fp = float(f(Tensor(xp.reshape(x0.shape))).data)
                xm = base.copy()
                xm[i] -= eps
                fm = float(f(Tensor(xm.reshape(x0.shape))).data)
                flat[i] = (fp - fm) / (2.0 * eps)
        if not np.isfinite(fd).all():
            raise EvaluationError("non-finite finite-difference value in gradcheck")
    denom = np.maximum(np.abs(ad), 1e-8)
    return float(np.max(np.abs(fd - ad) / denom))

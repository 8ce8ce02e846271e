"""Dense tensors and the neural-net primitives, with recorded backward rules.

Feature tensors use (depth, height, width, channels) axis order; most
operations also accept a leading batch axis.  Every operation computes its
result eagerly with numpy and, while a :class:`Tape` is active, appends a
record carrying the inputs and a vector-Jacobian closure, so a scalar loss
can later be differentiated in a single reverse sweep.

Precision follows the operand dtype: float32 for training, float64 for
verification (gradient checks).  No operation silently promotes.
"""
from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    return stack


def active_tape():
    """The innermost recording tape of this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Execution-ordered record of differentiable operations.

    Entering the tape turns recording on for the current thread.  The record
    order is a topological order of the data flow (define-by-run), so the
    backward pass is one reverse sweep that visits each record exactly once.
    A tape must be recorded and replayed on a single thread.
    """

    def __init__(self):
        self.records: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into the .grad of every leaf on the path.

        ``loss`` must be a scalar produced by operations recorded on this
        tape.  Leaves (tensors not produced by a recorded op) get their
        ``grad`` buffer created on demand and summed into; intermediate
        gradients are kept in a scratch table and discarded.
        """
        if loss.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss._vjp is None:
            _leaf_accumulate(loss, grads[id(loss)])
            return
        for rec in reversed(self.records):
            g = grads.pop(id(rec), None)
            if g is None:
                continue
            for parent, pg in zip(rec._parents, rec._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._vjp is None:
                    _leaf_accumulate(parent, pg)
                else:
                    key = id(parent)
                    held = grads.get(key)
                    grads[key] = pg if held is None else held + pg


def _leaf_accumulate(t: "Tensor", g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._vjp = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor) or isinstance(other, np.ndarray):
            raise TypeError("only division by a python scalar is supported")
        return mul(self, as_tensor(1.0 / other, self.dtype))

    def __neg__(self):
        return neg(self)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap ``x`` as a constant Tensor (no-op when already a Tensor)."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype and arr.dtype.kind in "fiub":
        arr = arr.astype(dtype)
    return Tensor(arr)


def _record(data: np.ndarray, parents: tuple, vjp) -> Tensor:
    tape = active_tape()
    need = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=need)
    if need:
        out._parents = parents
        out._vjp = vjp
        tape.records.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
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
# elementwise and structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def vjp(g):
        return (g * inside,)

    return _record(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), vjp)


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    negm = x < 0
    out = x.copy()
    out[negm] = alpha * np.expm1(x[negm])

    def vjp(g):
        dx = g.copy()
        dx[negm] *= out[negm] + alpha
        return (dx,)

    return _record(out, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum()

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape),)

    return _record(out, (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    return sum_all(a) * (1.0 / a.data.size)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _record(out, (a,), vjp)


def swap_last_axes(a: Tensor) -> Tensor:
    """Transpose the trailing two axes (matrix transpose, batched or not)."""
    if a.ndim < 2:
        raise ShapeError("swap_last_axes needs at least 2 dimensions")
    out = np.swapaxes(a.data, -1, -2)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _record(out, (a,), vjp)


def concat(tensors: list, axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    split_at = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, split_at, axis=axis))

    return _record(out, tuple(tensors), vjp)


def channel(a: Tensor, idx: int) -> Tensor:
    """Select one channel from the trailing axis, dropping that axis."""
    out = np.ascontiguousarray(a.data[..., idx])

    def vjp(g):
        dx = np.zeros_like(a.data)
        dx[..., idx] = g
        return (dx,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, accepting stacked (batched) leading axes on either side."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} x {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        da = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        db = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return da, db

    return _record(out, (a, b), vjp)


def matricize_mode4(t: Tensor) -> Tensor:
    """Unfold a (d,h,w,c) tensor into a (c, d*h*w) matrix.

    Column j is the channel vector of voxel j, voxels enumerated over
    (d,h,w) in row-major order.  Exact inverse: :func:`dematricize_mode4`.
    """
    if t.ndim != 4:
        raise ShapeError(f"matricize_mode4 needs a rank-4 tensor, got rank {t.ndim}")
    d, h, w, c = t.data.shape
    out = np.ascontiguousarray(t.data.reshape(d * h * w, c).T)

    def vjp(g):
        return (g.T.reshape(d, h, w, c),)

    return _record(out, (t,), vjp)


def dematricize_mode4(m: Tensor, spatial_shape) -> Tensor:
    """Fold a (c, s) matrix back into a (d,h,w,c) tensor; s must equal d*h*w."""
    if m.ndim != 2:
        raise ShapeError(f"dematricize_mode4 needs a matrix, got rank {m.ndim}")
    d, h, w = spatial_shape
    c, s = m.data.shape
    if s != d * h * w:
        raise ShapeError(f"cannot fold {s} voxel columns into spatial shape {tuple(spatial_shape)}")
    out = np.ascontiguousarray(m.data.T.reshape(d, h, w, c))

    def vjp(g):
        return (np.ascontiguousarray(g.reshape(s, c).T),)

    return _record(out, (m,), vjp)


def _softmax(a: Tensor, axis: int) -> Tensor:
    # written with in-place chains: the attention matrices this runs on are
    # the largest arrays in the whole network
    x = a.data
    out = np.subtract(x, x.max(axis=axis, keepdims=True))
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def vjp(g):
        if axis == -2 and out.ndim >= 2:
            inner = np.einsum("...ij,...ij->...j", out, g)[..., None, :]
        else:
            inner = (out * g).sum(axis=axis, keepdims=True)
        dx = np.subtract(g, inner)
        dx *= out
        return (dx,)

    return _record(out, (a,), vjp)


def softmax_columns(m: Tensor) -> Tensor:
    """Column-wise softmax: each column of the trailing matrix sums to 1."""
    if m.ndim < 2:
        raise ShapeError("softmax_columns needs at least a matrix")
    return _softmax(m, axis=-2)


def softmax_vector(v: Tensor) -> Tensor:
    if v.ndim != 1:
        raise ShapeError(f"softmax_vector needs a vector, got rank {v.ndim}")
    return _softmax(v, axis=0)


# ---------------------------------------------------------------------------
# 3-D convolution / pooling / resampling


def _to_batched(x: Tensor):
    if x.ndim == 4:
        return x.data[None], False
    if x.ndim == 5:
        return x.data, True
    raise ShapeError(f"expected a (d,h,w,c) or (b,d,h,w,c) tensor, got rank {x.ndim}")


def _conv3d_raw(xb: np.ndarray, kernel: np.ndarray, stride, padding) -> np.ndarray:
    """Cross-correlation on a batched (b,D,H,W,Ci) array. Returns (b,Do,Ho,Wo,Co)."""
    kd, kh, kw, ci, co = kernel.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    if (pd, ph, pw) != (0, 0, 0):
        xb = np.pad(xb, ((0, 0), (pd, pd), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xb, (kd, kh, kw), axis=(1, 2, 3))
    win = win[:, ::sd, ::sh, ::sw]
    b, do, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4))
    cols = cols.reshape(b * do * ho * wo, kd * kh * kw * ci)
    y = cols @ kernel.reshape(kd * kh * kw * ci, co)
    return y.reshape(b, do, ho, wo, co), cols


def _out_extent(n, k, s, p, axis_name):
    span = n + 2 * p - k
    if span < 0 or span % s != 0:
        raise ShapeError(
            f"conv3d output extent along {axis_name} is not a positive integer "
            f"(input {n}, kernel {k}, stride {s}, padding {p})")
    return span // s + 1


def conv3d(x: Tensor, kernel: Tensor, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """3-D cross-correlation (no kernel flip) with zero padding.

    ``kernel`` has shape (kd,kh,kw,c_in,c_out); ``x`` is (d,h,w,c_in) or
    batched (b,d,h,w,c_in).
    """
    if kernel.ndim != 5:
        raise ShapeError(f"conv3d kernel must be rank 5, got rank {kernel.ndim}")
    xb, batched = _to_batched(x)
    kd, kh, kw, ci, co = kernel.data.shape
    if xb.shape[-1] != ci:
        raise ShapeError(f"conv3d channel mismatch: input has {xb.shape[-1]}, kernel expects {ci}")
    stride = tuple(stride)
    padding = tuple(padding)
    b, d, h, w = xb.shape[:4]
    for n, k, s, p, name in zip((d, h, w), (kd, kh, kw), stride, padding, "dhw"):
        _out_extent(n, k, s, p, name)

    if (kd, kh, kw) == (1, 1, 1) and stride == (1, 1, 1) and padding == (0, 0, 0):
        xflat = xb.reshape(-1, ci)
        kmat = kernel.data.reshape(ci, co)
        yb = (xflat @ kmat).reshape(b, d, h, w, co)

        def vjp(g):
            gflat = g.reshape(-1, co)
            dx = (gflat @ kmat.T).reshape(xb.shape)
            dk = (xflat.T @ gflat).reshape(kernel.data.shape)
            return (dx if batched else dx[0]), dk

        out = yb if batched else yb[0]
        return _record(out, (x, kernel), vjp)

    yb, cols = _conv3d_raw(xb, kernel.data, stride, padding)
    _, do, ho, wo, _ = yb.shape

    def vjp(g):
        gb = g if batched else g[None]
        gflat = gb.reshape(-1, co)
        dk = (cols.T @ gflat).reshape(kernel.data.shape)
        # input gradient: dilate by stride, full-pad, correlate with the
        # spatially flipped kernel with channel axes swapped
        sd, sh, sw = stride
        dil = np.zeros((b, (do - 1) * sd + 1, (ho - 1) * sh + 1, (wo - 1) * sw + 1, co),
                       dtype=gb.dtype)
        dil[:, ::sd, ::sh, ::sw] = gb
        kflip = np.flip(kernel.data, axis=(0, 1, 2)).transpose(0, 1, 2, 4, 3)
        dxp, _ = _conv3d_raw(dil, np.ascontiguousarray(kflip), (1, 1, 1),
                             (kd - 1, kh - 1, kw - 1))
        pd, ph, pw = padding
        dx = dxp[:, pd:pd + d, ph:ph + h, pw:pw + w, :]
        return (dx if batched else dx[0]), dk

    out = yb if batched else yb[0]
    return _record(out, (x, kernel), vjp)


def maxpool3d(x: Tensor, window=(2, 2, 2)) -> Tensor:
    """Per-channel max over non-overlapping windows; extents must divide."""
    xb, batched = _to_batched(x)
    wd, wh, ww = window
    b, d, h, w, c = xb.shape
    if d % wd or h % wh or w % ww:
        raise ShapeError(f"maxpool window {window} does not divide extents {(d, h, w)}")
    r = xb.reshape(b, d // wd, wd, h // wh, wh, w // ww, ww, c)
    t = np.ascontiguousarray(r.transpose(0, 1, 3, 5, 7, 2, 4, 6))
    flat = t.reshape(b, d // wd, h // wh, w // ww, c, wd * wh * ww)
    am = flat.argmax(axis=-1)
    out_b = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = g if batched else g[None]
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, am[..., None], gb[..., None], axis=-1)
        dt = dflat.reshape(t.shape).transpose(0, 1, 5, 2, 6, 3, 7, 4)
        dx = dt.reshape(xb.shape)
        return (dx if batched else dx[0]),

    out = out_b if batched else out_b[0]
    return _record(out, (x,), vjp)


def maxpool3d_222(x: Tensor) -> Tensor:
    return maxpool3d(x, (2, 2, 2))


def _interp_index(n_in: int, factor: int):
    """Sample positions for align-corners=false linear interpolation."""
    coords = (np.arange(n_in * factor) + 0.5) / factor - 0.5
    coords = np.clip(coords, 0.0, n_in - 1.0)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    return lo, hi, frac


def trilinear_upsample(x: Tensor, factors=(2, 2, 2)) -> Tensor:
    """Per-channel trilinear upsampling (align-corners=false), separable per axis."""
    xb, batched = _to_batched(x)
    plans = []
    out = xb
    for axis, f in zip((1, 2, 3), factors):
        if f == 1:
            continue
        n_in = out.shape[axis]
        lo, hi, frac = _interp_index(n_in, f)
        w = frac.astype(out.dtype).reshape((1,) * axis + (-1,) + (1,) * (out.ndim - axis - 1))
        out = np.take(out, lo, axis=axis) * (1.0 - w) + np.take(out, hi, axis=axis) * w
        plans.append((axis, n_in, lo, hi, frac.astype(out.dtype)))

    def vjp(g):
        gb = g if batched else g[None]
        for axis, n_in, lo, hi, frac in reversed(plans):
            g0 = np.moveaxis(gb, axis, 0)
            acc = np.zeros((n_in,) + g0.shape[1:], dtype=g0.dtype)
            w0 = frac.reshape((-1,) + (1,) * (g0.ndim - 1))
            np.add.at(acc, lo, g0 * (1.0 - w0))
            np.add.at(acc, hi, g0 * w0)
            gb = np.moveaxis(acc, 0, axis)
        return (np.ascontiguousarray(gb) if batched else np.ascontiguousarray(gb[0])),

    out_t = out if batched else out[0]
    return _record(np.ascontiguousarray(out_t), (x,), vjp)


def trilinear_upsample_2x(x: Tensor) -> Tensor:
    return trilinear_upsample(x, (2, 2, 2))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over all axes except the last.

    Training mode normalizes with batch statistics and updates the running
    buffers in place (the one documented mutation in this module); inference
    mode normalizes with the running buffers.
    """
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        n = x.data.size // x.data.shape[-1]
        unbiased = var * n / (n - 1) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def vjp(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dx = (gamma.data * inv) * (g - dbeta / n - xhat * (dgamma / n))
            return dx, dgamma, dbeta
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv

        def vjp(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dx = g * (gamma.data * inv)
            return dx, dgamma, dbeta

    out = gamma.data * xhat + beta.data
    return _record(out.astype(x.dtype, copy=False), (x, gamma, beta), vjp)

"""Minimal dense tensor with tape-based reverse-mode differentiation.

All data is float64 and row-major.  Operations are recorded only while a
:class:`GradTape` is active and at least one input requires a gradient, so
inference code pays nothing for the tape.

    x = Tensor(np.random.rand(3), requires_grad=True)
    with GradTape() as tape:
        y = (x * x).sum()
    tape.backward(y)
    x.grad  # 2 * x
"""
import numpy as np

from . import kernels

_TAPES = []


class NonFiniteInput(FloatingPointError, ValueError):
    """NaN or inf where a finite value is required."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators --------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

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

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss, grad=None):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        loss = as_tensor(loss)
        if grad is None:
            if loss.size != 1:
                raise ValueError("backward needs a scalar loss or an explicit grad")
            grad = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(grad, dtype=np.float64)}
        produced = {id(out) for out, _, _ in self.records}
        leaves = {}
        for _, inputs, _ in self.records:
            for t in inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        for key, t in leaves.items():
            if key in grads:
                t.grad = grads[key] if t.grad is None else t.grad + grads[key]


def _record(out, inputs, backward):
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].records.append((out, inputs, backward))
    return out


def no_tape_active():
    return not _TAPES


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g / b.data, a.shape),
                                           _unbroadcast(-g * a.data / b.data ** 2, b.shape)))


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    out = Tensor(a.data ** p)
    return _record(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    return _record(out, (a,), lambda g: (g * 0.5 / out.data,))


def tabs(a):
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


def sigmoid(a):
    a = as_tensor(a)
    out = Tensor(0.5 * (1.0 + np.tanh(0.5 * a.data)))
    return _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))


def clip(a, lo, hi):
    """Clamp; gradient passes only where the input is strictly inside."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data > lo) & (a.data < hi)
    return _record(out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    out = Tensor(np.transpose(a.data, axes))
    inv = None if axes is None else np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    a = as_tensor(a)
    out = Tensor(a.data[idx])

    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(i, (list, np.ndarray, Tensor)) for i in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _record(out, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(out, tuple(tensors), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1,) + a.shape), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, b.shape + (1,))), a.shape[:-1])
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# softmax


def softmax(v, temperature=1.0, axis=-1):
    """Softmax of ``v / temperature`` along ``axis`` with max subtraction."""
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    v = as_tensor(v)
    z = v.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / e.sum(axis=axis, keepdims=True))

    def backward(g):
        s = out.data
        return ((s * (g - np.sum(g * s, axis=axis, keepdims=True))) / temperature,)

    return _record(out, (v,), backward)


def l2_normalize(x, axis=-1, eps=1e-12):
    x = as_tensor(x)
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True) + eps)
    return x / norm


# ---------------------------------------------------------------------------
# convolution (HWC layout)


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """Cross-correlation of an (H, W, Cin) map with a (k, k, Cin, Cout) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError("conv2d expects (H, W, Cin) input and (k, k, Cin, Cout) kernel")
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    if x.shape[2] != cin:
        raise ValueError(f"input has {x.shape[2]} channels, kernel expects {cin}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    H, W, _ = x.shape
    padded = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    Hp, Wp = padded.shape[:2]
    cols = kernels.im2col(padded, k, stride)
    Ho, Wo = cols.shape[:2]
    flat = cols.reshape(Ho * Wo, k * k * cin)
    kmat = kernel.data.reshape(k * k * cin, cout)
    res = flat @ kmat
    inputs = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        res = res + bias.data
        inputs = (x, kernel, bias)
    out = Tensor(res.reshape(Ho, Wo, cout))

    def backward(g):
        g2 = g.reshape(Ho * Wo, cout)
        gk = (flat.T @ g2).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(Ho, Wo, k, k, cin)
            gpad = kernels.col2im(gcols, Hp, Wp, stride)
            gx = gpad[pad:pad + H, pad:pad + W]
        grads = (gx, gk)
        if bias is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return _record(out, inputs, backward)


# ---------------------------------------------------------------------------
# sampling


def _check_points(pts):
    if not np.all(np.isfinite(pts)):
        raise NonFiniteInput("non-finite sampling coordinates")


def bilinear_sample(fmap, points):
    """Sample an (H, W, C) map at (N, 2) pixel points given as (x, y).

    Coordinates outside the map are clamped to the border.  Differentiable
    with respect to both the map and the point coordinates.
    """
    fmap, points = as_tensor(fmap), as_tensor(points)
    if fmap.size == 0:
        raise ValueError("empty map")
    if fmap.ndim == 2:
        return bilinear_sample(reshape(fmap, fmap.shape + (1,)), points)
    H, W, C = fmap.shape
    if H < 2 or W < 2:
        raise ValueError("bilinear sampling needs H, W >= 2")
    out = batched_bilinear_sample(reshape(fmap, (1, H, W, C)),
                                  reshape(points, (1,) + points.shape))
    return reshape(out, (points.shape[0], C))


def batched_bilinear_sample(maps, points):
    """(B, H, W, C) maps sampled at (B, N, 2) points -> (B, N, C)."""
    maps, points = as_tensor(maps), as_tensor(points)
    _check_points(points.data)
    # 1-pixel extents: replicate to 2 so the kernel always has a cell
    if maps.shape[1] == 1:
        maps = concat([maps, maps], axis=1)
    if maps.shape[2] == 1:
        maps = concat([maps, maps], axis=2)
    out = Tensor(kernels.bilinear_forward(maps.data, points.data))

    def backward(g):
        gm, gp = kernels.bilinear_backward(maps.data, points.data, g)
        return gm, gp

    return _record(out, (maps, points), backward)


def ms_deform_sample(value, shapes, locs, attn):
    """Attention-weighted bilinear sampling over several flattened levels.

    ``value`` (M, S, D) holds every level row-major along S; ``shapes`` lists
    ``(H_l, W_l)``; ``locs`` (M, Q, L, K, 2) are level-pixel (x, y) points and
    ``attn`` (M, Q, L, K) their weights.  Returns (M, Q, D).
    """
    value, locs, attn = as_tensor(value), as_tensor(locs), as_tensor(attn)
    _check_points(locs.data)
    shapes = np.asarray(shapes, dtype=np.int64).reshape(-1, 2)
    starts = np.concatenate([[0], np.cumsum(shapes[:, 0] * shapes[:, 1])[:-1]]).astype(np.int64)
    if value.shape[1] != int((shapes[:, 0] * shapes[:, 1]).sum()):
        raise ValueError("value length does not match level shapes")
    out = Tensor(kernels.msda_forward(value.data, shapes, starts, locs.data, attn.data))

    def backward(g):
        return kernels.msda_backward(value.data, shapes, starts, locs.data, attn.data, g)

    return _record(out, (value, locs, attn), backward)


def resize_matrix(n_out, n_in):
    """Row-stochastic (n_out, n_in) matrix for half-pixel-centred linear resize."""
    R = np.zeros((n_out, n_in))
    if n_in == 1:
        R[:, 0] = 1.0
        return R
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 2)
    w = src - i0
    R[np.arange(n_out), i0] = 1.0 - w
    R[np.arange(n_out), i0 + 1] += w
    return R


def resize_bilinear(fmap, out_h, out_w):
    """Bilinear resize of an (h, w, C) map to (out_h, out_w, C)."""
    fmap = as_tensor(fmap)
    h, w = fmap.shape[:2]
    if (h, w) == (out_h, out_w):
        return fmap
    Ry = resize_matrix(out_h, h)
    Rx = resize_matrix(out_w, w)
    out = Tensor(np.einsum("Hh,hwc,Ww->HWc", Ry, fmap.data, Rx, optimize=True))
    return _record(out, (fmap,),
                   lambda g: (np.einsum("Hh,HWc,Ww->hwc", Ry, g, Rx, optimize=True),))


# ---------------------------------------------------------------------------
# verification


def grad_check(f, x, eps=1e-6):
    """Max relative error between tape gradient and central differences.

    ``f`` maps a Tensor to a scalar Tensor.  The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with GradTape() as tape:
        y = f(leaf)
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("function returned a non-finite value")
    tape.backward(y)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
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
            raise FloatingPointError("function returned a non-finite value")
        flat[i] = (fp - fm) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0

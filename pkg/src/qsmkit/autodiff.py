"""Self-contained reverse-mode automatic differentiation on numpy arrays.

Activations follow a (channels, x, y, z) layout with no batch axis; batches
are Python lists. Every op validates that its output is finite (silent NaN
propagation is treated as a numerical fault). The tape is the implicit graph
of parent links; backward() topologically sorts it and visits each node
exactly once, accumulating gradients into leaves marked requires_grad.

Single precision is the working dtype; float64 tensors are supported so
gradient checks can separate method error from rounding error.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, NumericalError

DEFAULT_DTYPE = np.float32


def _check_finite(arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError("non-finite value produced by an op")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_live")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags.writeable:
            arr = arr.copy()  # tensors own their storage (volumes are locked)
        self.data = _check_finite(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._live = self.requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    # operator sugar; everything funnels into the op functions below
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, live={self._live})"


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _node(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p._live for p in parents):
        out._parents = parents
        out._backward = backward_fn
        out._live = True
    return out


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(out: Tensor) -> None:
    """Reverse pass from a scalar; accumulates into .grad of trainable leaves."""
    if out.data.size != 1:
        raise InputError(f"backward needs a scalar, got shape {out.data.shape}")
    order = _topo(out)
    flowing: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent._live:
                continue
            key = id(parent)
            flowing[key] = pg if key not in flowing else flowing[key] + pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data  # non-finite results caught by the node check
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def absolute(a: Tensor) -> Tensor:
    """|x| with subgradient sign(x) (0 at the kink)."""
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * (0.5 / out),))


def cos(a: Tensor) -> Tensor:
    return _node(np.cos(a.data), (a,), lambda g: (g * -np.sin(a.data),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape
    count = a.data.size if axis is None else np.prod(
        [shape[ax] for ax in np.atleast_1d(axis)])

    def back(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).astype(a.data.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, shape).astype(a.data.dtype),)

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), back)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return _node(a.data * factor, (a,), lambda g: (g * factor,))


def concat(parts: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    if not parts:
        raise InputError("concat needs at least one tensor")
    spatial = {p.data.shape[1:] for p in parts}
    if len(spatial) != 1:
        raise InputError(f"concat spatial shapes differ: {sorted(spatial)}")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), back)


def nn_upsample(a: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour spatial upsampling by integer replication."""
    if factor < 1:
        raise InputError(f"factor must be >= 1, got {factor}")
    d = a.data
    out = d.repeat(factor, axis=1).repeat(factor, axis=2).repeat(factor, axis=3)
    c, x, y, z = d.shape

    def back(g):
        return (g.reshape(c, x, factor, y, factor, z, factor).sum(axis=(2, 4, 6)),)

    return _node(out, (a,), back)


def shift_diff(a: Tensor, axis: int) -> Tensor:
    """Forward difference along a spatial axis (0..2); last slice zero."""
    if axis not in (0, 1, 2):
        raise InputError(f"spatial axis must be 0..2, got {axis}")
    ax = axis + 1
    d = a.data
    out = np.zeros_like(d)
    head = [slice(None)] * 4
    head[ax] = slice(0, d.shape[ax] - 1)
    head = tuple(head)
    tail = [slice(None)] * 4
    tail[ax] = slice(1, d.shape[ax])
    tail = tuple(tail)
    out[head] = d[tail] - d[head]

    def back(g):
        gx = np.zeros_like(g)
        gx[head] -= g[head]
        gx[tail] += g[head]
        return (gx,)

    return _node(out, (a,), back)


def spectral_filter(a: Tensor, spectrum: np.ndarray) -> Tensor:
    """Multiply by a real, even spectrum in k-space, per channel.

    Evenness makes the operator self-adjoint on real fields, so the backward
    pass reuses the forward transform. Dipole kernels satisfy this by
    construction.
    """
    if spectrum.shape != a.data.shape[1:]:
        raise InputError(
            f"spectrum shape {spectrum.shape} does not match spatial {a.data.shape[1:]}")
    spec = spectrum.astype(a.data.dtype)

    def apply(arr):
        hat = np.fft.fftn(arr, axes=(1, 2, 3))
        return np.real(np.fft.ifftn(spec * hat, axes=(1, 2, 3))).astype(arr.dtype)

    return _node(apply(a.data), (a,), lambda g: (apply(g),))


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """3D cross-correlation with zero padding.

    ``x`` is (C_in, X, Y, Z), ``w`` is (C_out, C_in, kx, ky, kz), ``b`` is
    (C_out,). Output spatial size per axis is floor((n + 2 pad - k)/stride)+1.
    Backward requires pad <= k - 1, which every architecture here satisfies.
    """
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise InputError("conv3d expects x (C,X,Y,Z) and w (O,C,kx,ky,kz)")
    c_in, xs, ys, zs = x.data.shape
    c_out, c_in_w, k1, k2, k3 = w.data.shape
    if c_in != c_in_w:
        raise InputError(f"conv3d channel mismatch: x has {c_in}, w expects {c_in_w}")
    if stride < 1 or pad < 0:
        raise InputError(f"bad stride/pad: {stride}/{pad}")
    if pad > min(k1, k2, k3) - 1 and pad > 0:
        raise InputError(f"pad {pad} exceeds kernel-1")
    if b is not None and b.data.shape != (c_out,):
        raise InputError(f"bias shape {b.data.shape} != ({c_out},)")
    for n, k in zip((xs, ys, zs), (k1, k2, k3)):
        if n + 2 * pad < k:
            raise InputError(f"kernel {k} larger than padded extent {n + 2 * pad}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k1, k2, k3), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    y = np.einsum("cxyzijl,ocijl->oxyz", win, w.data, optimize=True)
    if b is not None:
        y = y + b.data[:, None, None, None]

    def back(g):
        grad_w = np.einsum("cxyzijl,oxyz->ocijl", win, g, optimize=True)
        grad_b = None if b is None else g.sum(axis=(1, 2, 3))
        # transposed convolution for grad_x: dilate by stride, pad by k-1,
        # append the remainder columns no window covered, flip the kernel
        ox, oy, oz = g.shape[1:]
        gd = np.zeros((c_out, (ox - 1) * stride + 1, (oy - 1) * stride + 1,
                       (oz - 1) * stride + 1), dtype=g.dtype)
        gd[:, ::stride, ::stride, ::stride] = g
        rem = [(n + 2 * pad - k) % stride for n, k in zip((xs, ys, zs), (k1, k2, k3))]
        gp = np.pad(gd, ((0, 0),
                         (k1 - 1, k1 - 1 + rem[0]),
                         (k2 - 1, k2 - 1 + rem[1]),
                         (k3 - 1, k3 - 1 + rem[2])))
        w_flip = w.data.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1]
        wing = sliding_window_view(gp, (k1, k2, k3), axis=(1, 2, 3))
        gx_full = np.einsum("oxyzijl,coijl->cxyz", wing, w_flip, optimize=True)
        grad_x = gx_full[:, pad:pad + xs, pad:pad + ys, pad:pad + zs]
        if b is None:
            return grad_x, grad_w
        return grad_x, grad_w, grad_b

    parents = (x, w) if b is None else (x, w, b)
    return _node(y, parents, back)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial axes with learned affine.

    gamma/beta are (C, 1, 1, 1) so the broadcast machinery handles them.
    """
    mu = tmean(x, axis=(1, 2, 3), keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=(1, 2, 3), keepdims=True)
    inv = div(_as_tensor(1.0, x), sqrt(add(var, _as_tensor(eps, x))))
    return add(mul(mul(centered, inv), gamma), beta)


def numeric_gradient(f, tensor: Tensor, indices, h: float) -> np.ndarray:
    """Central differences of scalar f() w.r.t. tensor entries at ``indices``.

    Differences are accumulated in float64 regardless of the working dtype.
    """
    out = np.zeros(len(indices))
    flat = tensor.data.reshape(-1)
    for row, idx in enumerate(indices):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = float(f().data)
        flat[idx] = orig - h
        fm = float(f().data)
        flat[idx] = orig
        out[row] = (fp - fm) / (2.0 * h)
    return out


def check_gradients(f, tensors: list[Tensor], rng=None, samples: int | None = 16,
                    h: float | None = None) -> float:
    """Compare AD gradients of scalar f() against central differences.

    The error is max|numeric - ad| over all sampled coordinates, normalized
    by the largest gradient magnitude seen anywhere in the case. A single
    scalar objective gives every coordinate the same units, so one global
    scale is the right yardstick: coordinates whose true gradient is tiny or
    structurally zero (a parameter killed by a DC-free filter, say) are held
    to absolute accuracy at the gradient's scale, which is all that finite
    differences on a floating-point objective can resolve. An absolute floor
    guards the all-zero-gradient corner. Step h defaults to 1e-2 for float32
    graphs and 1e-5 for float64. Returns the worst normalized error.
    """
    rng = rng or np.random.default_rng(0)
    single = any(t.data.dtype == np.float32 for t in tensors)
    step = h if h is not None else (1e-2 if single else 1e-5)
    floor = 1e-4 if single else 1e-10

    zero_grads(tensors)
    out = f()
    backward(out)
    pairs = []
    for t in tensors:
        if t.grad is None:
            raise NumericalError("no gradient reached a checked tensor")
        size = t.data.size
        if samples is None or samples >= size:
            idx = list(range(size))
        else:
            idx = sorted(rng.choice(size, size=samples, replace=False).tolist())
        num = numeric_gradient(f, t, idx, step)
        ad = t.grad.reshape(-1)[idx].astype(np.float64)
        pairs.append((num, ad))
    scale = floor
    for num, ad in pairs:
        scale = max(scale, float(np.abs(num).max(initial=0.0)),
                    float(np.abs(ad).max(initial=0.0)))
    return max(float(np.abs(num - ad).max(initial=0.0)) / scale
               for num, ad in pairs)

"""Dense float64 tensors with reverse-mode automatic differentiation.

Every forward operation builds a node in an implicit computation graph:
the output tensor keeps references to its parents and a closure that
propagates the output gradient into them. ``backward(loss)`` replays the
graph once in reverse topological order. Gradients accumulate into
``Tensor.grad`` across repeated backward calls; the training loop is
responsible for zeroing them between steps.

Only the operations needed by the denoising network are implemented, all
on (batch, channels, height, width) grids or plain nD arrays. Convolution
uses an im2col forward with a kernel-offset-loop backward; everything else
is either elementwise, a reduction, or a reshaping view.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import OracleError, ShapeError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / validation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus its place in the differentiation record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        backward(self)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- method forms used throughout the layers --------------------------

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def neg(a):
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: a.accumulate_grad(-g) if a.requires_grad else None)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def div(a, b):
    a, b = _lift(a), _lift(b)
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bwd)


def pow_(a, exponent):
    a = _lift(a)
    data = a.data ** exponent

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * exponent * a.data ** (exponent - 1))

    return _make(data, (a,), bwd)


def exp(a):
    a = _lift(a)
    data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * data)

    return _make(data, (a,), bwd)


def sqrt(a):
    a = _lift(a)
    data = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * 0.5 / data)

    return _make(data, (a,), bwd)


def abs_(a):
    a = _lift(a)
    data = np.abs(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.sign(a.data))

    return _make(data, (a,), bwd)


def sigmoid(a):
    a = _lift(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * data * (1.0 - data))

    return _make(data, (a,), bwd)


def silu(a):
    """x * logistic(x)."""
    a = _lift(a)
    return mul(a, sigmoid(a))


def relu(a):
    a = _lift(a)
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _make(data, (a,), bwd)


def softplus(a):
    a = _lift(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        if a.requires_grad:
            s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                         np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            a.accumulate_grad(g * s)

    return _make(data, (a,), bwd)


def hadamard(a, b):
    """Elementwise product requiring exactly matching extents."""
    a, b = _lift(a), _lift(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"hadamard operands differ: {a.data.shape} vs {b.data.shape}")
    return mul(a, b)


# -- reductions -----------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


# -- shape manipulation ---------------------------------------------------


def reshape(a, shape):
    a = _lift(a)
    orig = a.data.shape
    data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(orig))

    return _make(data, (a,), bwd)


def transpose(a, axes):
    a = _lift(a)
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inv))

    return _make(data, (a,), bwd)


def flip(a, axis):
    a = _lift(a)
    data = np.flip(a.data, axis=axis)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.flip(g, axis=axis))

    return _make(data, (a,), bwd)


def pad(a, pad_width):
    """Zero padding; pad_width is a ((before, after), ...) tuple per axis."""
    a = _lift(a)
    pad_width = tuple(tuple(p) for p in pad_width)
    data = np.pad(a.data, pad_width)
    sl = tuple(slice(b, b + n) for (b, _), n in zip(pad_width, a.data.shape))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g[sl])

    return _make(data, (a,), bwd)


def getitem(a, key):
    a = _lift(a)
    data = a.data[key]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] = g
            a.accumulate_grad(full)

    return _make(data, (a,), bwd)


def concat(tensors, axis):
    tensors = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t.accumulate_grad(piece)

    return _make(data, tuple(tensors), bwd)


def concat_channels(*maps):
    """Pool rank-4 feature maps along the channel axis."""
    shapes = [m.data.shape for m in map(_lift, maps)]
    base = shapes[0]
    for s in shapes[1:]:
        if (s[0], s[2], s[3]) != (base[0], base[2], base[3]):
            raise ShapeError(f"concat_channels batch/spatial mismatch: {base} vs {s}")
    return concat(list(maps), axis=1)


def dilate2d(a, stride):
    """Insert stride-1 zeros between spatial samples (transposed-conv helper)."""
    a = _lift(a)
    b, c, h, w = a.data.shape
    data = np.zeros((b, c, (h - 1) * stride + 1, (w - 1) * stride + 1))
    data[:, :, ::stride, ::stride] = a.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g[:, :, ::stride, ::stride])

    return _make(data, (a,), bwd)


# -- linear algebra -------------------------------------------------------


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(data, (a, b), bwd)


def linear(x, weight, bias=None):
    """Pointwise channel mapping of a (B, C, H, W) map: C -> out_f at every position."""
    x, weight = _lift(x), _lift(weight)
    if x.data.ndim != 4:
        raise ShapeError(f"linear expects a rank-4 map, got {x.data.shape}")
    out_f, in_f = weight.data.shape
    if in_f != x.data.shape[1]:
        raise ShapeError(
            f"linear weight expects {in_f} input channels, map has {x.data.shape[1]} "
            f"(weight {weight.data.shape}, input {x.data.shape})")
    data = np.einsum("bchw,oc->bohw", x.data, weight.data, optimize=True)
    if bias is not None:
        bias = _lift(bias)
        data = data + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.einsum("bohw,oc->bchw", g, weight.data, optimize=True))
        if weight.requires_grad:
            weight.accumulate_grad(np.einsum("bohw,bchw->oc", g, x.data, optimize=True))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

    return _make(data, parents, bwd)


# -- convolution ----------------------------------------------------------


def _conv_out_extent(size, k, pad_before, pad_after, stride):
    return (size + pad_before + pad_after - k) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """2D convolution on (B, C, H, W) with zero padding.

    weight is (out_ch, in_ch // groups, kh, kw); groups == channels gives
    per-channel (depth-wise) filtering. padding may be an int (symmetric)
    or a ((top, bottom), (left, right)) pair for even-kernel same-padding.
    """
    x, weight = _lift(x), _lift(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input/weight, got {x.data.shape}, {weight.data.shape}")
    b, c, h, w = x.data.shape
    oc, icg, kh, kw = weight.data.shape
    if c % groups or oc % groups:
        raise ShapeError(f"channels {c}/{oc} not divisible by groups={groups}")
    if icg != c // groups:
        raise ShapeError(
            f"conv2d weight expects {icg * groups} input channels, map has {c} "
            f"(weight {weight.data.shape}, input {x.data.shape})")
    if isinstance(padding, int):
        pads = ((padding, padding), (padding, padding))
    else:
        pads = (tuple(padding[0]), tuple(padding[1]))
    ho = _conv_out_extent(h, kh, *pads[0], stride)
    wo = _conv_out_extent(w, kw, *pads[1], stride)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output extent non-positive for input {x.data.shape}, "
                         f"kernel ({kh},{kw}), stride {stride}, padding {pads}")

    xp = np.pad(x.data, ((0, 0), (0, 0), pads[0], pads[1]))
    depthwise = groups == c and oc == c

    if depthwise:
        wsq = weight.data[:, 0]  # (C, kh, kw)
        data = np.zeros((b, c, ho, wo))
        for u in range(kh):
            for v in range(kw):
                data += wsq[None, :, u, v, None, None] * \
                    xp[:, :, u:u + ho * stride:stride, v:v + wo * stride:stride]
    else:
        data = np.empty((b, oc, ho, wo))
        cg, og = c // groups, oc // groups
        for gi in range(groups):
            win = np.lib.stride_tricks.sliding_window_view(
                xp[:, gi * cg:(gi + 1) * cg], (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
            data[:, gi * og:(gi + 1) * og] = np.einsum(
                "bcijuv,ocuv->boij", win, weight.data[gi * og:(gi + 1) * og], optimize=True)

    if bias is not None:
        bias = _lift(bias)
        if bias.data.shape != (oc,):
            raise ShapeError(f"conv2d bias shape {bias.data.shape} != ({oc},)")
        data = data + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        dxp = np.zeros_like(xp) if x.requires_grad else None
        if depthwise:
            if weight.requires_grad:
                dw = np.zeros_like(weight.data)
                for u in range(kh):
                    for v in range(kw):
                        dw[:, 0, u, v] = np.sum(
                            g * xp[:, :, u:u + ho * stride:stride, v:v + wo * stride:stride],
                            axis=(0, 2, 3))
                weight.accumulate_grad(dw)
            if x.requires_grad:
                wsq = weight.data[:, 0]
                for u in range(kh):
                    for v in range(kw):
                        dxp[:, :, u:u + ho * stride:stride, v:v + wo * stride:stride] += \
                            wsq[None, :, u, v, None, None] * g
        else:
            cg, og = c // groups, oc // groups
            dw = np.zeros_like(weight.data) if weight.requires_grad else None
            for gi in range(groups):
                gg = g[:, gi * og:(gi + 1) * og]
                wg = weight.data[gi * og:(gi + 1) * og]
                if weight.requires_grad:
                    win = np.lib.stride_tricks.sliding_window_view(
                        xp[:, gi * cg:(gi + 1) * cg], (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
                    dw[gi * og:(gi + 1) * og] = np.einsum(
                        "boij,bcijuv->ocuv", gg, win, optimize=True)
                if x.requires_grad:
                    for u in range(kh):
                        for v in range(kw):
                            dxp[:, gi * cg:(gi + 1) * cg,
                                u:u + ho * stride:stride, v:v + wo * stride:stride] += \
                                np.einsum("boij,oc->bcij", gg, wg[:, :, u, v], optimize=True)
            if weight.requires_grad:
                weight.accumulate_grad(dw)
        if x.requires_grad:
            (t, _), (l, _) = pads
            x.accumulate_grad(dxp[:, :, t:t + h, l:l + w])
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

    return _make(data, parents, bwd)


def conv2d_same(x, weight, bias=None, groups=1):
    """Stride-1 zero same-padding, valid for odd or even kernels."""
    kh, kw = weight.data.shape[2], weight.data.shape[3]
    pads = (((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2))
    return conv2d(x, weight, bias, stride=1, padding=pads, groups=groups)


def conv_transpose2d(x, weight, bias=None, stride=2):
    """Stride-s transposed convolution that exactly s-folds the spatial extents.

    weight is (in_ch, out_ch, kh, kw). Realized as zero dilation + asymmetric
    padding + ordinary convolution with the spatially flipped, axis-swapped kernel.
    """
    x, weight = _lift(x), _lift(weight)
    ic, oc, kh, kw = weight.data.shape
    if x.data.shape[1] != ic:
        raise ShapeError(
            f"conv_transpose2d weight expects {ic} input channels, map has {x.data.shape[1]}")
    w2 = flip(flip(transpose(weight, (1, 0, 2, 3)), 2), 3)
    up = dilate2d(x, stride)
    # total padding chosen so the output extent is exactly stride * input extent
    lo_h, lo_w = (kh - 1) // 2, (kw - 1) // 2
    pads = ((lo_h, stride + kh - 2 - lo_h), (lo_w, stride + kw - 2 - lo_w))
    return conv2d(up, w2, bias, stride=1, padding=pads)


# -- normalization --------------------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-6):
    """Per-position normalization across the channel axis of a (B, C, H, W) map.

    Denominator is sqrt(var + eps): constant channels map to zero before the
    affine transform.
    """
    from .errors import ConfigError
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"layer_norm gamma/beta must have length {c}, "
                         f"got {gamma.data.shape}/{beta.data.shape}")
    mu = mean(x, axis=1, keepdims=True)
    xc = x - mu
    var = mean(mul(xc, xc), axis=1, keepdims=True)
    xn = div(xc, sqrt(add(var, eps)))
    return add(mul(xn, reshape(gamma, (1, c, 1, 1))), reshape(beta, (1, c, 1, 1)))


# -- backward pass --------------------------------------------------------


def backward(loss):
    """Propagate d(loss)/d(node) through the recorded graph.

    loss must be a scalar tensor that participated in recorded operations.
    Parameter gradients accumulate into .grad; callers zero them between
    steps. Parameters unreachable from the loss keep grad = None (treated
    as all-zero).
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad or loss._backward is None and not loss._parents:
        raise UsageError("backward on a value outside the differentiation record")

    topo, visited, stack = [], set(), [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node._parents:  # free intermediate gradients, keep leaves
            node.grad = None


# -- gradient oracle ------------------------------------------------------


def finite_difference_grad(f, params, eps=1e-5):
    """Central-difference gradients of a scalar function of parameter arrays.

    f takes the list of parameter arrays and returns a float; params is a
    list of numpy arrays mutated in place during probing but restored on
    return. Independent of the reverse-mode path by construction.
    """
    grads = []
    for arr in params:
        g = np.zeros_like(arr)
        flat, gflat = arr.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(params)
            flat[i] = orig - eps
            fm = f(params)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise OracleError(f"non-finite probe at coordinate {i}: f+={fp}, f-={fm}")
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def grad_close(analytic, numeric, rel_tol=1e-4, abs_floor=1e-6):
    """Max-over-coordinates relative comparison with an absolute floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) <= rel_tol

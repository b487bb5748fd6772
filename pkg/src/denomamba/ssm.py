"""Discrete selective state-space scan layers.

The core recurrence, per feature channel d with diagonal state (N modes):

    h[n] = a_bar[n] * h[n-1] + b_bar[n] * s[n],   h[-1] = 0
    out[n] = sum_j C[n, j] * h[n, j]

with input-dependent step size, input and output projections (Delta, B, C
computed from the sequence itself). Discretization is zero-order hold on
the state path (a_bar = exp(Delta * A), A = -exp(a_log) strictly negative)
and an Euler rule on the input path (b_bar = Delta * B).

``linear_recurrence`` is the performance kernel: a chunked Hillis-Steele
doubling scan (log-depth, vectorized over everything but the step axis)
with a hand-derived adjoint, since the reversed recurrence is again a
linear recurrence. ``selective_scan_sequential`` unrolls the exact
recurrence step by step through ordinary tape ops and serves as the
correctness oracle for ``selective_scan``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .layers import Module, uniform_fan_in


@dataclass
class ScanSequence:
    """A (batch, length, channels) sequence plus the traversal that made it."""

    values: Tensor
    origin: str = ""

    @property
    def length(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


class SsmLayerParams(Module):
    """Learnable pieces of one selective scan layer.

    channels is the feature width the recurrence runs over independently;
    state_size is the number of diagonal state modes per channel. a_log
    starts at log(1..N) so A = -exp(a_log) spans slow to fast decay, and
    the Delta bias is set so softplus(bias) is log-uniform in
    [1e-3, 1e-1], keeping a_bar = exp(Delta*A) well inside (0, 1).
    """

    def __init__(self, rng, channels, state_size, dt_rank=None):
        d, n = channels, state_size
        self.channels = channels
        self.state_size = state_size
        self.dt_rank = dt_rank if dt_rank is not None else max(1, math.ceil(d / 16))
        self.a_log = Tensor(np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (d, 1)),
                            requires_grad=True)
        self.b_proj = Tensor(uniform_fan_in(rng, (n, d), d), requires_grad=True)
        self.c_proj = Tensor(uniform_fan_in(rng, (n, d), d), requires_grad=True)
        self.dt_down = Tensor(uniform_fan_in(rng, (self.dt_rank, d), d), requires_grad=True)
        self.dt_up = Tensor(uniform_fan_in(rng, (d, self.dt_rank), self.dt_rank),
                            requires_grad=True)
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=d))
        self.dt_bias = Tensor(np.log(np.expm1(dt)), requires_grad=True)


def discretize(a_log, delta, b):
    """ZOH state / Euler input discretization.

    a_log: (D, N); delta: (..., D) strictly positive; b: (..., N).
    Returns a_bar, b_bar of shape (..., D, N).
    """
    a_log, delta, b = ad._lift(a_log), ad._lift(delta), ad._lift(b)
    if np.any(delta.data <= 0):
        raise ValueError(f"discretize requires delta > 0, min was {delta.data.min()}")
    a = ad.neg(ad.exp(a_log))
    delta_e = ad.reshape(delta, delta.shape + (1,))
    a_bar = ad.exp(ad.mul(delta_e, a))
    b_e = ad.reshape(b, b.shape[:-1] + (1,) + b.shape[-1:])
    b_bar = ad.mul(delta_e, b_e)
    return a_bar, b_bar


# -- the recurrence kernel --------------------------------------------------


def _doubling_scan(a, x):
    """In-place Hillis-Steele scan along axis 1; x becomes h, a becomes
    the running prefix product."""
    length = a.shape[1]
    d = 1
    while d < length:
        x[:, d:] += a[:, d:] * x[:, :-d]
        a[:, d:] *= a[:, :-d]
        d <<= 1
    return a, x


def _recurrence_values(a, x, chunk=512):
    h = np.empty_like(x)
    carry = None
    length = a.shape[1]
    for i in range(0, length, chunk):
        j = min(i + chunk, length)
        ac, xc = _doubling_scan(a[:, i:j].copy(), x[:, i:j].copy())
        if carry is not None:
            xc += ac * carry
        h[:, i:j] = xc
        carry = h[:, j - 1:j]
    return h


def recurrence_sequential(a, x):
    """Plain-loop reference for h[n] = a[n] h[n-1] + x[n] on numpy arrays."""
    h = np.empty_like(x)
    state = np.zeros_like(x[:, 0])
    for n in range(x.shape[1]):
        state = a[:, n] * state + x[:, n]
        h[:, n] = state
    return h


def linear_recurrence(a, x):
    """Differentiable h[n] = a[n] * h[n-1] + x[n] along axis 1, h[-1] = 0.

    The adjoint runs the same scan on the reversed sequence:
    g[n] = dh[n] + a[n+1] g[n+1], then da = g * h[n-1] and dx = g.
    """
    a, x = ad._lift(a), ad._lift(x)
    if a.shape != x.shape:
        raise ShapeError(f"linear_recurrence operands differ: {a.shape} vs {x.shape}")
    h = _recurrence_values(a.data, x.data)

    def bwd(dh):
        a_rev = np.flip(a.data, axis=1)
        a_shift = np.concatenate([np.zeros_like(a_rev[:, :1]), a_rev[:, :-1]], axis=1)
        g = np.flip(_recurrence_values(a_shift, np.flip(dh, axis=1).copy()), axis=1)
        if x.requires_grad:
            x.accumulate_grad(g)
        if a.requires_grad:
            h_prev = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
            a.accumulate_grad(g * h_prev)

    return ad._make(h, (a, x), bwd)


# -- selective scan ---------------------------------------------------------


def _project_dbc(s, params):
    """Per-step Delta (G, L, D), B and C (G, L, N) from the sequence itself."""
    g, length, d = s.shape
    flat = ad.reshape(s, (g * length, d))
    low = ad.matmul(flat, ad.transpose(params.dt_down, (1, 0)))
    delta = ad.softplus(ad.add(ad.matmul(low, ad.transpose(params.dt_up, (1, 0))),
                               params.dt_bias))
    b = ad.matmul(flat, ad.transpose(params.b_proj, (1, 0)))
    c = ad.matmul(flat, ad.transpose(params.c_proj, (1, 0)))
    n = params.state_size
    return (ad.reshape(delta, (g, length, d)),
            ad.reshape(b, (g, length, n)),
            ad.reshape(c, (g, length, n)))


def _selective_scan_values(s, params):
    g, length, d = s.shape
    if d != params.channels:
        raise ShapeError(f"scan expects {params.channels} channels, sequence has {d}")
    n = params.state_size
    delta, b, c = _project_dbc(s, params)
    a_bar, b_bar = discretize(params.a_log, delta, b)
    x = ad.mul(b_bar, ad.reshape(s, (g, length, d, 1)))
    h = linear_recurrence(a_bar, x)
    out = ad.sum_(ad.mul(h, ad.reshape(c, (g, length, 1, n))), axis=-1)
    return out


def selective_scan(seq, params):
    """Fast chunked/associative evaluation of the selective scan."""
    if isinstance(seq, ScanSequence):
        return ScanSequence(_selective_scan_values(seq.values, params), seq.origin)
    return _selective_scan_values(seq, params)


def selective_scan_sequential(seq, params):
    """Step-by-step unrolled recurrence; the oracle for selective_scan."""
    values = seq.values if isinstance(seq, ScanSequence) else ad._lift(seq)
    g, length, d = values.shape
    if d != params.channels:
        raise ShapeError(f"scan expects {params.channels} channels, sequence has {d}")
    n = params.state_size
    state = Tensor(np.zeros((g, d, n)))
    outs = []
    for i in range(length):
        s_i = ad.reshape(values[:, i], (g, d))
        low = ad.matmul(s_i, ad.transpose(params.dt_down, (1, 0)))
        delta = ad.softplus(ad.add(ad.matmul(low, ad.transpose(params.dt_up, (1, 0))),
                                   params.dt_bias))
        b = ad.matmul(s_i, ad.transpose(params.b_proj, (1, 0)))
        c = ad.matmul(s_i, ad.transpose(params.c_proj, (1, 0)))
        a_bar, b_bar = discretize(params.a_log, delta, b)
        state = ad.add(ad.mul(a_bar, state),
                       ad.mul(b_bar, ad.reshape(s_i, (g, d, 1))))
        out_i = ad.sum_(ad.mul(state, ad.reshape(c, (g, 1, n))), axis=-1)
        outs.append(ad.reshape(out_i, (g, 1, d)))
    stacked = ad.concat(outs, axis=1)
    if isinstance(seq, ScanSequence):
        return ScanSequence(stacked, seq.origin)
    return stacked


# -- 2D cross scan and channel scan -----------------------------------------


CROSS_ORIGINS = ("row", "col", "row_rev", "col_rev")


def cross_scan_2d(fmap):
    """Expand a (B, C, H, W) map into four directional sequences:
    row-major, column-major, and their reversals."""
    fmap = ad._lift(fmap)
    b, c, h, w = fmap.shape
    row = ad.transpose(ad.reshape(fmap, (b, c, h * w)), (0, 2, 1))
    col = ad.transpose(ad.reshape(ad.transpose(fmap, (0, 1, 3, 2)), (b, c, h * w)), (0, 2, 1))
    return (ScanSequence(row, "row"),
            ScanSequence(col, "col"),
            ScanSequence(ad.flip(row, 1), "row_rev"),
            ScanSequence(ad.flip(col, 1), "col_rev"))


def cross_merge_2d(seqs, shape):
    """Invert each of the four traversals and sum the results into a map."""
    b, c, h, w = shape
    if len(seqs) != 4:
        raise ShapeError(f"cross_merge_2d expects 4 sequences, got {len(seqs)}")
    total = None
    for seq in seqs:
        values = seq.values if isinstance(seq, ScanSequence) else seq
        origin = seq.origin if isinstance(seq, ScanSequence) else ""
        if values.shape[1] != h * w:
            raise ShapeError(f"sequence length {values.shape[1]} != H*W = {h * w} "
                             f"for target shape {shape}")
        if origin.endswith("_rev"):
            values = ad.flip(values, 1)
            origin = origin[:-4]
        grid = ad.reshape(ad.transpose(values, (0, 2, 1)), (b, c, h, w) if origin != "col"
                          else (b, c, w, h))
        if origin == "col":
            grid = ad.transpose(grid, (0, 1, 3, 2))
        total = grid if total is None else ad.add(total, grid)
    return total


def channel_scan(fmap):
    """Sequence along the channel axis; features are flattened space."""
    fmap = ad._lift(fmap)
    b, c, h, w = fmap.shape
    return ScanSequence(ad.reshape(fmap, (b, c, h * w)), "channel")


def channel_unscan(seq, shape):
    values = seq.values if isinstance(seq, ScanSequence) else seq
    b, c, h, w = shape
    if values.shape != (b, c, h * w):
        raise ShapeError(f"channel_unscan got {values.shape}, expected {(b, c, h * w)} "
                         f"for target shape {shape}")
    return ad.reshape(values, shape)

"""The fused state-space block: spatial scan, channel scan with a gated
convolution network, identity path, and convolutional fusion.

Dataflow per block, for input z of width C' and expansion alpha:

    spatial path : z + lin(silu(lin(norm(z))) * merge(scan4(silu(dw(lin(norm(z)))))))
    channel path : same shape, scan along the channel axis, then the GCN
    fusion       : conv1x1(pool) + conv3x3(conv3x3(pool)), pool = concat(paths)

Both scan branches expand to alpha*C' inner channels and contract back.
Layer normalization sits at the entry of each scan module; the residual
adds the un-normalized input. Ablation flags drop a path from the pool
(and its parameters) entirely.
"""

from __future__ import annotations

from . import autodiff as ad
from .errors import ConfigError
from .layers import ChannelLinear, Conv2d, LayerNorm, Module
from .ssm import (ScanSequence, SsmLayerParams, _selective_scan_values,
                  channel_scan, channel_unscan, cross_merge_2d, cross_scan_2d)


class SpatialSsmModule(Module):
    """Gated selective scan over the four 2D spatial traversals."""

    def __init__(self, rng, width, expansion, state_size, conv_width, dt_rank=None):
        inner = expansion * width
        self.norm = LayerNorm(width)
        self.gate = ChannelLinear(rng, width, inner)
        self.inp = ChannelLinear(rng, width, inner)
        self.dw = Conv2d(rng, inner, inner, conv_width, groups=inner)
        self.ssm = SsmLayerParams(rng, inner, state_size, dt_rank)
        self.out = ChannelLinear(rng, inner, width)
        self.inner = inner

    def __call__(self, z):
        zn = self.norm(z)
        gate = ad.silu(self.gate(zn))
        m = ad.silu(self.dw(self.inp(zn)))
        b, c, h, w = m.shape
        seqs = cross_scan_2d(m)
        stacked = ad.concat([s.values for s in seqs], axis=0)  # (4B, L, inner)
        scanned = _selective_scan_values(stacked, self.ssm)
        outs = [ScanSequence(scanned[i * b:(i + 1) * b], s.origin)
                for i, s in enumerate(seqs)]
        merged = cross_merge_2d(outs, (b, c, h, w))
        return ad.add(z, self.out(ad.hadamard(gate, merged)))


class ChannelSsmModule(Module):
    """Gated selective scan along the channel axis.

    Each spatial position is scanned as an independent scalar sequence of
    length alpha*C', so the layer parameters stay resolution-agnostic.
    Produces the intermediate channel-context map (pre-GCN).
    """

    def __init__(self, rng, width, expansion, state_size, conv_width,
                 dt_rank=None, bidirectional=False):
        inner = expansion * width
        self.norm = LayerNorm(width)
        self.gate = ChannelLinear(rng, width, inner)
        self.inp = ChannelLinear(rng, width, inner)
        self.dw = Conv2d(rng, inner, inner, conv_width, groups=inner)
        self.ssm = SsmLayerParams(rng, 1, state_size, dt_rank)
        self.out = ChannelLinear(rng, inner, width)
        self.inner = inner
        self.bidirectional = bidirectional

    def _scan_channels(self, m):
        b, c, h, w = m.shape
        seq = channel_scan(m)  # (B, C, H*W): length = channels, features = space
        cols = ad.reshape(ad.transpose(seq.values, (0, 2, 1)), (b * h * w, c, 1))
        scanned = _selective_scan_values(cols, self.ssm)
        if self.bidirectional:
            rev = _selective_scan_values(ad.flip(cols, 1), self.ssm)
            scanned = ad.add(scanned, ad.flip(rev, 1))
        back = ad.transpose(ad.reshape(scanned, (b, h * w, c)), (0, 2, 1))
        return channel_unscan(ScanSequence(back, "channel"), (b, c, h, w))

    def __call__(self, z):
        zn = self.norm(z)
        gate = ad.silu(self.gate(zn))
        m = ad.silu(self.dw(self.inp(zn)))
        merged = self._scan_channels(m)
        return ad.add(z, self.out(ad.hadamard(gate, merged)))


class GatedConvNet(Module):
    """Secondary network refining the channel-context map: a ReLU gate from
    one 1x1 -> depth-wise 3x3 branch modulates the latent of another, with a
    closing 1x1 projection and residual."""

    def __init__(self, rng, width):
        self.gate_pw = Conv2d(rng, width, width, 1)
        self.gate_dw = Conv2d(rng, width, width, 3, groups=width)
        self.lat_pw = Conv2d(rng, width, width, 1)
        self.lat_dw = Conv2d(rng, width, width, 3, groups=width)
        self.out_pw = Conv2d(rng, width, width, 1)

    def __call__(self, zt):
        gate = ad.relu(self.gate_dw(self.gate_pw(zt)))
        latent = self.lat_dw(self.lat_pw(zt))
        return ad.add(self.out_pw(ad.hadamard(gate, latent)), zt)


class CfmModule(Module):
    """Convolutional fusion of the pooled pathway maps back to C' channels."""

    def __init__(self, rng, width, n_paths):
        pool_w = n_paths * width
        self.pw = Conv2d(rng, pool_w, width, 1)
        self.conv_a = Conv2d(rng, pool_w, width, 3)
        self.conv_b = Conv2d(rng, width, width, 3)

    def __call__(self, maps):
        pool = ad.concat_channels(*maps)
        return ad.add(self.pw(pool), self.conv_b(self.conv_a(pool)))


class FuseSsmBlock(Module):
    """Three parallel pathways (spatial scan, channel scan + GCN, identity)
    merged by the fusion module. Ablation flags remove a pathway and its
    parameters; disabling both scan paths is rejected."""

    def __init__(self, rng, width, expansion=2, state_size=16, conv_width=4,
                 dt_rank=None, no_spatial_ssm=False, no_channel_ssm=False,
                 no_gcn=False, no_cfm=False, no_identity=False,
                 channel_scan_bidirectional=False):
        if no_spatial_ssm and no_channel_ssm:
            raise ConfigError("cannot disable both the spatial and channel scan paths")
        self.width = width
        self.no_cfm = no_cfm
        self.no_identity = no_identity
        self.spatial = None if no_spatial_ssm else SpatialSsmModule(
            rng, width, expansion, state_size, conv_width, dt_rank)
        self.channel = None if no_channel_ssm else ChannelSsmModule(
            rng, width, expansion, state_size, conv_width, dt_rank,
            bidirectional=channel_scan_bidirectional)
        self.gcn = None if (no_channel_ssm or no_gcn) else GatedConvNet(rng, width)
        n_paths = (self.spatial is not None) + (self.channel is not None) + (not no_identity)
        self.cfm = None if no_cfm else CfmModule(rng, width, n_paths)

    def __call__(self, z):
        paths = []
        if self.spatial is not None:
            paths.append(self.spatial(z))
        if self.channel is not None:
            zt = self.channel(z)
            paths.append(self.gcn(zt) if self.gcn is not None else zt)
        if not self.no_identity:
            paths.append(z)
        if self.no_cfm:
            total = paths[0]
            for p in paths[1:]:
                total = ad.add(total, p)
            return total
        return self.cfm(paths)


# -- operation surface (composition oracles call these separately) ----------


def spatial_ssm_forward(z_in, block):
    return block.spatial(z_in)


def channel_ssm_forward(z_in, block):
    """The intermediate channel-context map, before the GCN."""
    return block.channel(z_in)


def gcn_forward(z_tilde, block):
    return block.gcn(z_tilde)


def cfm_forward(z_spa, z_cha, z_in, block):
    return block.cfm([z_spa, z_cha, z_in])


def fusessm_forward(z_in, block):
    return block(z_in)

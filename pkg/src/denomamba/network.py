"""K-stage hourglass assembly: embedding, cascaded fused-scan stages with
learnable down/up-sampling, skip connections, and output projection.

Stage k of the encoder runs its blocks at enc_widths[k-1], then (except at
the bottleneck stage) a stride-2 conv halves the spatial extents and moves
to the next width. The decoder mirrors this with stride-2 transposed convs,
adding the matching encoder skip after each upsample; the final decoder
stage adds the embedding-level features directly. Skips tap the pre-down
stage outputs, which is what makes the width schedule line up.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .blocks import FuseSsmBlock
from .errors import ConfigError, IntegrityError, ShapeError
from .layers import Conv2d, ConvTranspose2d, Module

CHECKPOINT_MAGIC = b"DNMB"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults are the full-scale configuration."""

    stages: int = 4
    base_width: int = 48
    enc_blocks: tuple = (4, 6, 6, 8)
    dec_blocks: tuple = (6, 6, 4, 2)  # processing order, bottleneck stage first
    enc_widths: tuple = None
    dec_widths: tuple = None
    state_size: int = 16
    conv_width: int = 4
    expansion: int = 2
    dt_rank: int = None
    no_spatial_ssm: bool = False
    no_channel_ssm: bool = False
    no_gcn: bool = False
    no_cfm: bool = False
    no_identity: bool = False
    channel_scan_bidirectional: bool = False
    seed: int = 0

    def __post_init__(self):
        self.enc_blocks = tuple(self.enc_blocks)
        self.dec_blocks = tuple(self.dec_blocks)
        if self.enc_widths is None:
            self.enc_widths = tuple(self.base_width * 2 ** i for i in range(self.stages))
        else:
            self.enc_widths = tuple(self.enc_widths)
        if self.dec_widths is None:
            mirror = [self.enc_widths[self.stages - 2 - i] for i in range(self.stages - 1)]
            self.dec_widths = tuple(mirror + [self.enc_widths[0]])
        else:
            self.dec_widths = tuple(self.dec_widths)
        self.validate()

    def validate(self):
        k = self.stages
        if k < 1:
            raise ConfigError(f"stages must be >= 1, got {k}")
        if len(self.enc_blocks) != k or len(self.dec_blocks) != k:
            raise ConfigError(f"block-count lists must have length {k}, got "
                              f"{len(self.enc_blocks)}/{len(self.dec_blocks)}")
        if len(self.enc_widths) != k or len(self.dec_widths) != k:
            raise ConfigError(f"width lists must have length {k}, got "
                              f"{len(self.enc_widths)}/{len(self.dec_widths)}")
        if any(b < 1 for b in self.enc_blocks + self.dec_blocks):
            raise ConfigError("every stage needs at least one block")
        if any(w < 1 for w in self.enc_widths + self.dec_widths):
            raise ConfigError("stage widths must be strictly positive")
        for i in range(k - 1):
            if self.dec_widths[i] != self.enc_widths[k - 2 - i]:
                raise ConfigError(
                    f"decoder width {self.dec_widths[i]} at processing step {i} cannot "
                    f"receive the encoder skip of width {self.enc_widths[k - 2 - i]}")
        if self.dec_widths[k - 1] != self.enc_widths[0]:
            raise ConfigError(
                f"final decoder width {self.dec_widths[k - 1]} must equal the embedding "
                f"width {self.enc_widths[0]}")
        if self.no_spatial_ssm and self.no_channel_ssm:
            raise ConfigError("cannot disable both scan paths")
        if min(self.state_size, self.conv_width, self.expansion) < 1:
            raise ConfigError("state_size, conv_width and expansion must be >= 1")

    @property
    def divisor(self):
        """Spatial extents must divide by this for a full forward pass."""
        return 2 ** (self.stages - 1)

    @classmethod
    def desk(cls, **overrides):
        base = dict(stages=3, base_width=8, enc_blocks=(1, 1, 1), dec_blocks=(1, 1, 1),
                    state_size=4, conv_width=4, expansion=2)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper(cls, **overrides):
        return cls(**overrides)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model-config keys: {sorted(unknown)}")
        return cls(**d)


class EncoderStage(Module):
    def __init__(self, blocks, down):
        self.blocks = blocks
        self.down = down


class DecoderStage(Module):
    def __init__(self, up, blocks):
        self.up = up
        self.blocks = blocks


def _block(rng, width, cfg):
    return FuseSsmBlock(
        rng, width, expansion=cfg.expansion, state_size=cfg.state_size,
        conv_width=cfg.conv_width, dt_rank=cfg.dt_rank,
        no_spatial_ssm=cfg.no_spatial_ssm, no_channel_ssm=cfg.no_channel_ssm,
        no_gcn=cfg.no_gcn, no_cfm=cfg.no_cfm, no_identity=cfg.no_identity,
        channel_scan_bidirectional=cfg.channel_scan_bidirectional)


class DenoMambaModel(Module):
    """Single-channel image in, same-extent single-channel image out."""

    def __init__(self, config):
        config.validate()
        rng = np.random.default_rng(config.seed)
        k = config.stages
        self.config = config
        self.embed = Conv2d(rng, 1, config.enc_widths[0], 3)
        encoders = []
        for i in range(k):
            blocks = [_block(rng, config.enc_widths[i], config)
                      for _ in range(config.enc_blocks[i])]
            down = None
            if i < k - 1:
                down = Conv2d(rng, config.enc_widths[i], config.enc_widths[i + 1],
                              3, stride=2)
            encoders.append(EncoderStage(blocks, down))
        decoders = []
        for i in range(k):
            up = None
            if i < k - 1:
                in_w = config.enc_widths[-1] if i == 0 else config.dec_widths[i - 1]
                up = ConvTranspose2d(rng, in_w, config.dec_widths[i])
            blocks = [_block(rng, config.dec_widths[i], config)
                      for _ in range(config.dec_blocks[i])]
            decoders.append(DecoderStage(up, blocks))
        self.encoders = encoders
        self.decoders = decoders
        self.out_proj = Conv2d(rng, config.enc_widths[0], 1, 3)

    # -- forward pieces ----------------------------------------------------

    def check_extents(self, h, w):
        d = self.config.divisor
        if h % d or w % d:
            raise ConfigError(
                f"input extents {h}x{w} must be divisible by {d} for {self.config.stages} stages")

    def encoder_forward(self, x):
        """Embed and encode; returns (bottleneck, skips). skips[0] holds the
        embedding-level features, skips[k] the k-th stage pre-down output."""
        feats = self.embed(x)
        skips = [feats]
        h = feats
        for i, stage in enumerate(self.encoders):
            for blk in stage.blocks:
                h = blk(h)
            if stage.down is not None:
                skips.append(h)
                h = down(h, stage.down)
        return h, skips

    def decoder_forward(self, bottleneck, skips):
        k = self.config.stages
        if len(skips) != k:
            raise ShapeError(f"expected {k} skip maps, got {len(skips)}")
        h = bottleneck
        for i, stage in enumerate(self.decoders):
            if stage.up is not None:
                h = up(h, stage.up)
            skip = skips[k - 1 - i]
            if h.shape != skip.shape:
                raise ShapeError(f"decoder map {h.shape} cannot add skip {skip.shape} "
                                 f"at processing step {i}")
            h = ad.add(h, skip)
            for blk in stage.blocks:
                h = blk(h)
        return h

    def __call__(self, x):
        x = ad._lift(x)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"model expects a (B, 1, H, W) input, got {x.shape}")
        self.check_extents(x.shape[2], x.shape[3])
        bottleneck, skips = self.encoder_forward(x)
        return self.out_proj(self.decoder_forward(bottleneck, skips))

    forward = __call__


def down(x, conv):
    """Halve spatial extents, change width via the stage's stride-2 conv."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"down requires even spatial extents, got {x.shape}")
    return conv(x)


def up(x, deconv):
    """Double spatial extents, change width via a stride-2 transposed conv."""
    return deconv(x)


def build_model(config):
    return DenoMambaModel(config)


def param_count(model):
    return model.param_count()


# -- checkpoint format -------------------------------------------------------


def fnv1a64(data):
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def save_checkpoint(model, path):
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(cfg)), cfg]
    for _, p in model.named_parameters():
        parts.append(p.data.astype("<f8").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<Q", fnv1a64(payload)))


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20 or blob[:4] != CHECKPOINT_MAGIC:
        raise IntegrityError(f"{path}: not a model checkpoint (bad magic)")
    payload, checksum = blob[:-8], struct.unpack("<Q", blob[-8:])[0]
    if fnv1a64(payload) != checksum:
        raise IntegrityError(f"{path}: checksum mismatch, file is corrupted")
    version = struct.unpack("<I", payload[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    cfg_len = struct.unpack("<I", payload[8:12])[0]
    cfg = ModelConfig.from_dict(json.loads(payload[12:12 + cfg_len].decode()))
    model = DenoMambaModel(cfg)
    raw = payload[12 + cfg_len:]
    offset = 0
    for name, p in model.named_parameters():
        nbytes = p.data.size * 8
        if offset + nbytes > len(raw):
            raise IntegrityError(f"{path}: parameter stream truncated at {name}")
        p.data = np.frombuffer(raw[offset:offset + nbytes], dtype="<f8").reshape(
            p.data.shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise IntegrityError(f"{path}: {len(raw) - offset} trailing parameter bytes")
    return model

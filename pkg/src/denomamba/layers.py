"""Parameter-carrying layers on top of the autodiff ops.

Initialization convention: weights uniform in +/- 1/sqrt(fan_in), biases
zero, normalization gamma/beta at 1/0, all drawn from a generator threaded
through construction so a model built twice from the same seed is
bit-identical.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_fan_in(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal container: children discovered by attribute order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{key}.{i}", item

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Conv2d(Module):
    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, groups=1, same=True):
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = Tensor(uniform_fan_in(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.groups = groups
        self.same = same
        self.kernel = kernel

    def __call__(self, x):
        if self.same and self.stride == 1:
            return ad.conv2d_same(x, self.weight, self.bias, groups=self.groups)
        pad = (self.kernel - 1) // 2 if self.same else 0
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride,
                         padding=pad, groups=self.groups)


class ConvTranspose2d(Module):
    def __init__(self, rng, in_ch, out_ch, kernel=3, stride=2):
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(uniform_fan_in(rng, (in_ch, out_ch, kernel, kernel), fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride

    def __call__(self, x):
        return ad.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class ChannelLinear(Module):
    """Learnable linear map applied at every spatial position."""

    def __init__(self, rng, in_f, out_f):
        self.weight = Tensor(uniform_fan_in(rng, (out_f, in_f), in_f), requires_grad=True)
        self.bias = Tensor(np.zeros(out_f), requires_grad=True)

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels, eps=1e-6):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)

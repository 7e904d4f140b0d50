"""Small layer library on top of :mod:`condnoise.tensor`.

Parameters are initialised from a generator keyed by ``(seed, name)``, so
two models that share a parameter name start from the same values.
"""
from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .tensor import Parameter


class Module:
    """Container that discovers Parameters and sub-Modules by attribute."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def finalize(self, seed: int = 0):
        """Assign dotted names and draw initial values."""
        for name, p in self.named_parameters():
            p.name = name
            if p.init is not None:
                rng = np.random.Generator(np.random.Philox(key=[int(seed), zlib.crc32(name.encode())]))
                p.data = np.asarray(p.init(rng, p.data.shape), dtype=np.float64)
        return self

    def state_dict(self) -> dict:
        return {n: p for n, p in self.named_parameters()}

    def load_state(self, arrays: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.data.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def uniform_fan_in(fan_in: int, gain: float = 1.0):
    bound = gain / np.sqrt(max(fan_in, 1))
    return lambda rng, shape: rng.uniform(-bound, bound, shape)


def zeros(rng, shape):
    return np.zeros(shape)


def ones(rng, shape):
    return np.ones(shape)


class Conv1x1(Module):
    def __init__(self, cin, cout, bias=True):
        self.weight = Parameter(np.zeros((cout, cin)), init=uniform_fan_in(cin))
        self.bias = Parameter(np.zeros(cout), init=zeros) if bias else None

    def __call__(self, x):
        return T.conv1x1(x, self.weight, self.bias)


class DepthwiseConv3x3(Module):
    def __init__(self, channels, bias=True):
        self.weight = Parameter(np.zeros((channels, 3, 3)), init=uniform_fan_in(9))
        self.bias = Parameter(np.zeros(channels), init=zeros) if bias else None

    def __call__(self, x):
        return T.depthwise_conv3x3(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, bias=True):
        self.stride = stride
        self.weight = Parameter(np.zeros((cout, cin, k, k)), init=uniform_fan_in(cin * k * k))
        self.bias = Parameter(np.zeros(cout), init=zeros) if bias else None

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride)


class Linear(Module):
    def __init__(self, fin, fout, bias=True):
        self.weight = Parameter(np.zeros((fout, fin)), init=uniform_fan_in(fin))
        self.bias = Parameter(np.zeros(fout), init=zeros) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    """Per-pixel normalization across channels."""

    def __init__(self, channels):
        self.weight = Parameter(np.ones(channels), init=ones)
        self.bias = Parameter(np.zeros(channels), init=zeros)

    def __call__(self, x):
        return T.layer_norm_channels(x, self.weight, self.bias)

"""Parameter containers and the small set of layers the codec is built from."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Parameter


class Module:
    """Holds named parameters and child modules.

    Parameter names are dotted paths (``entropy.slice0.dca.wq.weight``),
    unique within a model and independent of construction order.
    """

    def __init__(self):
        self._params = {}
        self._children = {}

    def add_param(self, name, value):
        p = Parameter(name, np.asarray(value, dtype=np.float32))
        self._params[name] = p
        return p

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast every parameter in place (float64 for verification)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


# Uniform bound multiplier that keeps activation variance roughly constant
# through GELU stacks; used by the autoencoder so latents start well above
# the unit quantization step.
HE_GAIN = math.sqrt(6.0)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, gain=1.0):
        super().__init__()
        bound = gain / math.sqrt(c_in * kernel * kernel)
        self.weight = self.add_param("weight", _uniform(rng, bound, (c_out, c_in, kernel, kernel)))
        self.bias = self.add_param("bias", _uniform(rng, bound, (c_out,)))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, gain=1.0):
        super().__init__()
        # fan-in of each output pixel for stride-2 up-sampling is c_in * (k/s)^2
        bound = gain / math.sqrt(c_in * max(1, (kernel // stride) ** 2))
        self.weight = self.add_param("weight", _uniform(rng, bound, (c_in, c_out, kernel, kernel)))
        self.bias = self.add_param("bias", _uniform(rng, bound, (c_out,)))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return T.conv2d_transpose(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    """Per-position channel map on NCHW tensors (a 1x1 convolution)."""

    def __init__(self, rng, c_in, c_out, bias=True):
        super().__init__()
        bound = 1.0 / math.sqrt(c_in)
        self.weight = self.add_param("weight", _uniform(rng, bound, (c_in, c_out)))
        self.bias = self.add_param("bias", _uniform(rng, bound, (c_out,))) if bias else None

    def forward(self, x):
        return T.channel_linear(x, self.weight, self.bias)

    def rows(self, x):
        return T.linear(x, self.weight, self.bias)


class DWConv3x3(Module):
    def __init__(self, rng, channels):
        super().__init__()
        bound = 1.0 / 3.0
        self.weight = self.add_param("weight", _uniform(rng, bound, (channels, 1, 3, 3)))
        self.bias = self.add_param("bias", _uniform(rng, bound, (channels,)))

    def forward(self, x):
        return T.dwconv3x3(x, self.weight, self.bias)

"""Layer objects holding parameters for the functional ops."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Minimal container: parameters, buffers and child modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def name_parameters(self, prefix: str = ""):
        """Stamp each parameter's ``name`` with its dotted path (used by Adam and checkpoints)."""
        for name, p in self.named_parameters(prefix):
            p.name = name

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        sd = OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())
        sd.update((n, b.copy()) for n, b in self.named_buffers())
        return sd

    def load_state_dict(self, sd, strict: bool = True):
        own_p = dict(self.named_parameters())
        own_b = dict(self.named_buffers())
        missing = [k for k in list(own_p) + list(own_b) if k not in sd]
        unexpected = [k for k in sd if k not in own_p and k not in own_b]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for k, v in sd.items():
            if k in own_p:
                own_p[k].data = v
            elif k in own_b:
                buf = own_b[k]
                if buf.shape != np.shape(v):
                    raise ValueError(f"buffer {k!r} shape mismatch")
                buf[...] = v

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, shape, bound, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, padding=None, dilation=1, bias=True, dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out, self.k, self.dilation = c_in, c_out, k, dilation
        self.padding = dilation * (k - 1) // 2 if padding is None else padding
        bound = 1.0 / math.sqrt(c_in * k * k)
        self.weight = Tensor(_uniform(rng, (c_out, c_in, k, k), bound, dtype), requires_grad=True)
        if bias:
            self.bias = Tensor(_uniform(rng, (c_out,), bound, dtype), requires_grad=True)
        else:
            self.bias = None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, padding=self.padding, dilation=self.dilation)


class DeformConv2d(Module):
    """Deformable KxK convolution whose offsets come from a zero-initialised 3x3 conv."""

    def __init__(self, c_in, c_out, k, rng, dtype=np.float32):
        super().__init__()
        self.k = k
        self.padding = (k - 1) // 2
        self.conv = Conv2d(c_in, c_out, k, rng, dtype=dtype)
        self.offset = Conv2d(c_in, 2 * k * k, 3, rng, dtype=dtype)
        self.offset.weight.data = np.zeros_like(self.offset.weight.data)
        self.offset.bias.data = np.zeros_like(self.offset.bias.data)

    def forward(self, x):
        off = self.offset(x)
        return ops.deform_conv2d(x, self.conv.weight, self.conv.bias, off, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, rng, stride=2, dtype=np.float32):
        super().__init__()
        self.stride = stride
        bound = 1.0 / math.sqrt(c_out * stride * stride)
        self.weight = Tensor(_uniform(rng, (c_in, c_out, stride, stride), bound, dtype), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (c_out,), bound, dtype), requires_grad=True)

    def forward(self, x):
        return ops.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm2d(Module):
    def __init__(self, c, dtype=np.float32, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.register_buffer("running_var", np.ones(c, dtype=dtype))

    def forward(self, x):
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               self.training, self.momentum, self.eps)

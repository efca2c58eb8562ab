"""Minimal parameter-tree containers and convolution layers.

Modules exist to give the network a stable, named enumeration of its
parameters (checkpointing, the optimizer, and the parameter-count oracle all
rely on that order). Initialization is uniform in +/- sqrt(1/fan_in), drawn
from the generator handed to each layer, so a single seed reproduces a
network bit for bit.
"""

from __future__ import annotations

import numpy as np

from . import convops
from .tensor import Parameter


class Module:
    """Container tracking Parameters and sub-modules in insertion order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_mods", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._mods[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._mods.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module):
        setattr(self, str(len(self._items)), mod)
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Parameter:
    bound = float(np.sqrt(1.0 / max(fan_in, 1)))
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))


def _ktuple(k, nd):
    return (k,) * nd if isinstance(k, int) else tuple(k)


class _ConvBase(Module):
    nd = None
    transposed = False

    def __init__(self, cin, cout, kernel, *, rng, dtype, stride=1, padding=0,
                 output_padding=0, groups=1, bias=True):
        super().__init__()
        k = _ktuple(kernel, self.nd)
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        self.groups = groups
        if self.transposed:
            wshape = (cin, cout // groups) + k
        else:
            wshape = (cout, cin // groups) + k
        fan_in = wshape[1] * int(np.prod(k))
        self.weight = uniform_init(rng, wshape, fan_in, dtype)
        self.bias = uniform_init(rng, (cout,), fan_in, dtype) if bias else None

    def __call__(self, x):
        if self.transposed:
            fn = convops.transpose_conv3d if self.nd == 3 else convops.transpose_conv2d
            return fn(x, self.weight, self.bias, self.stride, self.padding,
                      self.output_padding, self.groups)
        fn = convops.conv3d if self.nd == 3 else convops.conv2d
        return fn(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Conv3d(_ConvBase):
    nd = 3


class Conv2d(_ConvBase):
    nd = 2


class ConvTranspose3d(_ConvBase):
    nd = 3
    transposed = True


class ConvTranspose2d(_ConvBase):
    nd = 2
    transposed = True

"""Parameter containers: Module base class plus the standard layers.

Modules register child modules and parameters automatically via attribute
assignment. All random init happens through an explicit ``numpy.random.Generator``
passed to constructors, in construction order, so a fixed seed pins every weight.
"""

import numpy as np

from ..errors import ConfigurationError, DimensionError
from . import functional as F
from .tensor import Tensor


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) resampled until within 2 std (rejection, deterministic)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.requires_grad = bool(flag)

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        """Strict load: unknown and missing names are both errors."""
        own = dict(self.named_parameters())
        unknown = sorted(set(state) - set(own))
        missing = sorted(set(own) - set(state))
        if unknown or missing:
            raise ConfigurationError(
                f"state dict mismatch: unknown={unknown} missing={missing}"
            )
        for name, arr in state.items():
            p = own[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ConfigurationError(
                    f"state dict shape mismatch at {name}: {arr.shape} vs {p.shape}"
                )
            p.data = np.asarray(arr, dtype=p.data.dtype).copy()

    def copy_from(self, other):
        """Copy parameter values from a same-architecture module."""
        self.load_state_dict(other.state_dict())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, mods):
        super().__init__()
        self._items = []
        for i, m in enumerate(mods):
            setattr(self, str(i), m)
            self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """y = x @ W + b with W (din, dout)."""

    def __init__(self, din, dout, rng, bias=True, init="trunc", std=0.02):
        super().__init__()
        if init == "identity":
            if din != dout:
                raise DimensionError(f"identity init needs square weight, got {din}x{dout}")
            w = np.eye(din, dtype=np.float32) + trunc_normal(rng, (din, dout), std)
        elif init == "zeros":
            w = np.zeros((din, dout), dtype=np.float32)
        else:
            w = trunc_normal(rng, (din, dout), std)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(dout, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        y = F.matmul(x, self.weight)
        if self.bias is not None:
            y = F.add(y, F.reshape(self.bias, (1,) * (y.ndim - 1) + (-1,)))
        return y


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, pad=0, bias=True, std=0.02):
        super().__init__()
        self.stride = stride
        self.pad = pad
        self.weight = Tensor(trunc_normal(rng, (cout, cin, k, k), std), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        y = F.conv2d(x, self.weight, stride=self.stride, pad=self.pad)
        if self.bias is not None:
            y = F.add(y, F.reshape(self.bias, (1, -1, 1, 1)))
        return y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def forward(self, x):
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class GroupNorm(Module):
    def __init__(self, num_groups, channels, eps=1e-5):
        super().__init__()
        self.num_groups = num_groups
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)

    def forward(self, x):
        return F.group_norm(x, self.num_groups, self.gamma, self.beta, self.eps)

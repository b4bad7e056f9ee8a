"""Module containers and the layers built on :mod:`mgic.ops`."""

import math
import threading
from collections import OrderedDict

import numpy as np

from . import ops
from .autograd import Parameter, Tensor, relu
from .errors import ConfigurationError, DimensionError

__all__ = [
    "Module",
    "Sequential",
    "ModuleList",
    "Conv2d",
    "BatchNorm2d",
    "Linear",
    "ReLU",
    "MaxPool2d",
    "AvgPool2d",
    "GlobalAvgPool",
    "kaiming_uniform",
]


class _Scope(threading.local):
    def __init__(self):
        self.stack = None


_scope = _Scope()


def current_module_stack():
    """Modules whose forward is executing, outermost first (None when not tracked)."""
    return _scope.stack


class track_modules:
    """Context manager enabling the module call stack used by profilers."""

    def __enter__(self):
        self._prev = _scope.stack
        _scope.stack = []
        return _scope.stack

    def __exit__(self, *exc):
        _scope.stack = self._prev
        return False


def kaiming_uniform(rng, shape, fan_in, dtype):
    """Uniform(-b, b) with b = sqrt(6 / fan_in), the relu-gain Kaiming bound."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Tree of layers owning named parameters and buffers.

    Attributes that are :class:`Parameter` or :class:`Module` instances are
    registered automatically in assignment order; ``register_buffer`` adds a
    plain array (running statistics).  Names use ``/`` as separator.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key, array):
        self._buffers[key] = key
        object.__setattr__(self, key, array)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        stack = _scope.stack
        if stack is None:
            return self.forward(*args, **kwargs)
        stack.append(self)
        try:
            return self.forward(*args, **kwargs)
        finally:
            stack.pop()

    # -- traversal --------------------------------------------------------------
    def named_modules(self, prefix=""):
        yield prefix, self
        for key, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}/{key}" if prefix else key)

    def modules(self):
        return [m for _, m in self.named_modules()]

    def named_parameters(self, prefix=""):
        for path, mod in self.named_modules(prefix):
            for key, p in mod._params.items():
                yield (f"{path}/{key}" if path else key), p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for path, mod in self.named_modules(prefix):
            for key in mod._buffers:
                yield (f"{path}/{key}" if path else key), getattr(mod, key)

    def assign_names(self, prefix=""):
        """Store each parameter's path on the parameter and check uniqueness."""
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ConfigurationError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name
        return self

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    # -- state ------------------------------------------------------------------
    def train(self, mode=True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())
        state.update((n, b.copy()) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise ConfigurationError(
                f"state mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}"
            )
        for name, value in state.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != np.shape(value):
                raise DimensionError(f"{name}: shape {np.shape(value)} != {target.shape}")
            target[...] = value

    def astype(self, dtype):
        """Cast every parameter and buffer in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for mod in self.modules():
            for key in mod._buffers:
                object.__setattr__(mod, key, getattr(mod, key).astype(dtype))
        return self


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return list(self._modules.values())[i]

    def forward(self, x):
        for layer in self._modules.values():
            x = layer(x)
        return x


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._modules)), module)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return list(self._modules.values())[i]


class Conv2d(Module):
    """Grouped 2-D convolution with Kaiming-uniform weights."""

    def __init__(self, c_in, c_out, kernel_size, stride=1, padding=0, groups=1,
                 bias=False, rng=None, dtype=np.float32):
        super().__init__()
        if groups < 1 or c_in % groups or c_out % groups:
            raise ConfigurationError(
                f"groups={groups} must divide c_in={c_in} and c_out={c_out}"
            )
        if stride < 1 or padding < 0:
            raise ConfigurationError(f"invalid stride={stride} / padding={padding}")
        rng = rng if rng is not None else np.random.default_rng()
        self.c_in, self.c_out = c_in, c_out
        self.kernel_size, self.stride, self.padding, self.groups = kernel_size, stride, padding, groups
        fan_in = (c_in // groups) * kernel_size * kernel_size
        shape = (c_out, c_in // groups, kernel_size, kernel_size)
        self.weight = Parameter(kaiming_uniform(rng, shape, fan_in, dtype), decay=True)
        self.bias = None
        if bias:
            b = 1.0 / math.sqrt(fan_in)
            self.bias = Parameter(rng.uniform(-b, b, size=c_out).astype(dtype))

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise DimensionError(f"conv expects {self.c_in} channels, got {x.shape[1]}")
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def param_count(self):
        """c_out * (c_in / g) * k * k, plus c_out with a bias."""
        n = self.c_out * (self.c_in // self.groups) * self.kernel_size**2
        return n + (self.c_out if self.bias is not None else 0)

    def __repr__(self):
        return (f"Conv2d({self.c_in}, {self.c_out}, k={self.kernel_size}, "
                f"stride={self.stride}, pad={self.padding}, groups={self.groups})")


class BatchNorm2d(Module):
    """Batch normalization over the channel axis of rank-2 or rank-4 input."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise DimensionError(f"batch norm expects {self.channels} channels, got {x.shape[1]}")
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, c_in, c_out, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.c_in, self.c_out = c_in, c_out
        # plain fan-in bound (gain 1): linear layers here feed losses, not relus
        bound = 1.0 / math.sqrt(c_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (c_out, c_in)).astype(dtype), decay=True)
        self.bias = Parameter(rng.uniform(-bound, bound, c_out).astype(dtype)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x):
        return relu(x)


class MaxPool2d(Module):
    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel, self.stride = kernel, stride or kernel

    def forward(self, x):
        return ops.max_pool2d(x, self.kernel, self.stride)


class AvgPool2d(Module):
    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel, self.stride = kernel, stride or kernel

    def forward(self, x):
        return ops.avg_pool2d(x, self.kernel, self.stride)


class GlobalAvgPool(Module):
    def forward(self, x):
        return ops.global_avg_pool(x)


def as_input(x, dtype=np.float32):
    """Wrap arrays as constant tensors; tensors pass through."""
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))

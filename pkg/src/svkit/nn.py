"""Parameter containers and the small layer set the models are built from."""

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .exceptions import ConfigError, DimensionError, FormatError
from .io import read_container, write_container


class ParameterSet(dict):
    """Ordered ``name -> Tensor`` map holding weights and running statistics."""

    def trainable(self):
        return [(name, t) for name, t in self.items() if t.requires_grad]

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def arrays(self):
        return {name: t.data for name, t in self.items()}

    def save(self, path, header=None, extra=None):
        arrays = self.arrays()
        for name, array in (extra or {}).items():
            if name in arrays:
                raise FormatError(f"extra record {name!r} collides with a parameter")
            arrays[name] = array
        write_container(path, arrays, header)

    @classmethod
    def from_arrays(cls, arrays, trainable_names=None):
        out = cls()
        for name, array in arrays.items():
            grad = trainable_names is None or name in trainable_names
            out[name] = Tensor(array, requires_grad=grad, dtype=array.dtype)
        return out

    @classmethod
    def load(cls, path):
        header, arrays = read_container(path)
        return cls.from_arrays(arrays), header


class Module:
    """Base class collecting tensors from attributes in definition order."""

    def named_tensors(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_tensors(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{prefix}{name}.{i}.")

    def parameters(self):
        params = ParameterSet()
        for name, t in self.named_tensors():
            if name in params:
                raise ConfigError(f"duplicate parameter name {name}")
            params[name] = t
        return params

    def load_parameters(self, source):
        """Copy values from ``source`` (ParameterSet or name -> array) in place."""
        own = self.parameters()
        missing = set(own) - set(source)
        unexpected = set(source) - set(own)
        if missing or unexpected:
            raise FormatError(
                f"parameter names differ: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}"
            )
        for name, t in own.items():
            value = source[name]
            value = value.data if isinstance(value, Tensor) else np.asarray(value)
            if value.shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} vs model {t.shape}")
            t.data[...] = value

    def n_parameters(self):
        return sum(t.size for _, t in self.parameters().trainable())


class Linear(Module):
    """Affine map ``x @ weight + bias`` over the last axis."""

    def __init__(self, n_in, n_out, rng, bias=True, init_scale=1.0):
        limit = init_scale * np.sqrt(6.0 / (n_in + n_out))
        dtype = ag.get_default_dtype()
        self.weight = Tensor(rng.uniform(-limit, limit, (n_in, n_out)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        y = ag.matmul(x, self.weight)
        return y if self.bias is None else ag.add(y, self.bias)


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        dtype = ag.get_default_dtype()
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))
        self.num_batches_tracked = Tensor(np.zeros(1, dtype=dtype))
        self._momentum = momentum
        self._eps = eps

    def __call__(self, x, training, mask=None):
        out = ag.batch_norm(
            x,
            self.weight,
            self.bias,
            self.running_mean.data,
            self.running_var.data,
            training,
            momentum=self._momentum,
            eps=self._eps,
            mask=mask,
            fitted=self.num_batches_tracked.data[0] > 0,
        )
        if training:
            self.num_batches_tracked.data += 1
        return out

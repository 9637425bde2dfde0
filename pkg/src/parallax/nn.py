"""Parameter containers and initialisers used by the model modules."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from parallax import tensor as T
from parallax.tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within ``bound`` standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return (z * std).astype(np.float32)


def parameter(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float32), requires_grad=True)


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used for the float64 gradient-check path)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng=None, bias: bool = True, std: float = 0.02):
        if rng is None:
            self.weight = parameter(np.zeros((d_in, d_out)))
        else:
            self.weight = parameter(trunc_normal(rng, (d_in, d_out), std))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, bias: bool = True, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim)) if bias else None
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, pad: int = 0, rng=None,
                 std: float = 0.02):
        shape = (c_out, c_in, k, k)
        self.weight = parameter(np.zeros(shape) if rng is None else rng.normal(0.0, std, shape))
        self.bias = parameter(np.zeros(c_out))
        self.stride = stride
        self.pad = pad

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)

"""Small neural-network building blocks on top of the autodiff tape.

Parameters are plain named float64 arrays. Modules hold parameters and
submodules as attributes; ``named_parameters`` walks them in attribute
insertion order, which keeps checkpoint layouts and optimizer iteration
deterministic.

Weight and bias initialization is uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]
from an explicit RNG. Output layers of density-producing networks are often
zero-initialized so a fresh model starts as an identity flow over a standard
normal base; callers opt into that via ``zero_init``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter:
    """A named trainable array."""

    __slots__ = ("name", "data")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.asarray(data, dtype=np.float64)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def bind(param: Parameter, tape: ad.Tape | None) -> Tensor:
    """Parameter view for one forward pass; a constant when tape is None."""
    if tape is None:
        return Tensor(param.data)
    return tape.watch(param)


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class providing recursive, deterministic parameter discovery."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out: list[tuple[str, Parameter]] = []
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}" if prefix else attr
            if isinstance(value, Parameter):
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix=name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        out.append((f"{name}.{i}", item))
                    elif isinstance(item, Module):
                        out.extend(item.named_parameters(prefix=f"{name}.{i}."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        missing = sorted(set(named) - set(state))
        unexpected = sorted(set(state) - set(named))
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={missing}, unexpected={unexpected}")
        for name, p in named.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ad.ShapeError(
                    f"parameter {name!r}: expected shape {p.data.shape}, got {arr.shape}")
            p.data[...] = arr


class Linear(Module):
    """Affine map x @ W + b with W of shape (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            w = np.zeros((in_features, out_features))
            b = np.zeros(out_features)
        else:
            w = uniform_init(rng, in_features, (in_features, out_features))
            b = uniform_init(rng, in_features, (out_features,))
        self.weight = Parameter("weight", w)
        self.bias = Parameter("bias", b) if bias else None

    def __call__(self, tape: ad.Tape | None, x: Tensor) -> Tensor:
        y = ad.matmul(x, bind(self.weight, tape))
        if self.bias is not None:
            y = ad.add(y, bind(self.bias, tape))
        return y


class MLP(Module):
    """Stack of Linear layers with tanh between them."""

    def __init__(self, dims: list[int], rng: np.random.Generator,
                 zero_init_last: bool = False, activation: str = "tanh"):
        if len(dims) < 2:
            raise ValueError(f"MLP needs at least input and output dims, got {dims}")
        self.dims = list(dims)
        self.activation = activation
        self.layers = [
            Linear(dims[i], dims[i + 1], rng,
                   zero_init=(zero_init_last and i == len(dims) - 2))
            for i in range(len(dims) - 1)
        ]

    def __call__(self, tape: ad.Tape | None, x: Tensor) -> Tensor:
        act = ad.tanh if self.activation == "tanh" else ad.relu
        h = x
        for layer in self.layers[:-1]:
            h = act(layer(tape, h))
        return self.layers[-1](tape, h)


class MaskedLinear(Module):
    """Linear layer whose weight is elementwise-multiplied by a fixed 0/1 mask."""

    def __init__(self, in_features: int, out_features: int, mask: np.ndarray,
                 rng: np.random.Generator, zero_init: bool = False):
        if mask.shape != (in_features, out_features):
            raise ad.ShapeError(
                f"mask shape {mask.shape} does not match ({in_features}, {out_features})")
        self.mask = np.asarray(mask, dtype=np.float64)
        if zero_init:
            w = np.zeros((in_features, out_features))
            b = np.zeros(out_features)
        else:
            w = uniform_init(rng, in_features, (in_features, out_features))
            b = uniform_init(rng, in_features, (out_features,))
        self.weight = Parameter("weight", w)
        self.bias = Parameter("bias", b)

    def __call__(self, tape: ad.Tape | None, x: Tensor) -> Tensor:
        w = ad.mul(bind(self.weight, tape), Tensor(self.mask))
        return ad.add(ad.matmul(x, w), bind(self.bias, tape))


class LayerNorm(Module):
    """Normalization over the last axis with learned gain and shift."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.gain = Parameter("gain", np.ones(dim))
        self.shift = Parameter("shift", np.zeros(dim))

    def __call__(self, tape: ad.Tape | None, x: Tensor) -> Tensor:
        mu = ad.mean_(x, axis=-1, keepdims=True)
        centered = ad.sub(x, mu)
        var = ad.mean_(ad.mul(centered, centered), axis=-1, keepdims=True)
        inv = ad.div(Tensor(1.0), ad.sqrt(ad.add(var, Tensor(self.eps))))
        y = ad.mul(centered, inv)
        return ad.add(ad.mul(y, bind(self.gain, tape)), bind(self.shift, tape))

"""Parameter containers and the small set of layers the networks are built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Collects :class:`Tensor` parameters from attributes, lists and child modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(f"{prefix}{name}", value)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for k, p in params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k}")
            if tuple(state[k].shape) != p.shape:
                raise ValueError(f"parameter {k}: shape {tuple(state[k].shape)} != expected {p.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _walk(name: str, value) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(f"{name}.{i}", v)


def param(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, scale: float | None = None):
        scale = np.sqrt(1.0 / max(n_in, 1)) if scale is None else scale
        self.weight = param(rng.uniform(-scale, scale, size=(n_in, n_out)))
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1, pad: int = 0):
        scale = np.sqrt(1.0 / (c_in * k * k))
        self.weight = param(rng.uniform(-scale, scale, size=(c_out, c_in, k, k)))
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm_lastdim(x, self.gain, self.bias)


class ChannelNorm(LayerNorm):
    """LayerNorm over channels of a C x H x W map, per pixel."""

    def __call__(self, x: Tensor) -> Tensor:
        y = T.layer_norm_lastdim(T.transpose(x, (1, 2, 0)), self.gain, self.bias)
        return T.transpose(y, (2, 0, 1))


class MLP(Module):
    """Stack of Linear layers with silu between them (none after the last)."""

    def __init__(self, widths: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.silu(x)
        return x


def positional_encoding(x: np.ndarray, n_freqs: int) -> np.ndarray:
    """[x, sin(2^k x), cos(2^k x)] for k < n_freqs, width 3 + 6*n_freqs."""
    x = np.asarray(x)
    arg = x[..., None, :] * (2.0 ** np.arange(n_freqs, dtype=x.dtype))[:, None]
    sc = np.stack([np.sin(arg), np.cos(arg)], axis=-2).reshape(*x.shape[:-1], 6 * n_freqs)
    return np.concatenate([x, sc], axis=-1)

"""Parameter containers and the two dense building blocks (Linear, Conv2d)."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d, get_default_dtype


def param(shape, rng: np.random.Generator, scale: float | None = None, fan_in: int | None = None) -> Tensor:
    """He-style normal init; ``scale=0`` gives zeros."""
    if scale is None:
        fan_in = fan_in or (int(np.prod(shape[1:])) if len(shape) > 1 else shape[0])
        scale = np.sqrt(2.0 / max(fan_in, 1))
    data = rng.standard_normal(shape) * scale if scale else np.zeros(shape)
    return Tensor(data.astype(get_default_dtype()), requires_grad=True)


class Module:
    """Walks attributes (including lists/dicts of modules) to find parameters."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            yield from _walk(val, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(val, name):
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(val, dict):
        for k, v in val.items():
            yield from _walk(v, f"{name}.{k}")


class Linear(Module):
    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param((f_in, f_out), rng, fan_in=f_in)
        self.bias = param((f_out,), rng, scale=0.0) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            y = (x.reshape(1, -1) @ self.weight).reshape(-1)
        else:
            y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, bias: bool = True):
        if k not in (1, 3):
            raise ValueError("kernel size must be 1 or 3")
        self.weight = param((c_out, c_in, k, k), rng)
        self.bias = param((c_out,), rng, scale=0.0) if bias else None
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride)

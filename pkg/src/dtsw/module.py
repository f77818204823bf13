"""Parameter containers."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, layer_norm, linear


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Walks attributes to collect parameters by dotted name."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, std: float = 0.02, fan_in: bool = False):
        if fan_in:
            bound = 1.0 / np.sqrt(d_in)
            self.w = param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        else:
            self.w = param(trunc_normal(rng, (d_in, d_out), std))
        self.b = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class PatchEmbed(Linear):
    """Linear patch embedding with the default convolution init: weights and
    bias uniform in +-1/sqrt(fan_in). A nonzero bias keeps the intensity of a
    flat patch visible after the following LayerNorm."""

    def __init__(self, rng, d_in: int, d_out: int):
        bound = 1.0 / np.sqrt(d_in)
        self.w = param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.b = param(rng.uniform(-bound, bound, size=d_out))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

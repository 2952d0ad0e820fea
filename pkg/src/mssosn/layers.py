"""Parameter initialisation and the dense layer shared by the heads."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .rng import SplitMix64


def glorot(rng: SplitMix64, shape, fan_in: int, fan_out: int) -> ad.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return ad.Tensor(rng.uniform(shape, -bound, bound), requires_grad=True)


def zeros(shape) -> ad.Tensor:
    return ad.Tensor(np.zeros(shape), requires_grad=True)


def conv_weight(rng: SplitMix64, out_ch: int, in_ch: int, k: int = 3) -> ad.Tensor:
    return glorot(rng, (out_ch, in_ch, k, k), in_ch * k * k, out_ch * k * k)


class Dense:
    def __init__(self, rng: SplitMix64, n_in: int, n_out: int):
        self.weight = glorot(rng, (n_in, n_out), n_in, n_out)
        self.bias = zeros((n_out,))

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def params(self, prefix: str) -> dict[str, ad.Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

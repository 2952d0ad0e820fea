"""Self-supervised scale heads: scale discriminator (SD) and discrepancy discriminator (DD)."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError
from .layers import Dense
from .relation import PairNet, stack_pair
from .rng import SplitMix64


class ScaleDiscriminator:
    """Three dense layers over the vectorised 64x64 feature: 4096 -> h1 -> h2 -> S."""

    def __init__(self, rng: SplitMix64, scales: int, in_dim: int = 64 * 64,
                 hidden: Sequence[int] = (256, 64)):
        self.in_dim = in_dim
        self.scales = scales
        dims = [in_dim, *hidden, scales]
        self.layers = [Dense(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def params(self) -> dict[str, ad.Tensor]:
        out = {}
        for i, layer in enumerate(self.layers, start=1):
            out.update(layer.params(f"sd.fc{i}"))
        return out

    def __call__(self, psi_vec: ad.Tensor) -> ad.Tensor:
        return sd_predict(psi_vec, self)


def sd_predict(psi_vec: ad.Tensor, sd: ScaleDiscriminator) -> ad.Tensor:
    """(B, 4096) or (4096,) vectorised features -> (B, S) or (S,) logits."""
    if psi_vec.shape[-1] != sd.in_dim or psi_vec.ndim not in (1, 2):
        raise DimensionError(f"sd_predict: expected length-{sd.in_dim} vectors, got {psi_vec.shape}")
    single = psi_vec.ndim == 1
    h = ad.reshape(psi_vec, (1, sd.in_dim)) if single else psi_vec
    for layer in sd.layers[:-1]:
        h = ad.relu(layer(h))
    h = sd.layers[-1](h)
    return ad.reshape(h, (sd.scales,)) if single else h


def cross_entropy(logits: ad.Tensor, labels) -> ad.Tensor:
    """Summed negative log-softmax of the labelled entries of (B, K) logits."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, k = logits.shape
    if labels.shape[0] != b or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ContractError(f"cross_entropy: labels {labels} do not index {logits.shape} logits")
    # the shift is a constant: log-sum-exp gradients do not depend on it
    z = ad.sub(logits, logits.data.max(axis=1, keepdims=True))
    lse = ad.log(ad.sum(ad.exp(z), axis=1, keepdims=True))
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    return ad.scalar_mul(ad.sum(ad.mul(ad.sub(z, lse), onehot)), -1.0)


def sd_loss(logits: ad.Tensor, scale_index) -> ad.Tensor:
    """Cross-entropy of (B, S) logits against 1-based scale indices."""
    return cross_entropy(logits, np.asarray(scale_index) - 1)


def discrepancy_label(s: int, s_star: int) -> int:
    """Scale gap label s - s* + 1 of a support/query pair."""
    return s - s_star + 1


def discrepancy_class(s: int, s_star: int, scales: int) -> int:
    """Class index in [0, 2S-2]: the gap label shifted by S - 2 so it is never negative."""
    if not (1 <= s <= scales and 1 <= s_star <= scales):
        raise ContractError(f"scale indices ({s}, {s_star}) outside 1..{scales}")
    return discrepancy_label(s, s_star) + scales - 2


class DiscrepancyDiscriminator(PairNet):
    """Same layout as the similarity network, emitting 2S-1 discrepancy logits."""

    def __init__(self, rng: SplitMix64, scales: int, size: int = 64, channels: int = 64, hidden: int = 8):
        super().__init__(rng, "dd", size=size, channels=channels, hidden=hidden, outputs=2 * scales - 1)
        self.scales = scales


def dd_predict(psi_i: ad.Tensor, psi_j: ad.Tensor, dd: DiscrepancyDiscriminator) -> ad.Tensor:
    """(d, d) pair -> (2S-1,) logits via the stacked form."""
    return ad.reshape(dd.forward_stacked(stack_pair(psi_i, psi_j)), (dd.outputs,))


def dd_loss(logits: ad.Tensor, classes) -> ad.Tensor:
    """Cross-entropy of (P, 2S-1) logits against discrepancy class indices."""
    return cross_entropy(logits, classes)

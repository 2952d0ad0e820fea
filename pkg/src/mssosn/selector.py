"""Gated scale attention over second-order features and its class-aware regulariser."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import DimensionError
from .relation import PairNet, relate


class ScaleSelector:
    """avgpool(8) -> avgpool(8) -> gain * x + bias -> sigmoid, one gate per 64x64 feature."""

    def __init__(self, gain: float = 1.0, bias: float = 0.0):
        self.gain = ad.Tensor(np.array([gain]), requires_grad=True)
        self.bias = ad.Tensor(np.array([bias]), requires_grad=True)

    def params(self) -> dict[str, ad.Tensor]:
        return {"selector.gain": self.gain, "selector.bias": self.bias}

    def __call__(self, psi: ad.Tensor) -> ad.Tensor:
        return select(psi, self)


def select(psi: ad.Tensor, sel: ScaleSelector) -> ad.Tensor:
    """(d, d) -> () gate, or (B, d, d) -> (B,) gates, each in (0, 1). Requires d = 64."""
    if psi.shape[-2:] != (64, 64) or psi.ndim not in (2, 3):
        raise DimensionError(f"select: expected (B, 64, 64) or (64, 64) features, got {psi.shape}")
    batch = psi.shape[:-2]
    x = ad.reshape(psi, (-1, 1, 64, 64))
    x = ad.avgpool(ad.avgpool(x, 8), 8)
    x = ad.reshape(x, (-1,))
    gate = ad.sigmoid(ad.add(ad.mul(x, sel.gain), sel.bias))
    return ad.reshape(gate, batch)


def gate_features(psi: ad.Tensor, gates: ad.Tensor) -> ad.Tensor:
    """Scale each (d, d) slice of (B, d, d) by its gate (B,)."""
    return ad.mul(psi, ad.reshape(gates, (gates.shape[0], 1, 1)))


def weighted_relate(psi_k: ad.Tensor, psi_q: ad.Tensor, sel: ScaleSelector, net: PairNet) -> ad.Tensor:
    """Relation score of a pair whose features are first multiplied by their own gates."""
    gk, gq = select(psi_k, sel), select(psi_q, sel)
    return relate(ad.mul(psi_k, gk), ad.mul(psi_q, gq), net)


def omega(w_support: ad.Tensor, w_query: ad.Tensor, support_labels, query_labels) -> ad.Tensor:
    """Sum over support x query pairs of +/- ||w_k - w_q||^2 (plus for same class).

    ``w_support`` is (K, S), ``w_query`` is (M, S).
    """
    k, s = w_support.shape
    m = w_query.shape[0]
    if w_query.shape[1] != s:
        raise DimensionError(f"omega: weight lengths {s} and {w_query.shape[1]} differ")
    diff = ad.sub(ad.reshape(w_support, (k, 1, s)), ad.reshape(w_query, (1, m, s)))
    dist = ad.sum(ad.square(diff), axis=2)
    same = np.asarray(support_labels)[:, None] == np.asarray(query_labels)[None, :]
    return ad.sum(ad.mul(dist, np.where(same, 1.0, -1.0)))


"""Similarity network over stacked pairs of second-order features, and the relation losses."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError
from .layers import Dense, conv_weight, zeros
from .rng import SplitMix64


INFERENCE_PAIRS = 64


class PairNet:
    """conv3x3(2->c)+relu+pool, conv3x3(c->c)+relu+pool, dense->hidden, relu, dense->outputs.

    The first convolution's kernel is stored as two single-channel halves,
    one per side of the pair.  Convolution is linear, so scoring a batch of
    pairs can convolve each feature once and add the halves per pair; the
    literal stacked form is kept in :meth:`forward_stacked`.
    """

    def __init__(self, rng: SplitMix64, name: str, size: int = 64, channels: int = 64,
                 hidden: int = 8, outputs: int = 1):
        if size % 4:
            raise DimensionError(f"pair network input size {size} must be divisible by 4")
        self.name = name
        self.size = size
        self.channels = channels
        self.outputs = outputs
        w1 = conv_weight(rng, channels, 2)
        self.w_support = ad.Tensor(w1.data[:, :1], requires_grad=True)
        self.w_query = ad.Tensor(w1.data[:, 1:], requires_grad=True)
        self.b1 = zeros((channels,))
        self.w2 = conv_weight(rng, channels, channels)
        self.b2 = zeros((channels,))
        self.fc1 = Dense(rng, channels * (size // 4) ** 2, hidden)
        self.fc2 = Dense(rng, hidden, outputs)

    def params(self) -> dict[str, ad.Tensor]:
        p = self.name
        out = {
            f"{p}.conv1.weight_support": self.w_support,
            f"{p}.conv1.weight_query": self.w_query,
            f"{p}.conv1.bias": self.b1,
            f"{p}.conv2.weight": self.w2,
            f"{p}.conv2.bias": self.b2,
        }
        out.update(self.fc1.params(f"{p}.fc1"))
        out.update(self.fc2.params(f"{p}.fc2"))
        return out

    def _check(self, psi: ad.Tensor) -> None:
        if psi.shape[-2:] != (self.size, self.size):
            raise DimensionError(f"{self.name}: expected {self.size}x{self.size} features, got {psi.shape}")

    def _trunk(self, h: ad.Tensor) -> ad.Tensor:
        h = ad.maxpool2x2(ad.relu(h))
        h = ad.maxpool2x2(ad.relu(ad.conv2d(h, self.w2, self.b2, pad=1)))
        h = ad.relu(self.fc1(ad.vectorize(h, keep=1)))
        return self.fc2(h)

    def forward_stacked(self, pairs: ad.Tensor) -> ad.Tensor:
        """(P, 2, d, d) stacked pairs -> (P, outputs) raw outputs."""
        if pairs.ndim != 4 or pairs.shape[1] != 2:
            raise DimensionError(f"{self.name}: expected (P, 2, d, d) pairs, got {pairs.shape}")
        self._check(pairs)
        w1 = ad.concat([self.w_support, self.w_query], axis=1)
        return self._trunk(ad.conv2d(pairs, w1, self.b1, pad=1))

    def forward_grid(self, left: ad.Tensor, right: ad.Tensor,
                     left_gate: ad.Tensor | None = None, right_gate: ad.Tensor | None = None) -> ad.Tensor:
        """All pairs of (A, d, d) x (B, d, d) -> (A*B, outputs), left-major.

        Optional gates (A,) / (B,) scale each feature before pairing.
        """
        self._check(left)
        self._check(right)
        a, b, d = left.shape[0], right.shape[0], self.size
        ca = ad.conv2d(ad.reshape(left, (a, 1, d, d)), self.w_support, pad=1)
        cb = ad.conv2d(ad.reshape(right, (b, 1, d, d)), self.w_query, pad=1)
        if left_gate is not None:
            ca = ad.mul(ca, ad.reshape(left_gate, (a, 1, 1, 1)))
        if right_gate is not None:
            cb = ad.mul(cb, ad.reshape(right_gate, (b, 1, 1, 1)))
        per = self.channels * d * d
        h = ad.add(ad.reshape(ca, (a, 1, per)), ad.reshape(cb, (1, b, per)))
        h = ad.add(ad.reshape(h, (a * b, self.channels, d, d)), ad.reshape(self.b1, (1, self.channels, 1, 1)))
        return self._trunk(h)


def stack_pair(psi_i: ad.Tensor, psi_j: ad.Tensor) -> ad.Tensor:
    """Concatenate two (d, d) features along a new leading mode -> (1, 2, d, d)."""
    if psi_i.shape != psi_j.shape or psi_i.ndim != 2:
        raise DimensionError(f"stack_pair: features {psi_i.shape} and {psi_j.shape} differ")
    d = psi_i.shape
    return ad.concat([ad.reshape(psi_i, (1, 1) + d), ad.reshape(psi_j, (1, 1) + d)], axis=1)


def relate(psi_i: ad.Tensor, psi_j: ad.Tensor, net: PairNet) -> ad.Tensor:
    """Relation score in [0, 1] for one support/query pair of (d, d) features."""
    return ad.sigmoid(ad.reshape(net.forward_stacked(stack_pair(psi_i, psi_j)), ()))


def relation_grid(protos: ad.Tensor, queries: ad.Tensor, net: PairNet,
                  proto_gate=None, query_gate=None) -> ad.Tensor:
    """(L, d, d) prototypes x (M, d, d) queries -> (L, M) scores."""
    a, b = protos.shape[0], queries.shape[0]
    step = max(1, INFERENCE_PAIRS // a)
    if ad.grad_enabled() or b <= step:
        out = net.forward_grid(protos, queries, proto_gate, query_gate)
        return ad.sigmoid(ad.reshape(out, (a, b)))
    # inference only: bound peak memory by scoring queries in chunks
    cols = []
    for lo in range(0, b, step):
        q = ad.Tensor(queries.data[lo:lo + step])
        g = None if query_gate is None else ad.Tensor(query_gate.data[lo:lo + step])
        cols.append(net.forward_grid(protos, q, proto_gate, g).data.reshape(a, -1))
    return ad.sigmoid(ad.Tensor(np.concatenate(cols, axis=1)))


def aggregate_support(features: ad.Tensor, shot: int) -> ad.Tensor:
    """Class-major (L*Z, d, d) support features -> (L, d, d) shot means."""
    if shot < 1 or features.shape[0] == 0:
        raise ContractError("aggregate_support needs at least one feature per class")
    if features.shape[0] % shot:
        raise ContractError(f"{features.shape[0]} support features do not split into {shot}-shot classes")
    if shot == 1:
        return features
    way = features.shape[0] // shot
    return ad.mean(ad.reshape(features, (way, shot) + features.shape[1:]), axis=1)


def targets(way: int, query_labels: np.ndarray) -> np.ndarray:
    """(L, M) matrix with 1 where the query's label equals the class row."""
    return (np.arange(way)[:, None] == np.asarray(query_labels)[None, :]).astype(np.float64)


def episode_loss_pair(scores: ad.Tensor, query_labels: np.ndarray) -> ad.Tensor:
    """Sum of squared differences between (L, M) scores and class-match targets."""
    diff = ad.sub(scores, targets(scores.shape[0], query_labels))
    return ad.sum(ad.square(diff))


def relation_loss(pair_losses: Mapping[tuple[int, int], ad.Tensor], scales: int,
                  mode: str = "same-scale", same_scale_weight: str = "mean") -> ad.Tensor:
    """Combine per-scale-pair losses keyed by 1-based (s, s') indices.

    ``same-scale``: (1/S) sum_s L_ss, or sum_s L_ss / s with
    ``same_scale_weight="per_term"``.  ``crossref``: sum over the S x S grid
    of L_ss' / sqrt(s s').
    """
    if mode == "same-scale":
        keys = [(s, s) for s in range(1, scales + 1)]
    elif mode == "crossref":
        keys = [(s, t) for s in range(1, scales + 1) for t in range(1, scales + 1)]
    else:
        raise ContractError(f"unknown relation loss mode {mode!r}")
    missing = [k for k in keys if k not in pair_losses]
    if missing:
        raise ContractError(f"relation_loss: missing scale pairs {missing}")
    terms = []
    for s, t in keys:
        if mode == "crossref":
            w = 1.0 / math.sqrt(s * t)
        elif same_scale_weight == "per_term":
            w = 1.0 / s
        else:
            w = 1.0 / scales
        terms.append(ad.scalar_mul(pair_losses[(s, t)], w))
    return _total(terms)


def _total(terms: Sequence[ad.Tensor]) -> ad.Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out

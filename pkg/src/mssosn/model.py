"""The multi-scale second-order similarity model and its per-episode objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .data import Episode
from .encoder import Encoder, encode_pyramid
from .heads import DiscrepancyDiscriminator, ScaleDiscriminator, dd_loss, discrepancy_class, sd_loss
from .pooling import PNConfig, pool_features
from .relation import PairNet, aggregate_support, episode_loss_pair, relation_grid, relation_loss
from .rng import SplitMix64
from .selector import ScaleSelector, gate_features, omega, select


@dataclass
class EpisodeOutput:
    total: ad.Tensor
    rel: ad.Tensor
    omega: ad.Tensor
    sd: ad.Tensor
    dd: ad.Tensor
    scores: dict  # (s, s') -> (L, M) score tensor
    gates_support: np.ndarray | None
    gates_query: np.ndarray | None

    def components(self) -> dict[str, float]:
        return {"L_total": self.total.item(), "L_rel": self.rel.item(), "L_sd": self.sd.item(),
                "L_dd": self.dd.item(), "Omega": self.omega.item()}


def total_loss(rel, omega_, sd, dd, cfg: TrainConfig):
    """alpha * Omega + L_rel + beta * L_sd + gamma * L_dd (tensors or floats)."""
    if isinstance(rel, ad.Tensor):
        out = ad.add(ad.scalar_mul(omega_, cfg.alpha), rel)
        out = ad.add(out, ad.scalar_mul(sd, cfg.beta))
        return ad.add(out, ad.scalar_mul(dd, cfg.gamma))
    return cfg.alpha * omega_ + rel + cfg.beta * sd + cfg.gamma * dd


class MsSoSN:
    """Encoder, similarity network, scale selector and both self-supervised heads.

    Every module is always constructed from its own split of the init
    stream, so switching a head off never changes the others' weights.
    """

    def __init__(self, cfg: TrainConfig, in_channels: int = 3, rng: SplitMix64 | None = None):
        self.cfg = cfg
        rng = rng or SplitMix64(cfg.seed).split()
        S = cfg.num_scales
        self.pn = PNConfig(cfg.sigma, cfg.beta_shift)
        self.encoder = Encoder(rng.split(), in_channels)
        d = self.encoder.width
        self.relation = PairNet(rng.split(), "relation", size=d, channels=cfg.relation_channels,
                                hidden=cfg.relation_hidden, outputs=1)
        self.selector = ScaleSelector()
        self.sd = ScaleDiscriminator(rng.split(), S, in_dim=d * d, hidden=(cfg.sd_hidden1, cfg.sd_hidden2))
        self.dd = DiscrepancyDiscriminator(rng.split(), S, size=d, channels=cfg.dd_channels,
                                           hidden=cfg.relation_hidden)

    def params(self) -> dict[str, ad.Tensor]:
        out = {}
        for mod in (self.encoder, self.relation, self.selector, self.sd, self.dd):
            out.update(mod.params())
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params().items():
            if name not in arrays:
                raise KeyError(name)
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: stored shape {arrays[name].shape} != model shape {p.shape}")
            p.data = np.asarray(arrays[name], dtype=p.data.dtype, order="C").copy()

    def cast(self, dtype) -> None:
        for p in self.params().values():
            p.data = p.data.astype(dtype)

    # forward -------------------------------------------------------------

    def features(self, images_per_scale) -> list[ad.Tensor]:
        """Per-scale (B, 64, 64) second-order features of a batch of images."""
        fms = encode_pyramid([ad.Tensor(x) for x in images_per_scale], self.encoder)
        return [pool_features(fm, self.pn) for fm in fms]

    def scale_pairs(self, grid: bool) -> list[tuple[int, int]]:
        S = self.cfg.num_scales
        if grid:
            return [(s, t) for s in range(1, S + 1) for t in range(1, S + 1)]
        return [(s, s) for s in range(1, S + 1)]

    def episode(self, ep: Episode, with_heads: bool = True) -> EpisodeOutput:
        """Forward pass and every loss component for one episode."""
        cfg = self.cfg
        S = cfg.num_scales
        psi_s = self.features(ep.support)
        psi_q = self.features(ep.query)
        zero = ad.Tensor(0.0)

        gates_s = gates_q = None
        omega_t = zero
        if cfg.use_ss:
            gs = [select(p, self.selector) for p in psi_s]
            gq = [select(p, self.selector) for p in psi_q]
            w_s = ad.concat([ad.reshape(g, (-1, 1)) for g in gs], axis=1)
            w_q = ad.concat([ad.reshape(g, (-1, 1)) for g in gq], axis=1)
            omega_t = omega(w_s, w_q, ep.support_labels, ep.query_labels)
            rel_s = [gate_features(p, g) for p, g in zip(psi_s, gs)]
            rel_q = [gate_features(p, g) for p, g in zip(psi_q, gq)]
            gates_s, gates_q = w_s.data, w_q.data
        else:
            rel_s, rel_q = psi_s, psi_q

        protos = [aggregate_support(p, cfg.shot) for p in rel_s]
        pairs = self.scale_pairs(cfg.crossref or cfg.predict == "grid")
        scores, losses = {}, {}
        for s, t in pairs:
            sc = relation_grid(protos[s - 1], rel_q[t - 1], self.relation)
            scores[(s, t)] = sc
            losses[(s, t)] = episode_loss_pair(sc, ep.query_labels)
        mode = "crossref" if cfg.crossref else "same-scale"
        rel = relation_loss(losses, S, mode, cfg.same_scale_weight)

        sd_t = dd_t = zero
        if with_heads and cfg.use_sd:
            feats = [ad.Tensor(p.data) if cfg.ssl_detach else p for p in psi_s + psi_q]
            vec = ad.concat([ad.vectorize(p, keep=1) for p in feats], axis=0)
            labels = np.concatenate([np.full(p.shape[0], (i % S) + 1) for i, p in enumerate(psi_s + psi_q)])
            sd_t = sd_loss(self.sd(vec), labels)
        if with_heads and cfg.use_dd:
            terms = []
            for s, t in self.scale_pairs(cfg.crossref):
                a, b = psi_s[s - 1], psi_q[t - 1]
                if cfg.ssl_detach:
                    a, b = ad.Tensor(a.data), ad.Tensor(b.data)
                logits = self.dd.forward_grid(a, b)
                cls = np.full(logits.shape[0], discrepancy_class(s, t, S))
                terms.append(dd_loss(logits, cls))
            dd_t = terms[0]
            for term in terms[1:]:
                dd_t = ad.add(dd_t, term)

        total = total_loss(rel, omega_t, sd_t, dd_t, cfg)
        return EpisodeOutput(total, rel, omega_t, sd_t, dd_t, scores, gates_s, gates_q)

    def class_scores(self, out: EpisodeOutput) -> np.ndarray:
        """(L, M) prediction scores: summed relation scores over the prediction pairs."""
        pairs = self.scale_pairs(self.cfg.predict == "grid")
        return np.sum([out.scores[p].data for p in pairs], axis=0)


def accuracy(class_scores: np.ndarray, query_labels) -> float:
    """Fraction of queries whose highest-scoring class (lowest index on ties) is correct."""
    return float(np.mean(np.argmax(class_scores, axis=0) == np.asarray(query_labels)))

"""Finite-difference gradient suite and the polynomial-kernel linearisation check."""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .data import Episode
from .encoder import Encoder, encode_pyramid
from .model import MsSoSN
from .pooling import PNConfig, pool_features, poly_kernel_oracle, sop
from .rng import SplitMix64

GRAD_TOL = 1e-4
KERNEL_TOL = 1e-9


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol


def _away_from_zero(rng: SplitMix64, shape, margin: float = 0.1) -> np.ndarray:
    """Uniform values in +-[margin, 1]."""
    mag = rng.uniform(shape, margin, 1.0)
    sign = np.where(rng.uniform(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _distinct(rng: SplitMix64, shape) -> np.ndarray:
    """Values spaced at least 0.05 apart, so max-pool winners are stable under eps."""
    n = int(np.prod(shape))
    order = np.array(rng.sample(n, n), dtype=np.float64)
    return (order * 0.05 + rng.uniform(shape, 0.0, 0.01).reshape(-1)).reshape(shape) - 0.025 * n


def _readout(out: ad.Tensor, rng: SplitMix64) -> ad.Tensor:
    """Random linear functional, so every output coordinate carries a distinct weight."""
    return ad.sum(ad.mul(out, rng.uniform(out.shape, 0.5, 1.5)))


def _op_check(kind: str, inputs: list[np.ndarray], attrs: dict | None = None, n_inputs=None) -> float:
    """Check d(readout(op(inputs)))/d(input) for each differentiable input."""
    rng = SplitMix64(zlib.crc32(kind.encode()))
    weights_seed = rng.next_u64()
    tensors = [ad.Tensor(x) for x in inputs]
    worst = 0.0
    for i in range(n_inputs if n_inputs is not None else len(tensors)):

        def f(t, i=i):
            args = list(tensors)
            args[i] = t
            return _readout(ad.op_forward(kind, args, attrs), SplitMix64(weights_seed))

        worst = max(worst, ad.grad_check(f, tensors[i]))
    return worst


def op_checks(seed: int = 0) -> dict[str, Callable[[], float]]:
    """One finite-difference check per operation kind."""
    r = SplitMix64(seed)
    u = lambda *shape: r.uniform(shape, -1.0, 1.0)  # noqa: E731
    return {
        "conv2d": lambda: max(
            _op_check("conv2d", [u(2, 2, 5, 5), u(3, 2, 3, 3), u(3)], {"pad": 1}),
            _op_check("conv2d", [u(1, 2, 6, 6), u(2, 2, 3, 3)], {"stride": 2, "pad": 0}),
        ),
        "relu": lambda: _op_check("relu", [_away_from_zero(r, (3, 4))]),
        "maxpool2x2": lambda: _op_check("maxpool2x2", [_distinct(r, (2, 2, 4, 4))]),
        "avgpool": lambda: _op_check("avgpool", [u(2, 1, 4, 4)], {"k": 2}),
        "upsample_nearest": lambda: _op_check("upsample_nearest", [u(1, 2, 3, 3)], {"f": 2}),
        "matmul": lambda: max(_op_check("matmul", [u(3, 4), u(4, 2)]), _op_check("matmul", [u(2, 3, 4), u(4, 3)])),
        "transpose": lambda: _op_check("transpose", [u(2, 3, 4)], {"axes": (2, 0, 1)}),
        "concat": lambda: _op_check("concat", [u(2, 3), u(2, 2)], {"axis": 1}),
        "add": lambda: _op_check("add", [u(3, 4), u(1, 4)]),
        "sub": lambda: _op_check("sub", [u(3, 4), u(3, 1)]),
        "mul": lambda: _op_check("mul", [u(3, 4), u(4)]),
        "scalar_mul": lambda: _op_check("scalar_mul", [u(3, 4)], {"c": -1.7}),
        "exp": lambda: _op_check("exp", [u(3, 4)]),
        "log": lambda: _op_check("log", [r.uniform((3, 4), 0.5, 2.0)]),
        "reciprocal": lambda: _op_check("reciprocal", [_away_from_zero(r, (3, 4), 0.5)]),
        "mean": lambda: _op_check("mean", [u(3, 4, 2)], {"axis": 1, "keepdims": True}),
        "sum": lambda: _op_check("sum", [u(3, 4, 2)], {"axis": (0, 2)}),
        "square": lambda: _op_check("square", [u(3, 4)]),
        "sigmoid": lambda: _op_check("sigmoid", [u(4)]),
        "vectorize": lambda: _op_check("vectorize", [u(2, 3, 4)], {"keep": 1}),
        "reshape": lambda: _op_check("reshape", [u(2, 6)], {"shape": (3, 4)}),
    }


def _param_coords(p: ad.Tensor, rng: SplitMix64, k: int) -> list[int]:
    return rng.sample(p.size, min(k, p.size))


def _params_check(loss: Callable[[], ad.Tensor], params: dict[str, ad.Tensor], rng: SplitMix64,
                  per_param: int = 6) -> float:
    worst = 0.0
    for p in params.values():
        worst = max(worst, ad.grad_check(lambda _: loss(), p, coords=_param_coords(p, rng, per_param)))
    return worst


def _tiny_images(rng: SplitMix64, n: int, res: int) -> np.ndarray:
    return rng.uniform((n, 3, res, res), 0.0, 1.0)


def check_encoder(seed: int = 1) -> float:
    """Encoder pyramid (32/16 inputs) under a random readout, wrt inputs and weights."""
    rng = SplitMix64(seed)
    enc = Encoder(rng.split())
    for b in enc.biases:
        b.data[:] = rng.uniform(b.shape, 0.05, 0.15)
    imgs = [ad.Tensor(_tiny_images(rng, 1, 32)), ad.Tensor(_tiny_images(rng, 1, 16))]
    ws = rng.next_u64()

    def loss():
        maps = encode_pyramid(imgs, enc)
        return ad.add(_readout(maps[0], SplitMix64(ws)), _readout(maps[1], SplitMix64(ws + 1)))

    worst = _params_check(loss, enc.params(), rng)
    for img in imgs:
        worst = max(worst, ad.grad_check(lambda _: loss(), img, coords=_param_coords(img, rng, 8)))
    return worst


def check_pool_features(seed: int = 2) -> float:
    rng = SplitMix64(seed)
    fm = ad.Tensor(rng.uniform((2, 64, 4, 4), -0.3, 0.6))
    ws = rng.next_u64()
    cfg = PNConfig(sigma=-5.0, beta_shift=0.5)
    return ad.grad_check(lambda t: _readout(pool_features(t, cfg), SplitMix64(ws)), fm,
                         coords=_param_coords(fm, rng, 40))


def micro_episode(rng: SplitMix64, scales=(32, 16), way: int = 2) -> Episode:
    """A 2-way 1-shot, 1-query episode of random images."""
    sup = [_tiny_images(rng, way, scales[0])]
    qry = [_tiny_images(rng, way, scales[0])]
    for s in scales[1:]:
        sup.append(sup[-1].reshape(way, 3, s, 2, s, 2).mean(axis=(3, 5)))
        qry.append(qry[-1].reshape(way, 3, s, 2, s, 2).mean(axis=(3, 5)))
    labels = np.arange(way)
    return Episode([f"c{i}" for i in range(way)], sup, qry, labels, labels.copy())


def check_episode(seed: int = 3) -> float:
    """Full objective (SS + SD + DD, CrossRef grid) of a 2-way 1-shot micro-episode."""
    rng = SplitMix64(seed)
    cfg = TrainConfig(scales=[32, 16], way=2, shot=1, query=1, crossref=True,
                      alpha=1.0, beta=1.0, gamma=1.0, relation_channels=4, dd_channels=4,
                      sd_hidden1=16, sd_hidden2=8)
    model = MsSoSN(cfg, 3, rng.split())
    for name, p in model.params().items():
        if name.endswith("bias") and p.ndim == 1 and p.size > 1:
            p.data[:] = rng.uniform(p.shape, 0.02, 0.1)
    ep = micro_episode(rng, cfg.scales, cfg.way)
    return _params_check(lambda: model.episode(ep).total, model.params(), rng)


COMPOSITES: dict[str, Callable[[], float]] = {
    "composite:encoder": check_encoder,
    "composite:pool_features": check_pool_features,
    "composite:episode": check_episode,
}


def run_gradcheck(tol: float = GRAD_TOL, include_composites: bool = True) -> list[CheckResult]:
    checks = dict(op_checks())
    if include_composites:
        checks.update(COMPOSITES)
    with ad.precision(np.float64):
        return [CheckResult(name, float(fn()), tol) for name, fn in checks.items()]


def run_kernelcheck(trials: int = 100, seed: int = 0, d_max: int = 8, n_max: int = 12) -> float:
    """Max |brute-force kernel sum - Frobenius pairing of pooled matrices| over random trials."""
    rng = SplitMix64(seed)
    worst = 0.0
    for _ in range(trials):
        d = 1 + rng.below(d_max)
        n, n_star = 1 + rng.below(n_max), 1 + rng.below(n_max)
        a = rng.uniform((d, n), -1.0, 1.0)
        b = rng.uniform((d, n_star), -1.0, 1.0)
        k = poly_kernel_oracle(a, b, 2)
        pair = float(np.sum(sop(ad.Tensor(a)).data * sop(ad.Tensor(b)).data))
        worst = max(worst, abs(k - pair))
    return worst


def format_gradcheck(results: list[CheckResult]) -> str:
    lines = [f"{'check':<26} {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<26} {r.error:12.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0

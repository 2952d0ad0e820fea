"""Mean-shifted second-order pooling with zero-centred sigmoid power normalisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError


@dataclass(frozen=True)
class PNConfig:
    sigma: float = -5.0
    beta_shift: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.beta_shift <= 1.0:
            raise ContractError(f"beta_shift {self.beta_shift} outside [0, 1]")


def mean_shift(phi: ad.Tensor, beta: float) -> ad.Tensor:
    """Subtract ``beta`` times the mean column from every column of (..., d, N)."""
    if beta == 0.0:
        return phi
    mu = ad.mean(phi, axis=-1, keepdims=True)
    return ad.sub(phi, ad.scalar_mul(mu, beta))


def sop(phi: ad.Tensor) -> ad.Tensor:
    """(1/N) Phi Phi^T for (..., d, N) inputs."""
    n = phi.shape[-1]
    axes = list(range(phi.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ad.scalar_mul(ad.matmul(phi, ad.transpose(phi, axes)), 1.0 / n)


def power_norm(x: ad.Tensor, sigma: float) -> ad.Tensor:
    """Elementwise (1 - e^{sigma x}) / (1 + e^{sigma x}).

    Evaluated as 1 - 2 * sigmoid(sigma x), which is the same function but
    never overflows.
    """
    s = ad.sigmoid(ad.scalar_mul(x, sigma))
    return ad.add(ad.scalar_mul(s, -2.0), 1.0)


def flatten_spatial(fm: ad.Tensor) -> ad.Tensor:
    """(..., d, h, w) -> (..., d, h*w), row-major over positions."""
    return ad.reshape(fm, fm.shape[:-2] + (fm.shape[-2] * fm.shape[-1],))


def pool_features(fm: ad.Tensor, cfg: PNConfig = PNConfig()) -> ad.Tensor:
    """Feature maps (..., d, h, w) -> second-order features (..., d, d)."""
    phi = mean_shift(flatten_spatial(fm), cfg.beta_shift)
    return power_norm(sop(phi), cfg.sigma)


def poly_kernel_oracle(phi_a: np.ndarray, phi_b: np.ndarray, r: int = 2) -> float:
    """Brute-force (1/(N N*)) sum_n sum_n' <phi_n, phi*_n'>^r over columns."""
    if r < 1:
        raise ContractError(f"kernel degree must be >= 1, got {r}")
    phi_a = np.asarray(phi_a, dtype=np.float64)
    phi_b = np.asarray(phi_b, dtype=np.float64)
    n, n_star = phi_a.shape[1], phi_b.shape[1]
    total = 0.0
    for i in range(n):
        for j in range(n_star):
            total += float(np.dot(phi_a[:, i], phi_b[:, j])) ** r
    return total / (n * n_star)

"""Diagonal Gaussians over classifier weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ssgen.errors import ContractError
from ssgen.numcore.tensor import Tensor, as_tensor, clamp, exp, get_dtype, scale, sum_

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass
class GaussianParams:
    """Mean and log-variance tensors of identical shape, usually ``(C, d)``.

    A leading batch axis ``(B, C, d)`` is allowed for per-sample posteriors.
    """

    mean: Tensor
    logvar: Tensor

    def __post_init__(self) -> None:
        if self.mean.shape != self.logvar.shape:
            raise ContractError(
                f"mean shape {self.mean.shape} != logvar shape {self.logvar.shape}"
            )

    @classmethod
    def from_raw(cls, mean: Tensor, raw_logvar: Tensor) -> "GaussianParams":
        """Build from a head's linear outputs, hard-clamping the log-variance."""
        return cls(mean, clamp(raw_logvar, LOGVAR_MIN, LOGVAR_MAX))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.logvar.data)

    def row(self, index) -> "GaussianParams":
        return GaussianParams(self.mean[index], self.logvar[index])


def gaussian_kl_terms(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Elementwise KL(q || p); ``p`` may broadcast against ``q``."""
    diff = p.mean - q.mean
    inv_var_p = exp(scale(p.logvar, -1.0))
    ratio = exp(q.logvar - p.logvar)
    inner = ratio + diff * diff * inv_var_p - 1.0 + p.logvar - q.logvar
    return scale(inner, 0.5)


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Closed-form KL(q || p) summed over every entry."""
    if q.shape != p.shape:
        raise ContractError(f"KL between shapes {q.shape} and {p.shape}")
    return sum_(gaussian_kl_terms(q, p))


def reparameterize(g: GaussianParams, rng: np.random.Generator) -> Tensor:
    """Draw ``mean + exp(logvar / 2) * eps``; eps comes from ``rng`` and is not differentiated."""
    eps = rng.standard_normal(g.shape).astype(get_dtype(), copy=False)
    std = exp(scale(g.logvar, 0.5))
    return g.mean + std * as_tensor(eps)

"""Depth-free reduction to Poisson factor analysis on integrated counts.

When the integrated response does not depend on the depth (no truncation
by the support), the integrated counts ``ytil ~ Poisson(gtil * lam)`` carry
all the information about the spectra, and unmixing can run on them alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import xlogy

from .chain import ChainOutput, SamplerConfig, run_chain
from .core import DepthSupport, HyperParams, PhotonCube
from .likelihood import SuffStats, g_tilde_variation, log_lik_field

VALIDITY_RTOL = 1e-6


@dataclass(frozen=True)
class ReducedObservation:
    y: np.ndarray  # (L, n_row * n_col) integrated counts
    shape: tuple  # (n_row, n_col)
    g_tilde: Optional[np.ndarray] = None  # (L,) per-band integrated response when valid
    variation: Optional[float] = None

    @property
    def is_valid(self) -> Optional[bool]:
        return None if self.variation is None else self.variation <= VALIDITY_RTOL

    def scaled_endmembers(self, m: np.ndarray) -> np.ndarray:
        """``M`` with row ``l`` multiplied by ``gtil_l``."""
        if self.g_tilde is None:
            raise ValueError("integrated response unknown; build the reduction from statistics")
        return m * self.g_tilde[:, None]

    def total_image(self) -> np.ndarray:
        return self.y.sum(axis=0).reshape(self.shape)


def integrate_cube(cube: PhotonCube, stats: Optional[SuffStats] = None) -> ReducedObservation:
    """Integrated counts as an ``L x N`` matrix, with the constancy status when ``stats`` is given."""
    n, m, L = cube.y_tilde.shape
    y = cube.y_tilde.reshape(n * m, L).T.copy()
    if stats is None:
        return ReducedObservation(y, (n, m))
    valid, var = check_reduction_validity(stats)
    g = stats.g_tilde[0, :, 0] if valid and stats.g_tilde.shape[0] == 1 else None
    return ReducedObservation(y, (n, m), g, var)


def check_reduction_validity(stats: SuffStats, rtol: float = VALIDITY_RTOL):
    """``(is_valid, max relative variation)`` of the integrated response over the support."""
    var = float(g_tilde_variation(stats).max())
    return var <= rtol, var


def reduced_log_lik(y_tilde: np.ndarray, g_tilde: np.ndarray, lam: np.ndarray) -> float:
    """``sum ytil log(gtil lam) - gtil lam`` without the factorial constant."""
    mu = g_tilde * lam
    return float(np.sum(xlogy(y_tilde, mu) - mu))


def log_lik_difference_gap(stats: SuffStats, t: np.ndarray, lam_a: np.ndarray, lam_b: np.ndarray) -> float:
    """Full-model minus reduced-model difference between two spectrum fields.

    Zero (up to rounding) whenever the reduction is valid.
    """
    g = stats.g_tilde_at(t)
    full = float(log_lik_field(stats, lam_a, t).sum() - log_lik_field(stats, lam_b, t).sum())
    red = reduced_log_lik(stats.y_tilde, g, lam_a) - reduced_log_lik(stats.y_tilde, g, lam_b)
    return full - red


def reduced_stats(stats: SuffStats) -> SuffStats:
    """Statistics of the integrated model: a one-bin support with the constant response."""
    n, m, L = stats.y_tilde.shape
    g = stats.g_tilde[:, :, :1]
    return SuffStats(
        support=DepthSupport(stats.support.t_min, stats.support.t_min),
        y_tilde=stats.y_tilde,
        g_tilde=g,
        delay_index=stats.delay_index,
        log_g_dot_y=np.zeros((n, m, L, 1)),
        log_g_dot_y_sum=np.zeros((n, m, 1)),
        log_y_factorial=stats.log_y_factorial,
    )


def pfa_unmix(
    stats: SuffStats,
    m: np.ndarray,
    hyper: HyperParams,
    config: SamplerConfig,
    force: bool = False,
) -> ChainOutput:
    """Unmix the integrated counts with depth updates disabled.

    Abundance, label, anomaly and auxiliary kernels are those of the full
    sampler; the integrated response is taken as a per-band constant.
    """
    valid, var = check_reduction_validity(stats)
    if not valid and not force:
        raise ValueError(f"reduction invalid: integrated response varies by {var:.3g} over the support")
    cfg = SamplerConfig(**{**config.__dict__, "update_depth": False, "tv_enabled": False})
    return run_chain(reduced_stats(stats), m, hyper, cfg)

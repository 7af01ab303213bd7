"""Poisson observation model and its look-up tables.

For a pixel with spectrum ``lam`` and depth ``t0`` the log-likelihood reduces
to ``sum_l ytil_l log lam_l - lam_l gtil_l(t0) + lgy_l(t0)`` (minus the
``log y!`` constant), where ``ytil`` are integrated counts, ``gtil`` the
integrated impulse response and ``lgy`` the data-weighted log response.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, xlogy

from .core import DepthSupport, ImpulseResponseSet, PhotonCube, Problem, mix, mix_transpose

_CHUNK_ELEMENTS = 1 << 22


def poisson_log_pmf(k, lam):
    """``k log lam - lam - log k!`` with ``log f(0; 0) = 0``."""
    k = np.asarray(k)
    lam = np.asarray(lam, dtype=float)
    if np.any(k < 0) or np.any(lam < 0):
        raise ValueError("poisson_log_pmf needs k >= 0 and lam >= 0")
    out = xlogy(k, lam) - lam - gammaln(k + 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class SuffStats:
    """Precomputed tables; pure functions of the data, the IRF and the support.

    ``g_tilde`` has one row block per distinct pixel delay, indexed through
    ``delay_index``; with no delay map there is a single block.
    """

    support: DepthSupport
    y_tilde: np.ndarray  # (n_row, n_col, L) float
    g_tilde: np.ndarray  # (n_delay, L, T')
    delay_index: np.ndarray  # (n_row, n_col) -> block of g_tilde
    log_g_dot_y: np.ndarray  # (n_row, n_col, L, T')
    log_g_dot_y_sum: np.ndarray  # (n_row, n_col, T'), summed over bands
    log_y_factorial: np.ndarray  # (n_row, n_col)

    @property
    def shape(self) -> tuple[int, int]:
        return self.y_tilde.shape[:2]

    @property
    def n_band(self) -> int:
        return self.y_tilde.shape[2]

    def g_tilde_pixels(self) -> np.ndarray:
        """``(n_row, n_col, L, T')`` view, broadcast when there is one delay block."""
        n, m = self.shape
        if self.g_tilde.shape[0] == 1:
            return np.broadcast_to(self.g_tilde[0], (n, m) + self.g_tilde.shape[1:])
        return self.g_tilde[self.delay_index]

    def index_of(self, t) -> np.ndarray:
        return np.asarray(t) - self.support.t_min

    def g_tilde_at(self, t) -> np.ndarray:
        """Integrated response ``(n_row, n_col, L)`` at the depth field ``t``."""
        k = self.index_of(t)
        return self.g_tilde[self.delay_index, :, k]

    def log_g_dot_y_at(self, t) -> np.ndarray:
        k = self.index_of(t)
        return np.take_along_axis(self.log_g_dot_y, k[..., None, None], axis=3)[..., 0]

    def is_g_tilde_constant(self, rtol: float = 1e-6) -> bool:
        return bool(np.all(g_tilde_variation(self) <= rtol))


def g_tilde_variation(stats: SuffStats) -> np.ndarray:
    """Per band ``(max - min) / max`` of the integrated response over the support."""
    g = stats.g_tilde
    spread = g.max(axis=2) - g.min(axis=2)
    return (spread / g.max(axis=2)).max(axis=0)


def integrated_response(irf: ImpulseResponseSet, band: int, t0, n_bin: int) -> np.ndarray:
    """``sum_{t=1..T} g_band(t - t0)`` for integer depths ``t0``."""
    start, values = irf.kernels[band]
    cs = np.concatenate([[0.0], np.cumsum(values)])
    t0 = np.asarray(t0)
    lo = np.clip(1 - t0 - start, 0, values.size)
    hi = np.clip(n_bin - t0 - start + 1, 0, values.size)
    return np.where(hi > lo, cs[hi] - cs[np.minimum(lo, hi)], 0.0)


def _log_kernel_table(irf: ImpulseResponseSet):
    lo = min(s for s, _ in irf.kernels)
    hi = max(s + v.size - 1 for s, v in irf.kernels)
    table = np.full((irf.n_band, hi - lo + 1), -np.inf)
    with np.errstate(divide="ignore"):
        for band, (s, v) in enumerate(irf.kernels):
            table[band, s - lo : s - lo + v.size] = np.log(v)
    return lo, table


def build_suff_stats(cube: PhotonCube, irf: ImpulseResponseSet, sup: DepthSupport) -> SuffStats:
    d = cube.dims
    t0 = sup.bins
    delays = irf.delay_map(d.n_row, d.n_col)
    uniq, delay_index = np.unique(delays, return_inverse=True)
    delay_index = delay_index.reshape(d.n_row, d.n_col)
    g_tilde = np.stack(
        [
            np.stack([integrated_response(irf, b, t0 + dly, d.n_bin) for b in range(d.n_band)])
            for dly in uniq
        ]
    )
    if np.any(g_tilde <= 0):
        raise ValueError("integrated impulse response vanishes for some supported depth")

    lgy = np.zeros((d.n_row, d.n_col, d.n_band, sup.size))
    coords, counts = cube.coords, cube.counts
    if counts.size:
        lag0, table = _log_kernel_table(irf)
        group_key = (coords[:, 0] * d.n_col + coords[:, 1]) * d.n_band + coords[:, 2]
        starts = np.flatnonzero(np.r_[True, np.diff(group_key) != 0])
        bounds = np.r_[starts, counts.size]
        per_chunk = max(1, _CHUNK_ELEMENTS // sup.size)
        flat = lgy.reshape(-1, sup.size)
        g = 0
        while g < starts.size:
            # whole groups per chunk so reduceat segments never straddle chunks
            g_end = int(np.searchsorted(bounds, bounds[g] + per_chunk, side="right")) - 1
            g_end = min(max(g_end, g + 1), starts.size)
            e0, e1 = bounds[g], bounds[g_end]
            c = coords[e0:e1]
            shift = c[:, 3] - delays[c[:, 0], c[:, 1]]
            k = shift[:, None] - t0[None, :] - lag0
            inside = (k >= 0) & (k < table.shape[1])
            vals = np.where(inside, table[c[:, 2:3], np.clip(k, 0, table.shape[1] - 1)], -np.inf)
            vals *= counts[e0:e1, None]
            flat[group_key[starts[g:g_end]]] = np.add.reduceat(vals, bounds[g:g_end] - e0, axis=0)
            g = g_end
    log_y_fact = np.zeros((d.n_row, d.n_col))
    if counts.size:
        np.add.at(log_y_fact, (coords[:, 0], coords[:, 1]), gammaln(counts + 1.0))
    return SuffStats(
        support=sup,
        y_tilde=cube.y_tilde.astype(float),
        g_tilde=g_tilde,
        delay_index=delay_index,
        log_g_dot_y=lgy,
        log_g_dot_y_sum=lgy.sum(axis=2),
        log_y_factorial=log_y_fact,
    )


def stats_for(problem: Problem) -> SuffStats:
    return build_suff_stats(problem.cube, problem.irf, problem.support)


def pixel_log_lik(y_tilde, g_tilde, log_g_dot_y, lam, t0_index=None, log_y_factorial=None):
    """Log-likelihood of one pixel from its look-up tables.

    ``g_tilde`` and ``log_g_dot_y`` are either per-band values at the depth
    of interest, shape ``(L,)``, or full ``(L, T')`` tables together with
    ``t0_index``. The ``log y!`` constant is included only when
    ``log_y_factorial`` is given. ``lam_l = 0`` with counts gives ``-inf``.
    """
    lam = np.asarray(lam, dtype=float)
    g_tilde = np.asarray(g_tilde, dtype=float)
    log_g_dot_y = np.asarray(log_g_dot_y, dtype=float)
    if t0_index is not None:
        g_tilde = g_tilde[:, t0_index]
        log_g_dot_y = log_g_dot_y[:, t0_index]
    val = float(np.sum(xlogy(y_tilde, lam) - lam * g_tilde + log_g_dot_y))
    if log_y_factorial is not None:
        val -= float(log_y_factorial)
    return val


def log_lik_field(stats: SuffStats, lam: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Per-pixel log-likelihood ``(n_row, n_col)`` without the ``log y!`` constant."""
    terms = xlogy(stats.y_tilde, lam) - lam * stats.g_tilde_at(t) + stats.log_g_dot_y_at(t)
    return terms.sum(axis=-1)


def joint_log_lik(stats: SuffStats, lam: np.ndarray, t: np.ndarray, include_constant=False) -> float:
    """Sum of independent pixel log-likelihoods."""
    val = float(log_lik_field(stats, lam, t).sum())
    if include_constant:
        val -= float(stats.log_y_factorial.sum())
    return val


def grad_log_lik_abundance(y_tilde, g_tilde, m, a, r=0.0):
    """Gradient of the reduced log-likelihood with respect to the abundances.

    ``d/da_q = sum_l M_lq (ytil_l / lam_l - gtil_l)`` with ``lam = M a + r``;
    batched over any leading axes of ``a``.
    """
    lam = mix(np.asarray(a, dtype=float), m) + r
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(y_tilde > 0, y_tilde / lam, 0.0)
    return mix_transpose(ratio - g_tilde, m)


def grad_log_lik_anomaly(y_tilde, g_tilde, base, x, z):
    """``d/dx_l = z_l (ytil_l / lam_l - gtil_l)`` with ``lam = base + z x``."""
    lam = base + z * x
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(y_tilde > 0, y_tilde / lam, 0.0)
    return z * (ratio - g_tilde)

"""Point estimators, uncertainty maps, the pixel-wise ML baseline and metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import ndimage
from scipy.special import xlogy

from .core import GridDims, mix
from .likelihood import SuffStats

LOG_INTENSITY_FLOOR = -12.0


@dataclass
class EstimateBundle:
    depth_bins: np.ndarray
    depth_mm: np.ndarray
    confidence: np.ndarray
    abundances: np.ndarray
    labels: np.ndarray
    anomaly: np.ndarray

    def __post_init__(self):
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise ValueError("confidence must lie in [0, 1]")
        if np.any(self.abundances < 0) or np.any(self.anomaly < 0):
            raise ValueError("abundance and anomaly estimates must be nonnegative")

    @property
    def anomaly_log_intensity(self) -> np.ndarray:
        return anomaly_log_intensity(self.anomaly)


def _stack(samples) -> np.ndarray:
    arr = np.asarray(samples)
    if arr.ndim == 0 or arr.shape[0] == 0:
        raise ValueError("no stored samples")
    return arr


def mmse_abundances(samples) -> np.ndarray:
    """Posterior mean over the leading (sample) axis."""
    return _stack(samples).mean(axis=0)


def mmap_labels(samples) -> np.ndarray:
    """1 where the empirical frequency of ``z = 1`` exceeds one half; ties go to 0."""
    z = _stack(samples)
    return (2 * z.sum(axis=0) > z.shape[0]).astype(np.int8)


def mmse_anomaly_values(x_samples, z_samples, z_hat) -> np.ndarray:
    """Mean of ``x`` over the sweeps with ``z = 1``, masked by ``z_hat``."""
    x = _stack(x_samples)
    z = _stack(z_samples)
    ones = z.sum(axis=0)
    total = np.where(z == 1, x, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(ones > 0, total / np.maximum(ones, 1), 0.0)
    return np.where(np.asarray(z_hat) == 1, mean, 0.0)


def anomaly_log_intensity(r_hat: np.ndarray, floor: float = LOG_INTENSITY_FLOOR) -> np.ndarray:
    """``log(||r_ij||^2 / L)`` with empty vectors clipped to ``floor``."""
    power = (np.asarray(r_hat, dtype=float) ** 2).mean(axis=-1)
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(power), floor)


def mode_and_mass(weights: np.ndarray, support_bins: np.ndarray):
    """Modal bin (smallest on ties) and its normalised mass, per pixel."""
    w = np.asarray(weights, dtype=float)
    k = np.argmax(w, axis=-1)  # first maximum, i.e. smallest bin
    mass = np.take_along_axis(w, k[..., None], -1)[..., 0] / w.sum(axis=-1)
    return support_bins[k], np.clip(mass, 0.0, 1.0)


def depth_histogram(samples, support_bins: np.ndarray) -> np.ndarray:
    t = _stack(samples)
    k = t - support_bins[0]
    n_sup = support_bins.size
    if np.any(k < 0) or np.any(k >= n_sup):
        raise ValueError("depth sample outside the support")
    flat = k.reshape(k.shape[0], -1)
    hist = np.zeros((flat.shape[1], n_sup), dtype=np.int64)
    np.add.at(hist, (np.broadcast_to(np.arange(flat.shape[1]), flat.shape), flat), 1)
    return hist.reshape(t.shape[1:] + (n_sup,))


def mmap_depth_and_confidence(samples, support_bins: Optional[np.ndarray] = None):
    """Per-pixel modal depth bin of the samples and the fraction of samples in it."""
    t = _stack(samples)
    if support_bins is None:
        support_bins = np.arange(t.min(), t.max() + 1)
    return mode_and_mass(depth_histogram(t, support_bins), np.asarray(support_bins))


def mmap_depth_rao_blackwell(pmf_sum: np.ndarray, support_bins: np.ndarray):
    """Modal depth and confidence from summed per-sweep conditional pmfs.

    The average of the conditional pmfs estimates the same marginal as the
    sample histogram with lower variance.
    """
    return mode_and_mass(pmf_sum, np.asarray(support_bins))


# ------------------------------------------------------------------ ML baseline


def depth_profile_log_lik(stats: SuffStats, bands=None) -> np.ndarray:
    """Profile log-likelihood ``(n_row, n_col, T')`` with amplitudes maximised per band.

    With ``lam_l = ytil_l / gtil_l(t0)`` the depth-dependent part is
    ``sum_l lgy_l(t0) - ytil_l log gtil_l(t0)``.
    """
    bands = range(stats.n_band) if bands is None else list(bands)
    g = stats.g_tilde_pixels()
    out = np.zeros(stats.log_g_dot_y.shape[:2] + (stats.support.size,))
    for b in bands:
        y = stats.y_tilde[..., b, None]
        out += stats.log_g_dot_y[..., b, :] - xlogy(y, g[..., b, :])
    return out


def fill_nearest(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid entries by the value of the nearest valid pixel."""
    if valid.all():
        return values.copy()
    _, (ii, jj) = ndimage.distance_transform_edt(~valid, return_indices=True)
    return values[ii, jj]


def ml_depth_baseline(
    stats: SuffStats,
    mode: Union[str, int] = "joint",
    lam: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Pixel-wise ML depth in bins, either from one band (``mode`` an index) or all bands.

    Amplitudes are profiled out analytically unless a fixed spectrum field
    ``lam`` (``(n_row, n_col, L)``) is supplied. Pixels without photons in
    the bands used are filled from their nearest estimated neighbour.
    """
    bands = list(range(stats.n_band)) if mode == "joint" else [int(mode)]
    if any(b < 0 or b >= stats.n_band for b in bands):
        raise ValueError(f"band {mode} out of range")
    if lam is None:
        ll = depth_profile_log_lik(stats, bands)
    else:
        g = stats.g_tilde_pixels()
        ll = sum(stats.log_g_dot_y[..., b, :] - lam[..., b, None] * g[..., b, :] for b in bands)
    observed = stats.y_tilde[..., bands].sum(axis=-1) > 0
    if not observed.any():
        raise ValueError("no photons in the selected bands; ML depth undefined")
    t = stats.support.bins[np.argmax(ll, axis=-1)]
    return fill_nearest(t, observed)


def plugin_depth(stats: SuffStats, lam: np.ndarray, t_init: np.ndarray, epsilon: float = 0.0, n_iter: int = 20):
    """Conditional-mode depth at plugged-in spectra (ICM on the TV posterior when ``epsilon > 0``)."""
    from .priors import neighbor_depth_stack
    from .sampler import checkerboard, depth_log_lik_table

    table = depth_log_lik_table(stats, lam)
    bins = stats.support.bins
    t = np.array(t_init)
    for _ in range(n_iter):
        prev = t.copy()
        for color in (0, 1):
            vals, mask = neighbor_depth_stack(t)
            tv = (np.where(mask[..., None], np.abs(bins - vals[..., None]), 0)).sum(axis=0)
            best = bins[np.argmax(table - 2.0 * epsilon * tv, axis=-1)]
            sites = checkerboard(t.shape, color)
            t[sites] = best[sites]
        if np.array_equal(prev, t):
            break
    return t


# -------------------------------------------------------------------- metrics


def rmse(t_hat, t_ref, dims: Union[GridDims, float]) -> float:
    """Root mean squared depth error in millimetres."""
    t_hat = np.asarray(t_hat, dtype=float)
    t_ref = np.asarray(t_ref, dtype=float)
    if t_hat.shape != t_ref.shape:
        raise ValueError(f"shape mismatch {t_hat.shape} vs {t_ref.shape}")
    scale = dims.mm_per_bin if isinstance(dims, GridDims) else float(dims)
    return float(np.sqrt(np.mean((t_hat - t_ref) ** 2)) * scale)


def label_f1(z_hat, z_ref) -> float:
    """F1 score of binary label maps; 1.0 when both are empty."""
    z_hat = np.asarray(z_hat).astype(bool)
    z_ref = np.asarray(z_ref).astype(bool)
    if z_hat.shape != z_ref.shape:
        raise ValueError("shape mismatch")
    tp = np.sum(z_hat & z_ref)
    denom = z_hat.sum() + z_ref.sum()
    return 1.0 if denom == 0 else float(2 * tp / denom)


def recall(z_hat, z_ref) -> float:
    z_hat = np.asarray(z_hat).astype(bool)
    z_ref = np.asarray(z_ref).astype(bool)
    return float(np.sum(z_hat & z_ref) / max(z_ref.sum(), 1))


# ---------------------------------------------------------------- bundling


DEPTH_ESTIMATORS = ("histogram", "rao-blackwell")


def estimate_bundle(output, dims: GridDims, depth_estimator: str = "histogram") -> EstimateBundle:
    """Estimates from a chain's running sums (all post-burn-in sweeps).

    ``depth_estimator`` is ``"histogram"`` (mode and frequency of the depth
    samples) or ``"rao-blackwell"`` (mode and mass of the averaged
    conditional pmfs, a lower-variance estimate of the same marginal).
    """
    if depth_estimator not in DEPTH_ESTIMATORS:
        raise ValueError(f"unknown depth estimator '{depth_estimator}'")
    n = output.n_post
    if n == 0:
        raise ValueError("no post-burn-in sweeps")
    a_hat = output.sum_a / n
    z_hat = (2 * output.count_z1 > n).astype(np.int8)
    with np.errstate(invalid="ignore", divide="ignore"):
        x_mean = np.where(output.count_z1 > 0, output.sum_x_z1 / np.maximum(output.count_z1, 1), 0.0)
    r_hat = np.where(z_hat == 1, x_mean, 0.0)
    weights = output.depth_pmf_sum if depth_estimator == "rao-blackwell" else output.depth_hist
    t_hat, conf = mode_and_mass(weights, output.support_bins)
    return EstimateBundle(
        depth_bins=t_hat,
        depth_mm=t_hat * dims.mm_per_bin,
        confidence=conf,
        abundances=a_hat,
        labels=z_hat,
        anomaly=r_hat,
    )


def bundle_from_samples(samples: dict, support_bins: np.ndarray, dims: GridDims) -> EstimateBundle:
    """Estimates from stored (possibly thinned) samples."""
    t_hat, conf = mmap_depth_and_confidence(samples["t"], support_bins)
    z_hat = mmap_labels(samples["z"])
    return EstimateBundle(
        depth_bins=t_hat,
        depth_mm=t_hat * dims.mm_per_bin,
        confidence=conf,
        abundances=mmse_abundances(samples["a"]),
        labels=z_hat,
        anomaly=mmse_anomaly_values(samples["x"], samples["z"], z_hat),
    )


def spectra(a_hat: np.ndarray, m: np.ndarray, r_hat: Optional[np.ndarray] = None) -> np.ndarray:
    lam = mix(a_hat, m)
    return lam if r_hat is None else lam + r_hat

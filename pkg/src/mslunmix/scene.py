"""Synthetic clay-on-backboard scenes and the Poisson forward simulator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage, stats

from .core import (
    DepthSupport,
    EndmemberLibrary,
    GaussianIrf,
    GridDims,
    ImpulseResponseSet,
    PhotonCube,
    mix,
)
from .rng import stream

FWHM_PER_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))
GAIN_RTOL = 0.02


def fwhm_to_sigma_bins(fwhm_ps: float, bin_ps: float) -> float:
    return fwhm_ps / (bin_ps * FWHM_PER_SIGMA)


@dataclass
class SceneSpec:
    n_row: int = 64
    n_col: int = 64
    n_band: int = 8
    n_bin: int = 300
    bin_ps: float = 2.0
    n_endmember: int = 4
    fwhm_ps: tuple = (56.0, 64.0)
    max_delay_bins: int = 2
    backboard_offset: int = 0  # bins before t_max at which the backboard sits
    height_range: tuple = (5, 25)  # objects sit this many bins in front of the backboard
    mixing_sigma: float = 0.7
    n_strips: int = 3
    anomaly_bands: Optional[tuple] = None  # 0-based; default four adjacent middle bands
    strip_means: tuple = (0.15, 0.1, 0.06)
    strip_shape: float = 20.0
    seed: int = 0

    def dims(self) -> GridDims:
        return GridDims(self.n_row, self.n_col, self.n_band, self.n_bin, self.bin_ps)


@dataclass
class SyntheticScene:
    dims: GridDims
    support: DepthSupport
    depth: np.ndarray  # (n_row, n_col) bins
    abundances: np.ndarray  # (n_row, n_col, R)
    anomaly: np.ndarray  # (n_row, n_col, L)
    regions: np.ndarray  # (n_row, n_col) dominant endmember index
    strips: np.ndarray = field(default=None)  # (n_row, n_col) strip id, -1 outside

    @property
    def labels(self) -> np.ndarray:
        return (self.anomaly > 0).astype(np.int8)

    def spectra(self, m: np.ndarray) -> np.ndarray:
        return mix(self.abundances, m) + self.anomaly


# ------------------------------------------------------------ endmembers


def make_endmember_library(
    n_band: int = 8, n_endmember: int = 4, wl_range=(500.0, 820.0), scale: float = 0.15
) -> EndmemberLibrary:
    """Smooth positive reflectivity curves.

    The first four are a dark-grey backboard with a gentle blue tilt, a red clay (sigmoid edge),
    a green clay (bump) and a second green nearly collinear with the first;
    further columns are bumps at spread-out centres. ``scale`` sets the
    reflectivity level relative to the anomaly prior scale.
    """
    wl = np.linspace(*wl_range, n_band)
    u = (wl - wl_range[0]) / (wl_range[1] - wl_range[0])
    cols = [
        0.32 - 0.2 * u,
        0.03 + 0.85 / (1.0 + np.exp(-(u - 0.5) / 0.07)),
        0.04 + 0.7 * np.exp(-0.5 * ((u - 0.3) / 0.14) ** 2),
        0.05 + 0.65 * np.exp(-0.5 * ((u - 0.35) / 0.16) ** 2),
    ]
    names = ["backboard", "red", "green", "green2"]
    for k in range(4, n_endmember):
        centre = (k - 3) / (n_endmember - 2)
        cols.append(0.1 + 0.6 * np.exp(-0.5 * ((u - centre) / 0.12) ** 2))
        names.append(f"clay{k}")
    m = scale * np.stack(cols[:n_endmember], axis=1)
    return EndmemberLibrary(m, names[:n_endmember], wl)


def make_irf_set(
    n_band: int,
    fwhm_ps=(56.0, 64.0),
    bin_ps: float = 2.0,
    amplitudes: Optional[Sequence[float]] = None,
    delays: Optional[Sequence[float]] = None,
    n_bin: Optional[int] = None,
) -> ImpulseResponseSet:
    """Gaussian responses with widths spread over ``fwhm_ps`` (a number or a range)."""
    lo, hi = (fwhm_ps, fwhm_ps) if np.isscalar(fwhm_ps) else fwhm_ps
    if lo <= 0 or hi <= 0:
        raise ValueError("fwhm must be > 0")
    fwhm = np.linspace(lo, hi, n_band)
    amplitudes = np.ones(n_band) if amplitudes is None else np.asarray(amplitudes, dtype=float)
    delays = np.zeros(n_band) if delays is None else np.asarray(delays, dtype=float)
    params = [
        GaussianIrf(eta=float(amplitudes[b]), mu=0.0, sigma=fwhm_to_sigma_bins(fwhm[b], bin_ps), delay=float(delays[b]))
        for b in range(n_band)
    ]
    return ImpulseResponseSet.from_gaussian(params, n_bin=n_bin)


def default_irf(spec: SceneSpec) -> ImpulseResponseSet:
    amps = np.linspace(1.0, 0.8, spec.n_band)
    delays = np.round(np.linspace(0, spec.max_delay_bins, spec.n_band))
    return make_irf_set(spec.n_band, spec.fwhm_ps, spec.bin_ps, amps, delays, spec.n_bin)


# ------------------------------------------------------------------ scenes


def _shapes(n: int, m: int):
    """Three clay regions laid out on a relative grid."""
    i, j = np.mgrid[0:n, 0:m] / np.array([n, m])[:, None, None]
    disc = (i - 0.3) ** 2 + (j - 0.3) ** 2 < 0.19**2
    rect = (i > 0.58) & (i < 0.9) & (j > 0.1) & (j < 0.42)
    ellipse = ((i - 0.62) / 0.24) ** 2 + ((j - 0.72) / 0.17) ** 2 < 1.0
    return [disc, rect, ellipse]


# relative (row, first column) of each glue strip; all on bare backboard
STRIP_ANCHORS = ((0.12, 0.6), (0.26, 0.62), (0.52, 0.1))


def _anomaly_bands(L: int) -> list[int]:
    first = min(int(0.4 * L), L - 1)
    return sorted({min(first + k, L - 1) for k in range(4)})


def make_scene(spec: SceneSpec, irf: Optional[ImpulseResponseSet] = None) -> SyntheticScene:
    """Deterministic scene from ``spec``: clay shapes raised in front of a flat backboard."""
    dims = spec.dims()
    if spec.n_row < 4 or spec.n_col < 4:
        raise ValueError("scene needs at least a 4 x 4 grid")
    irf = irf or default_irf(spec)
    support = DepthSupport.default(spec.n_bin, irf)
    gen = stream(spec.seed, 0, "simulate", 10)
    n, m, R, L = spec.n_row, spec.n_col, spec.n_endmember, spec.n_band

    regions = np.zeros((n, m), dtype=np.int64)
    shapes = _shapes(n, m)
    for k, mask in enumerate(shapes):
        regions[mask] = 1 + k % (R - 1) if R > 1 else 0

    back = support.t_max - spec.backboard_offset - spec.height_range[1] // 2
    back = int(np.clip(back, support.t_min + spec.height_range[1], support.t_max))
    depth = np.full((n, m), back, dtype=np.int64)
    heights = np.linspace(spec.height_range[0], spec.height_range[1], len(shapes)).round().astype(int)
    for mask, h in zip(shapes, heights):
        depth[mask] = back - h
    depth = np.clip(depth, support.t_min, support.t_max)

    onehot = np.stack([(regions == r).astype(float) for r in range(R)], axis=-1)
    if spec.mixing_sigma > 0:
        onehot = ndimage.gaussian_filter(onehot, sigma=(spec.mixing_sigma, spec.mixing_sigma, 0), mode="nearest")
    abundances = np.maximum(onehot, 0.0)

    anomaly = np.zeros((n, m, L))
    strips = np.full((n, m), -1, dtype=np.int64)
    bands = np.asarray(spec.anomaly_bands if spec.anomaly_bands is not None else _anomaly_bands(L), dtype=int)
    length = max(2, int(round(0.3 * m)))
    width = max(2, int(round(0.08 * n)))
    for s in range(spec.n_strips):
        r_frac, c_frac = STRIP_ANCHORS[s % len(STRIP_ANCHORS)]
        row = min(int(round(r_frac * n)), n - 1)
        col0 = min(int(round(c_frac * m)), max(m - length, 0))
        rows = slice(row, min(row + width, n))
        cols = slice(col0, col0 + length)
        strips[rows, cols] = s
        mean = spec.strip_means[s % len(spec.strip_means)]
        shape = strips[rows, cols].shape + (bands.size,)
        values = gen.gamma(spec.strip_shape, mean / spec.strip_shape, size=shape)
        block = anomaly[rows, cols]
        block[..., bands] = values
        anomaly[rows, cols] = block
    return SyntheticScene(dims, support, depth, abundances, anomaly, regions, strips)


# -------------------------------------------------------------- simulation


@dataclass
class Simulation:
    cube: PhotonCube
    irf: ImpulseResponseSet  # response scaled by the calibrated gain
    gain: float


def _expected_totals(scene: SyntheticScene, lib: EndmemberLibrary, irf: ImpulseResponseSet) -> np.ndarray:
    from .likelihood import integrated_response

    d = scene.dims
    lam = scene.spectra(lib.m)
    t_eff = scene.depth + irf.delay_map(d.n_row, d.n_col)
    gt = np.stack([integrated_response(irf, b, t_eff, d.n_bin) for b in range(d.n_band)], axis=-1)
    return lam * gt


def simulate_cube(
    scene: SyntheticScene,
    lib: EndmemberLibrary,
    irf: ImpulseResponseSet,
    budget: Optional[float] = 1.0,
    seed: int = 0,
    gain: Optional[float] = None,
) -> Simulation:
    """Draw ``y ~ Poisson(gain * lam * g(t - t_ij))``.

    ``gain`` is calibrated by bisection so that the realised mean count per
    pixel and band is within 2% of ``budget``; pass ``gain`` to skip the
    calibration. Per-pixel-band totals are inverse-CDF Poisson draws from
    fixed uniforms, so the realised mean is monotone in the gain; the totals
    are then split over time bins multinomially.
    """
    d = scene.dims
    mu1 = _expected_totals(scene, lib, irf)
    u = stream(seed, 0, "simulate", 0).random(mu1.shape)

    def totals(g):
        return stats.poisson.ppf(u, g * mu1).astype(np.int64)

    if gain is None:
        if budget is None or budget <= 0:
            raise ValueError("photon budget must be > 0")
        if not np.any(mu1 > 0):
            return Simulation(PhotonCube.empty(d), irf, 1.0)
        lo, hi = 0.0, budget / mu1.mean()
        while totals(hi).mean() < budget:
            hi *= 2.0
        gain = hi
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            got = totals(mid).mean()
            if abs(got - budget) <= GAIN_RTOL * budget:
                gain = mid
                break
            lo, hi = (mid, hi) if got < budget else (lo, mid)
            gain = hi
    elif gain < 0:
        raise ValueError("gain must be >= 0")
    y_tot = totals(gain)

    gen = stream(seed, 0, "simulate", 1)
    coords, counts = [], []
    delays = irf.delay_map(d.n_row, d.n_col)
    bins = np.arange(1, d.n_bin + 1)
    for i, j, b in zip(*np.nonzero(y_tot)):
        w = irf.value(b, bins - scene.depth[i, j] - delays[i, j])
        split = gen.multinomial(y_tot[i, j, b], w / w.sum())
        nz = np.flatnonzero(split)
        coords.append(np.column_stack([np.full(nz.size, i), np.full(nz.size, j), np.full(nz.size, b), bins[nz]]))
        counts.append(split[nz])
    if coords:
        cube = PhotonCube(d, np.concatenate(coords), np.concatenate(counts))
    else:
        cube = PhotonCube.empty(d)
    return Simulation(cube, irf.scaled(gain), float(gain))


def thin_cube(cube: PhotonCube, p: float, seed: int = 0) -> PhotonCube:
    """Keep each photon independently with probability ``p``."""
    if not 0 <= p <= 1:
        raise ValueError("thinning probability must lie in [0, 1]")
    kept = stream(seed, 0, "simulate", 2).binomial(cube.counts, p)
    return PhotonCube(cube.dims, cube.coords, kept)


def empty_fraction(cube: PhotonCube) -> float:
    """Fraction of pixel-band pairs without any detection."""
    return float(np.mean(cube.y_tilde == 0))

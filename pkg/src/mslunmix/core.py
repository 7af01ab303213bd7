"""Domain value types for multispectral single-photon Lidar cubes.

Conventions used throughout the package:

* spatial indices ``(i, j)`` and band indices ``l`` are 0-based in memory and
  1-based in files;
* time bins and depth indices keep the 1-based numbering ``1..T`` so that a
  depth index ``t`` is directly a bin number;
* an impulse response ``g_l(s)`` is a function of the integer lag
  ``s = t - t0`` between the observed bin ``t`` and the surface depth ``t0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# millimetres travelled by light per picosecond
LIGHT_MM_PER_PS = 0.299792458
# Gaussian impulse responses are truncated at this many standard deviations
IRF_TRUNCATION_SIGMAS = 6.0


class ValidationError(ValueError):
    """Raised when inputs violate a structural invariant.

    ``problems`` lists every violation that was found, not only the first.
    """

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridDims:
    n_row: int
    n_col: int
    n_band: int
    n_bin: int
    bin_ps: float = 2.0

    def __post_init__(self):
        problems = [
            f"{name} must be >= 1"
            for name in ("n_row", "n_col", "n_band", "n_bin")
            if int(getattr(self, name)) < 1
        ]
        if not self.bin_ps > 0:
            problems.append("bin_ps must be > 0")
        if problems:
            raise ValidationError(problems)

    @property
    def mm_per_bin(self) -> float:
        return self.bin_ps * LIGHT_MM_PER_PS / 2.0

    @property
    def n_pixel(self) -> int:
        return self.n_row * self.n_col


def depth_bins_to_mm(t, dims: GridDims, ref_bin: float = 0.0):
    """Convert depth bin indices to a range in millimetres relative to ``ref_bin``."""
    arr = np.asarray(t)
    if np.any(arr < 0) or np.any(arr > dims.n_bin):
        raise ValueError(f"depth bin out of range [0, {dims.n_bin}]")
    out = (arr - ref_bin) * dims.mm_per_bin
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class DepthSupport:
    t_min: int
    t_max: int

    def __post_init__(self):
        if self.t_min < 1 or self.t_max < self.t_min:
            raise ValidationError(["empty depth support"])

    @property
    def size(self) -> int:
        return self.t_max - self.t_min + 1

    @property
    def bins(self) -> np.ndarray:
        return np.arange(self.t_min, self.t_max + 1)

    def check(self, n_bin: int) -> list[str]:
        if self.t_max > n_bin:
            return [f"empty depth support: t_max={self.t_max} > T={n_bin}"]
        return []

    @classmethod
    def default(cls, n_bin: int, irf: Optional["ImpulseResponseSet"] = None) -> "DepthSupport":
        """Mirror (301, T-300) at T=3000, never closer to the edges than the IRF extent."""
        margin = int(round(n_bin * 300 / 3000))
        if irf is not None:
            margin = max(margin, irf.max_extent() + 1)
        return cls(margin + 1, n_bin - margin)


class PhotonCube:
    """Sparse 4-D photon-count histogram ``y[i, j, l, t]``.

    Nonzero entries are kept as coordinate arrays sorted in lexicographic
    ``(i, j, l, t)`` order; ``t`` is stored 1-based.
    """

    def __init__(self, dims: GridDims, coords, counts):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
        counts = np.asarray(counts, dtype=np.int64).reshape(-1)
        if coords.shape[0] != counts.shape[0]:
            raise ValidationError(["coords and counts have different lengths"])
        problems = []
        if np.any(counts < 0):
            problems.append("negative count")
        upper = np.array([dims.n_row - 1, dims.n_col - 1, dims.n_band - 1, dims.n_bin])
        lower = np.array([0, 0, 0, 1])
        if coords.size and (np.any(coords < lower) or np.any(coords > upper)):
            problems.append("index outside grid")
        if problems:
            raise ValidationError(problems)
        keep = counts > 0
        coords, counts = coords[keep], counts[keep]
        order = np.lexsort(coords.T[::-1])
        coords, counts = coords[order], counts[order]
        if coords.shape[0] > 1:
            key = self._linear(coords, dims)
            if np.any(np.diff(key) == 0):
                raise ValidationError(["duplicate entry"])
        self.dims = dims
        self.coords = _frozen(coords)
        self.counts = _frozen(counts)
        y_tilde = np.zeros((dims.n_row, dims.n_col, dims.n_band), dtype=np.int64)
        np.add.at(y_tilde, (coords[:, 0], coords[:, 1], coords[:, 2]), counts)
        self.y_tilde = _frozen(y_tilde)

    @staticmethod
    def _linear(coords, dims):
        return ((coords[:, 0] * dims.n_col + coords[:, 1]) * dims.n_band + coords[:, 2]) * (
            dims.n_bin + 1
        ) + coords[:, 3]

    @classmethod
    def from_dense(cls, dense, bin_ps: float = 2.0) -> "PhotonCube":
        dense = np.asarray(dense)
        if dense.ndim != 4:
            raise ValidationError(["dense cube must be 4-D"])
        dims = GridDims(*dense.shape, bin_ps=bin_ps)
        idx = np.nonzero(dense)
        coords = np.stack(idx, axis=1)
        coords[:, 3] += 1
        return cls(dims, coords, dense[idx])

    @classmethod
    def empty(cls, dims: GridDims) -> "PhotonCube":
        return cls(dims, np.zeros((0, 4), dtype=np.int64), np.zeros(0, dtype=np.int64))

    def to_dense(self) -> np.ndarray:
        d = self.dims
        out = np.zeros((d.n_row, d.n_col, d.n_band, d.n_bin), dtype=np.int64)
        c = self.coords
        out[c[:, 0], c[:, 1], c[:, 2], c[:, 3] - 1] = self.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other):
        if not isinstance(other, PhotonCube):
            return NotImplemented
        return (
            self.dims == other.dims
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.counts, other.counts)
        )

    def __repr__(self):
        return f"PhotonCube({self.dims}, nnz={self.counts.size}, total={self.total})"


@dataclass(frozen=True, eq=False)
class EndmemberLibrary:
    m: np.ndarray
    names: tuple = ()
    wavelengths_nm: Optional[np.ndarray] = None

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        problems = []
        if m.ndim != 2:
            raise ValidationError(["endmember matrix must be 2-D (L x R)"])
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            problems.append("negative entry in endmember matrix")
        if np.any(m.max(axis=0) <= 0):
            problems.append("endmember column without a positive entry")
        names = tuple(self.names) or tuple(f"em{r + 1}" for r in range(m.shape[1]))
        if len(names) != m.shape[1]:
            problems.append("number of endmember names does not match R")
        wl = self.wavelengths_nm
        wl = np.arange(m.shape[0], dtype=float) if wl is None else np.asarray(wl, dtype=float)
        if wl.shape != (m.shape[0],):
            problems.append("number of wavelengths does not match L")
        if problems:
            raise ValidationError(problems)
        object.__setattr__(self, "m", _frozen(m))
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "wavelengths_nm", _frozen(wl))

    @property
    def n_band(self) -> int:
        return self.m.shape[0]

    @property
    def n_endmember(self) -> int:
        return self.m.shape[1]


@dataclass(frozen=True)
class GaussianIrf:
    """Parametric response ``eta * exp(-(s - mu - delay)^2 / (2 sigma^2))``."""

    eta: float
    mu: float
    sigma: float
    delay: float = 0.0

    @property
    def center(self) -> float:
        return self.mu + self.delay

    def render(self) -> tuple[int, np.ndarray]:
        half = IRF_TRUNCATION_SIGMAS * self.sigma
        lo = math.ceil(self.center - half)
        hi = math.floor(self.center + half)
        s = np.arange(lo, hi + 1, dtype=float)
        return lo, self.eta * np.exp(-0.5 * ((s - self.center) / self.sigma) ** 2)


class ImpulseResponseSet:
    """Per-wavelength impulse responses ``g_l(s)`` on integer lags.

    Each band is stored as ``(lag_start, values)`` meaning
    ``g_l(lag_start + k) = values[k]``, zero outside. Dense responses read
    from files use ``lag_start = 0``. ``pixel_delay`` optionally shifts every
    band of pixel ``(i, j)`` by an integer number of bins.
    """

    def __init__(self, kernels, params=None, pixel_delay=None, n_bin: Optional[int] = None):
        problems = []
        cleaned = []
        for band, (start, values) in enumerate(kernels):
            values = np.asarray(values, dtype=float).reshape(-1)
            if values.size == 0 or np.any(values < 0) or not np.all(np.isfinite(values)):
                problems.append(f"band {band}: impulse response has negative or invalid entries")
            elif not np.any(values > 0):
                problems.append(f"band {band}: impulse response has no positive bin")
            cleaned.append((int(start), _frozen(values)))
        if pixel_delay is not None:
            pixel_delay = np.asarray(pixel_delay)
            if pixel_delay.ndim != 2 or not np.all(pixel_delay == np.round(pixel_delay)):
                problems.append("pixel delay map must be a 2-D integer array")
            else:
                pixel_delay = _frozen(pixel_delay.astype(np.int64))
        if problems:
            raise ValidationError(problems)
        self.kernels = tuple(cleaned)
        self.params = None if params is None else tuple(params)
        self.pixel_delay = pixel_delay
        self.n_bin = n_bin

    @classmethod
    def from_gaussian(cls, params: Sequence[GaussianIrf], pixel_delay=None, n_bin=None):
        bad = [k for k, p in enumerate(params) if not (p.eta > 0 and p.sigma > 0)]
        if bad:
            raise ValidationError([f"band {k}: eta and sigma must be > 0" for k in bad])
        return cls([p.render() for p in params], params=params, pixel_delay=pixel_delay, n_bin=n_bin)

    @classmethod
    def from_dense(cls, dense, pixel_delay=None):
        dense = np.asarray(dense, dtype=float)
        return cls([(0, row) for row in dense], pixel_delay=pixel_delay, n_bin=dense.shape[1])

    @property
    def n_band(self) -> int:
        return len(self.kernels)

    def value(self, band: int, lag) -> np.ndarray:
        start, values = self.kernels[band]
        k = np.asarray(lag) - start
        inside = (k >= 0) & (k < values.size)
        return np.where(inside, values[np.clip(k, 0, values.size - 1)], 0.0)

    def dense(self, n_bin: int) -> np.ndarray:
        """Responses sampled at lags ``0..n_bin-1`` (the ``IRF 1`` file layout)."""
        lags = np.arange(n_bin)
        return np.stack([self.value(b, lags) for b in range(self.n_band)])

    def max_extent(self) -> int:
        """Largest absolute lag with nonzero response, including pixel delays."""
        ext = 0
        for start, values in self.kernels:
            ext = max(ext, abs(start), abs(start + values.size - 1))
        if self.pixel_delay is not None and self.pixel_delay.size:
            ext += int(np.abs(self.pixel_delay).max())
        return ext

    def delay_map(self, n_row: int, n_col: int) -> np.ndarray:
        if self.pixel_delay is None:
            return np.zeros((n_row, n_col), dtype=np.int64)
        return np.asarray(self.pixel_delay)

    def scaled(self, gain: float) -> "ImpulseResponseSet":
        params = None
        if self.params is not None:
            params = [GaussianIrf(p.eta * gain, p.mu, p.sigma, p.delay) for p in self.params]
        return ImpulseResponseSet(
            [(s, v * gain) for s, v in self.kernels],
            params=params,
            pixel_delay=self.pixel_delay,
            n_bin=self.n_bin,
        )


@dataclass
class SceneState:
    """One MCMC state. Arrays are owned and mutated by the sampler."""

    t: np.ndarray  # (n_row, n_col) depth bins
    a: np.ndarray  # (n_row, n_col, R)
    z: np.ndarray  # (n_row, n_col, L) in {0, 1}
    x: np.ndarray  # (n_row, n_col, L) > 0
    gamma: np.ndarray  # (R, n_row + 1, n_col + 1) > 0

    @property
    def anomaly(self) -> np.ndarray:
        return self.z * self.x

    def spectrum(self, m: np.ndarray) -> np.ndarray:
        return mix(self.a, m) + self.anomaly

    def copy(self) -> "SceneState":
        return SceneState(*(np.array(getattr(self, f)) for f in ("t", "a", "z", "x", "gamma")))

    def check(self, support: DepthSupport) -> list[str]:
        problems = []
        if np.any(self.t < support.t_min) or np.any(self.t > support.t_max):
            problems.append("depth outside support")
        if np.any(self.a < 0):
            problems.append("negative abundance")
        if np.any(self.x <= 0):
            problems.append("nonpositive anomaly value")
        if np.any(self.gamma <= 0):
            problems.append("nonpositive auxiliary variable")
        if not np.all((self.z == 0) | (self.z == 1)):
            problems.append("non-binary label")
        return problems


def mix(a: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Return ``M a`` for every pixel, ``a[..., R] -> out[..., L]``.

    Accumulates endmember by endmember instead of calling BLAS so that each
    pixel's value does not depend on how many pixels are in the batch.
    """
    out = a[..., 0:1] * m[:, 0]
    for r in range(1, m.shape[1]):
        out = out + a[..., r : r + 1] * m[:, r]
    return out


def mix_transpose(w: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Return ``M^T w`` for every pixel, ``w[..., L] -> out[..., R]``."""
    out = w[..., 0:1] * m[0, :]
    for band in range(1, m.shape[0]):
        out = out + w[..., band : band + 1] * m[band, :]
    return out


@dataclass
class HyperParams:
    """Fixed anomaly prior ``(alpha, nu)`` and the adapted MRF parameters."""

    alpha: float = 1.0
    nu: float = 0.05
    epsilon: float = 0.2
    beta_n: float = 0.1
    beta_l: float = 0.1
    beta_0: float = 0.9
    c: np.ndarray = field(default_factory=lambda: np.array([2.0]))

    def __post_init__(self):
        self.c = np.atleast_1d(np.asarray(self.c, dtype=float)).copy()
        problems = []
        if not (self.alpha > 0 and self.nu > 0):
            problems.append("alpha and nu must be > 0")
        if self.epsilon < 0:
            problems.append("epsilon must be >= 0")
        if not (self.beta_n > 0 and self.beta_l > 0):
            problems.append("beta_n and beta_l must be > 0")
        if not 0 <= self.beta_0 <= 1:
            problems.append("beta_0 must lie in [0, 1]")
        if np.any(self.c <= 1):
            problems.append("every c_r must be > 1")
        if problems:
            raise ValidationError(problems)

    def theta(self) -> np.ndarray:
        """Adapted vector ``(epsilon, beta_n, beta_l, beta_0, c_1..c_R)``."""
        return np.concatenate([[self.epsilon, self.beta_n, self.beta_l, self.beta_0], self.c])

    def with_theta(self, theta) -> "HyperParams":
        theta = np.asarray(theta, dtype=float)
        return HyperParams(self.alpha, self.nu, *theta[:4], c=theta[4:])


@dataclass(frozen=True)
class Problem:
    """A validated inference instance."""

    cube: PhotonCube
    library: EndmemberLibrary
    irf: ImpulseResponseSet
    support: DepthSupport

    @property
    def dims(self) -> GridDims:
        return self.cube.dims


def validate_inputs(
    cube: PhotonCube,
    lib: EndmemberLibrary,
    irf: ImpulseResponseSet,
    sup: DepthSupport,
) -> Problem:
    """Check cross-input consistency and return a :class:`Problem`.

    Every violation is collected before raising :class:`ValidationError`.
    """
    d = cube.dims
    problems = []
    if lib.n_band != d.n_band:
        problems.append(f"band-count mismatch: library L={lib.n_band}, cube L={d.n_band}")
    if irf.n_band != d.n_band:
        problems.append(f"band-count mismatch: impulse responses L={irf.n_band}, cube L={d.n_band}")
    if irf.n_bin is not None and irf.n_bin != d.n_bin:
        problems.append(f"bin-count mismatch: impulse responses T={irf.n_bin}, cube T={d.n_bin}")
    if irf.pixel_delay is not None and irf.pixel_delay.shape != (d.n_row, d.n_col):
        problems.append("pixel delay map does not match the spatial grid")
    problems += sup.check(d.n_bin)
    if problems:
        raise ValidationError(problems)
    return Problem(cube, lib, irf, sup)

"""Text file formats for cubes, libraries, impulse responses and output maps.

Reals are written with 17 significant digits so every reader/writer pair
round-trips exactly. Indices in files are 1-based.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

import numpy as np

from .core import EndmemberLibrary, GaussianIrf, GridDims, ImpulseResponseSet, PhotonCube, ValidationError

REAL = "{:.17g}"
ABUNDANCE_SCALE = (0.0, 1.3)
CONFIDENCE_SCALE = (0.0, 1.0)
LOG_INTENSITY_SCALE = (-12.0, 0.0)


class FormatError(ValidationError):
    """Malformed input file; the message names the file and line."""

    def __init__(self, path, line: Optional[int], message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__([f"{where}: {message}"])


def _real(x) -> str:
    return REAL.format(float(x))


# -------------------------------------------------------------------- cubes


def write_cube(path, cube: PhotonCube) -> None:
    d = cube.dims
    lines = [f"MSLCUBE 1 {d.n_row} {d.n_col} {d.n_band} {d.n_bin} {_real(d.bin_ps)}"]
    one = cube.coords.copy()
    one[:, :3] += 1
    lines.extend(f"{i} {j} {b} {t} {c}" for (i, j, b, t), c in zip(one.tolist(), cube.counts.tolist()))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cube(path) -> PhotonCube:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 7 or header[:2] != ["MSLCUBE", "1"]:
            raise FormatError(path, 1, "expected header 'MSLCUBE 1 <n_row> <n_col> <L> <T> <bin_ps>'")
        try:
            dims = GridDims(*(int(v) for v in header[2:6]), float(header[6]))
        except (ValueError, ValidationError) as exc:
            raise FormatError(path, 1, f"bad header: {exc}") from None
        upper = np.array([dims.n_row, dims.n_col, dims.n_band, dims.n_bin])
        rows, prev = [], None
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 5:
                raise FormatError(path, lineno, "expected '<i> <j> <l> <t> <count>'")
            try:
                vals = [int(p) for p in parts]
            except ValueError:
                raise FormatError(path, lineno, "non-integer field") from None
            idx = np.array(vals[:4])
            if np.any(idx < 1) or np.any(idx > upper):
                raise FormatError(path, lineno, f"index {tuple(vals[:4])} out of range")
            if vals[4] < 0:
                raise FormatError(path, lineno, f"negative count {vals[4]}")
            key = tuple(vals[:4])
            if prev is not None and key <= prev:
                raise FormatError(path, lineno, "entries not in ascending lexicographic order")
            prev = key
            rows.append(vals)
    if not rows:
        return PhotonCube.empty(dims)
    arr = np.array(rows, dtype=np.int64)
    coords = arr[:, :4].copy()
    coords[:, :3] -= 1
    return PhotonCube(dims, coords, arr[:, 4])


# --------------------------------------------------------------- endmembers


def write_endmembers(path, lib: EndmemberLibrary) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavelength_nm", *lib.names])
        for wl, row in zip(lib.wavelengths_nm, lib.m):
            w.writerow([_real(wl), *(_real(v) for v in row)])


def read_endmembers(path) -> EndmemberLibrary:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or rows[0][0].strip() != "wavelength_nm" or len(rows[0]) < 2:
        raise FormatError(path, 1, "expected header 'wavelength_nm,<name>,...'")
    names = [n.strip() for n in rows[0][1:]]
    values = []
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(names) + 1:
            raise FormatError(path, lineno, f"expected {len(names) + 1} columns, got {len(r)}")
        try:
            values.append([float(v) for v in r])
        except ValueError:
            raise FormatError(path, lineno, "non-numeric cell") from None
    arr = np.array(values, dtype=float).reshape(-1, len(names) + 1)
    return EndmemberLibrary(arr[:, 1:], names, arr[:, 0])


# ------------------------------------------------------------ impulse responses


def write_irf(path, irf: ImpulseResponseSet, n_bin: Optional[int] = None, parametric: Optional[bool] = None) -> None:
    """Write ``IRFGAUSS 1`` when parameters are known (unless ``parametric=False``), else ``IRF 1``."""
    if parametric is None:
        parametric = irf.params is not None
    if parametric:
        if irf.params is None:
            raise ValueError("response has no parametric form")
        lines = [f"IRFGAUSS 1 {irf.n_band}"]
        lines += [" ".join(_real(v) for v in (p.eta, p.mu, p.sigma, p.delay)) for p in irf.params]
    else:
        n_bin = n_bin or irf.n_bin
        if n_bin is None:
            raise ValueError("dense response needs the bin count")
        if any(s < 0 for s, _ in irf.kernels):
            raise ValueError("dense layout cannot store responses at negative lags")
        dense = irf.dense(n_bin)
        lines = [f"IRF 1 {irf.n_band} {n_bin}"]
        lines += [" ".join(_real(v) for v in row) for row in dense]
    Path(path).write_text("\n".join(lines) + "\n")


def read_irf(path, pixel_delay=None, n_bin: Optional[int] = None) -> ImpulseResponseSet:
    lines = [ln for ln in Path(path).read_text().splitlines()]
    if not lines:
        raise FormatError(path, 1, "empty file")
    head = lines[0].split()
    body = [(k + 2, ln.split()) for k, ln in enumerate(lines[1:]) if ln.strip()]
    try:
        if head[:2] == ["IRFGAUSS", "1"] and len(head) == 3:
            n_band = int(head[2])
            if len(body) != n_band:
                raise FormatError(path, None, f"expected {n_band} rows, got {len(body)}")
            params = []
            for lineno, parts in body:
                if len(parts) != 4:
                    raise FormatError(path, lineno, "expected '<eta> <mu_bins> <sigma_bins> <delay_bins>'")
                params.append(GaussianIrf(*(float(v) for v in parts)))
            return ImpulseResponseSet.from_gaussian(params, pixel_delay=pixel_delay, n_bin=n_bin)
        if head[:2] == ["IRF", "1"] and len(head) == 4:
            n_band, T = int(head[2]), int(head[3])
            if len(body) != n_band:
                raise FormatError(path, None, f"expected {n_band} rows, got {len(body)}")
            dense = []
            for lineno, parts in body:
                if len(parts) != T:
                    raise FormatError(path, lineno, f"expected {T} values, got {len(parts)}")
                dense.append([float(v) for v in parts])
            return ImpulseResponseSet.from_dense(np.array(dense), pixel_delay=pixel_delay)
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise FormatError(path, None, f"non-numeric value ({exc})") from None
    raise FormatError(path, 1, "expected 'IRF 1 <L> <T>' or 'IRFGAUSS 1 <L>' header")


# --------------------------------------------------------------------- maps


def write_matrix(path, mat: np.ndarray) -> None:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    Path(path).write_text("\n".join(",".join(_real(v) for v in row) for row in mat) + "\n")


def read_matrix(path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise FormatError(path, None, f"non-numeric cell ({exc})") from None


def to_pgm16(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map ``[lo, hi]`` linearly onto ``[0, 65535]`` (values outside are clipped)."""
    scaled = (np.asarray(img, dtype=float) - lo) / (hi - lo)
    return np.round(np.clip(scaled, 0.0, 1.0) * 65535).astype(">u2")


def write_pgm(path, img: np.ndarray, lo: float, hi: float) -> None:
    data = to_pgm16(img, lo, hi)
    n, m = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{m} {n}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5" or int(tokens[3]) != 65535:
        raise FormatError(path, 1, "expected 16-bit binary PGM")
    m, n = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw[pos + 1 :], dtype=">u2").reshape(n, m).astype(np.int64)


def write_maps(bundle, out_dir, names=None, depth_range_mm=None) -> list[Path]:
    """CSV matrices plus 16-bit PGM quicklooks for every estimated product.

    PGM scaling: abundances over [0, 1.3], confidence over [0, 1], anomaly
    log intensity over [-12, 0], depth over ``depth_range_mm`` (the map's own
    range when omitted).
    """
    conf = np.asarray(bundle.confidence)
    if np.any(conf < 0) or np.any(conf > 1) or not np.all(np.isfinite(conf)):
        raise ValueError("confidence map must lie in [0, 1]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    R = bundle.abundances.shape[-1]
    names = names or [str(r + 1) for r in range(R)]
    written = []

    def emit(stem, mat, scale):
        write_matrix(out / f"{stem}.csv", mat)
        write_pgm(out / f"{stem}.pgm", mat, *scale)
        written.extend([out / f"{stem}.csv", out / f"{stem}.pgm"])

    depth = np.asarray(bundle.depth_mm, dtype=float)
    lo, hi = depth_range_mm or (float(depth.min()), float(depth.max()))
    emit("depth_mm", depth, (lo, hi if hi > lo else lo + 1.0))
    emit("confidence", conf, CONFIDENCE_SCALE)
    for r in range(R):
        emit(f"abundance_{names[r]}", bundle.abundances[..., r], ABUNDANCE_SCALE)
    emit("anomaly_log_intensity", bundle.anomaly_log_intensity, LOG_INTENSITY_SCALE)
    labels = np.asarray(bundle.labels)
    for b in range(labels.shape[-1]):
        emit(f"labels_{b + 1}", labels[..., b], (0.0, 1.0))
    return written


def read_label_maps(directory) -> np.ndarray:
    """Stack ``labels_<band>.csv`` files back into an ``(n_row, n_col, L)`` array."""
    d = Path(directory)
    files = sorted(d.glob("labels_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise FormatError(d, None, "no labels_<band>.csv files")
    return np.stack([read_matrix(f) for f in files], axis=-1).astype(np.int8)

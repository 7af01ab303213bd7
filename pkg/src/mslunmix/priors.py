"""Prior densities and their local conditionals.

Pairwise potentials (the TV depth cost and the Ising agreement counts) sum
over ordered neighbour pairs, so every edge appears twice. The exact local
conditional of ``exp(-eps * phi)`` therefore carries ``2 * eps`` per
neighbour, and likewise ``2 * beta`` for the Ising couplings.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import gammaln

BOUNDARY_ABUNDANCE = 0.01


def four_neighbors(i: int, j: int, n_row: int, n_col: int) -> list[tuple[int, int]]:
    out = []
    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        p, q = i + di, j + dj
        if 0 <= p < n_row and 0 <= q < n_col:
            out.append((p, q))
    return out


@lru_cache(maxsize=64)
def neighbor_degree(n_row: int, n_col: int) -> np.ndarray:
    deg = np.full((n_row, n_col), 4, dtype=np.int64)
    deg[0, :] -= 1
    deg[-1, :] -= 1
    deg[:, 0] -= 1
    deg[:, -1] -= 1
    deg.setflags(write=False)
    return deg


# ----------------------------------------------------------------- depth (TV)


def tv_potential(t) -> float:
    """Sum of ``|t_p - t_q|`` over ordered 4-neighbour pairs."""
    t = np.asarray(t, dtype=np.int64)
    return float(2 * (np.abs(np.diff(t, axis=0)).sum() + np.abs(np.diff(t, axis=1)).sum()))


def depth_conditional_log_prior(t, neighbors, epsilon: float):
    """Local log-weight of depth(s) ``t`` given its neighbours' depths.

    Equals ``-2 eps sum_q |t - t_q|``, the exact conditional of the
    ordered-pair TV field up to a constant.
    """
    t = np.asarray(t, dtype=float)
    nb = np.asarray(neighbors, dtype=float).reshape(-1)
    if nb.size == 0:
        return np.zeros_like(t)
    return -2.0 * epsilon * np.abs(t[..., None] - nb).sum(axis=-1)


def neighbor_depth_stack(t: np.ndarray):
    """Neighbour depths ``(4, n_row, n_col)`` and validity mask for every pixel."""
    n, m = t.shape
    vals = np.zeros((4, n, m), dtype=t.dtype)
    mask = np.zeros((4, n, m), dtype=bool)
    vals[0, 1:, :], mask[0, 1:, :] = t[:-1, :], True
    vals[1, :-1, :], mask[1, :-1, :] = t[1:, :], True
    vals[2, :, 1:], mask[2, :, 1:] = t[:, :-1], True
    vals[3, :, :-1], mask[3, :, :-1] = t[:, 1:], True
    return vals, mask


# ------------------------------------------------------- gamma-MRF abundances


def gmrf_abar(gammas) -> float:
    """``4 / sum(1/gamma)`` over the four auxiliaries around one abundance."""
    g = np.asarray(gammas, dtype=float)
    if np.any(g <= 0):
        raise ValueError("auxiliary variables must be > 0")
    return float(4.0 / np.sum(1.0 / g))


def gmrf_abar_field(gamma_r: np.ndarray) -> np.ndarray:
    """Prior-mean field ``(n_row, n_col)`` from an ``(n_row+1, n_col+1)`` auxiliary grid."""
    inv = 1.0 / gamma_r
    return 4.0 / (inv[:-1, :-1] + inv[1:, :-1] + inv[:-1, 1:] + inv[1:, 1:])


def padded_abundance(a_r: np.ndarray) -> np.ndarray:
    return np.pad(a_r, 1, constant_values=BOUNDARY_ABUNDANCE)


def gmrf_beta(abundances) -> float:
    """Mean of the four abundances around one auxiliary variable."""
    return float(np.mean(np.asarray(abundances, dtype=float)))


def gmrf_beta_field(a_r: np.ndarray) -> np.ndarray:
    """Inverse-gamma scale driver ``(n_row+1, n_col+1)``; off-grid abundances are 0.01."""
    p = padded_abundance(a_r)
    return 0.25 * (p[:-1, :-1] + p[1:, :-1] + p[:-1, 1:] + p[1:, 1:])


def _edge_sum(a_r: np.ndarray, gamma_r: np.ndarray, boundary: bool) -> float:
    """``sum over edges of a / gamma``, optionally including off-grid pseudo-abundances."""
    inv = 1.0 / gamma_r
    if boundary:
        p = padded_abundance(a_r)
        return float((p[:-1, :-1] * inv + p[1:, :-1] * inv + p[:-1, 1:] * inv + p[1:, 1:] * inv).sum())
    return float((a_r * (inv[:-1, :-1] + inv[1:, :-1] + inv[:-1, 1:] + inv[1:, 1:])).sum())


def gmrf_joint_log_density(a_r, gamma_r, c: float, boundary: bool = False) -> float:
    """Unnormalised log-density of one gamma-MRF pair ``(A_r, Gamma_r)``.

    ``(c-1) sum log a - (c+1) sum log gamma - c/4 sum_edges a/gamma``. With
    ``boundary=True`` the edges to the fixed 0.01 pseudo-abundances are
    included, which is the density the Gibbs updates actually target.
    """
    a_r = np.asarray(a_r, dtype=float)
    gamma_r = np.asarray(gamma_r, dtype=float)
    if c <= 1 or np.any(a_r < 0) or np.any(gamma_r <= 0):
        raise ValueError("gamma-MRF density needs c > 1, a >= 0, gamma > 0")
    return float(
        (c - 1) * np.log(a_r).sum()
        - (c + 1) * np.log(gamma_r).sum()
        - 0.25 * c * _edge_sum(a_r, gamma_r, boundary)
    )


def gmrf_score(a_r, gamma_r) -> float:
    """Derivative in ``c`` of the boundary-inclusive log-density exponent."""
    return float(np.log(a_r).sum() - np.log(gamma_r).sum() - 0.25 * _edge_sum(a_r, gamma_r, True))


# ------------------------------------------------------------- Ising labels


def ising_suff_stats(z) -> tuple[float, float, int, int]:
    """``(phi_L, phi_N, n_zero, n_one)`` for labels ``z[i, j, l]``.

    Agreements are counted over ordered pairs; the spectral neighbourhood is
    ``l +- 1`` and the spatial one is 4-connected within a band.
    """
    z = np.asarray(z)
    phi_l = 2 * int((z[:, :, 1:] == z[:, :, :-1]).sum())
    phi_n = 2 * int((z[1:] == z[:-1]).sum() + (z[:, 1:] == z[:, :-1]).sum())
    n_one = int(z.sum())
    return float(phi_l), float(phi_n), z.size - n_one, n_one


def ising_log_prior(z, beta_n: float, beta_l: float, beta_0: float) -> float:
    phi_l, phi_n, n0, n1 = ising_suff_stats(z)
    return beta_n * phi_n + beta_l * phi_l + beta_0 * n0 + (1 - beta_0) * n1


def ising_neighbor_ones(z: np.ndarray):
    """Per site: number of spatial / spectral neighbours equal to 1, and the degrees."""
    zi = z.astype(np.int64)
    sp = np.zeros_like(zi)
    sp[1:] += zi[:-1]
    sp[:-1] += zi[1:]
    sp[:, 1:] += zi[:, :-1]
    sp[:, :-1] += zi[:, 1:]
    spec = np.zeros_like(zi)
    spec[:, :, 1:] += zi[:, :, :-1]
    spec[:, :, :-1] += zi[:, :, 1:]
    n, m, L = z.shape
    deg_sp = np.broadcast_to(neighbor_degree(n, m)[:, :, None], z.shape)
    deg_spec = np.full(L, 2)
    if L == 1:
        deg_spec[:] = 0
    else:
        deg_spec[0] = deg_spec[-1] = 1
    return sp, spec, deg_sp, np.broadcast_to(deg_spec, z.shape)


def ising_prior_log_odds(z: np.ndarray, beta_n: float, beta_l: float, beta_0: float) -> np.ndarray:
    """Prior ``log P(z=1 | rest) - log P(z=0 | rest)`` for every site."""
    sp, spec, deg_sp, deg_spec = ising_neighbor_ones(z)
    return (
        2.0 * beta_n * (2 * sp - deg_sp)
        + 2.0 * beta_l * (2 * spec - deg_spec)
        + (1.0 - 2.0 * beta_0)
    )


def ising_local_log_odds(site, z, beta_n: float, beta_l: float, beta_0: float):
    """Local log-weights ``(w0, w1)`` of one site; other sites' labels are read from ``z``."""
    i, j, band = site
    z = np.asarray(z)
    n, m, L = z.shape
    spatial = [z[p, q, band] for p, q in four_neighbors(i, j, n, m)]
    spectral = [z[i, j, b] for b in (band - 1, band + 1) if 0 <= b < L]
    w = []
    for k in (0, 1):
        agree_n = sum(1 for v in spatial if v == k)
        agree_l = sum(1 for v in spectral if v == k)
        bias = beta_0 if k == 0 else 1.0 - beta_0
        w.append(2.0 * beta_n * agree_n + 2.0 * beta_l * agree_l + bias)
    return w[0], w[1]


# --------------------------------------------------------- anomaly values


def anomaly_value_log_prior(x, alpha: float, nu: float):
    """Gamma(shape ``alpha``, scale ``nu``) log-density."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0) or alpha <= 0 or nu <= 0:
        raise ValueError("anomaly prior needs x > 0, alpha > 0, nu > 0")
    out = (alpha - 1) * np.log(x) - x / nu - alpha * np.log(nu) - gammaln(alpha)
    return float(out) if out.ndim == 0 else out

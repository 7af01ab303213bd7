"""Conditional update kernels of the Metropolis-within-Gibbs sampler.

Each kernel takes the current state, draws all of its randomness for the
sweep from a stream addressed by ``(seed, sweep, stage, phase)`` and returns
new arrays. Per-pixel arithmetic avoids BLAS so that results do not depend
on how pixels are chunked across workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, xlogy

from . import priors
from .core import mix, mix_transpose
from .likelihood import SuffStats, grad_log_lik_anomaly
from .rng import stream


def parallel_rows(fn: Callable[[slice], tuple], n: int, workers: int = 1) -> tuple:
    """Apply ``fn`` to contiguous row slices and concatenate the returned arrays."""
    if workers <= 1 or n < 2 * workers:
        return fn(slice(0, n))
    edges = np.linspace(0, n, workers + 1).astype(int)
    slices = [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(fn, slices))
    return tuple(np.concatenate(p, axis=0) for p in zip(*parts))


def sample_categorical(log_w: np.ndarray, u: np.ndarray):
    """Inverse-CDF draw per row of ``log_w``; also returns the normalised pmf."""
    w = np.exp(log_w - log_w.max(axis=-1, keepdims=True))
    cdf = np.cumsum(w, axis=-1)
    total = cdf[..., -1:]
    idx = (cdf <= u[..., None] * total).sum(axis=-1)
    return np.minimum(idx, log_w.shape[-1] - 1), w / total


# ------------------------------------------------------------------- depth


def depth_log_lik_table(stats: SuffStats, lam: np.ndarray) -> np.ndarray:
    """Depth-dependent log-likelihood ``(n_row, n_col, T')`` for fixed spectra ``lam``."""
    g = stats.g_tilde_pixels()
    out = np.array(stats.log_g_dot_y_sum)
    for band in range(stats.n_band):
        out -= lam[..., band, None] * g[..., band, :]
    return out


@lru_cache(maxsize=64)
def checkerboard(shape: tuple[int, int], color: int) -> np.ndarray:
    i, j = np.indices(shape)
    mask = (i + j) % 2 == color
    mask.setflags(write=False)
    return mask


def update_depths(
    t: np.ndarray,
    loglik: Optional[np.ndarray],
    support_bins: np.ndarray,
    epsilon: float,
    tv_enabled: bool,
    seed: int,
    sweep: int,
    stage: str = "depth",
    workers: int = 1,
):
    """Gibbs update of every depth from its discrete conditional on the support.

    ``loglik`` is the ``(n_row, n_col, T')`` depth log-likelihood table, or
    ``None`` for a prior-only chain. With the TV prior the two checkerboard
    colours are updated one after the other; without it all pixels are drawn
    at once. Returns the new depth field and each pixel's conditional pmf.
    """
    n, m = t.shape
    n_sup = support_bins.size
    if loglik is None:
        loglik = np.zeros((n, m, n_sup))
    t_new = np.array(t)
    pmf = np.empty((n, m, n_sup))
    phases = [None] if not tv_enabled else [0, 1]
    for phase in phases:
        u = stream(seed, sweep, stage, 0 if phase is None else phase + 1).random(n * m).reshape(n, m)
        if phase is None:
            sites = np.ones((n, m), dtype=bool)
        else:
            sites = checkerboard((int(n), int(m)), phase)
        flat_idx = np.flatnonzero(sites)
        ll = loglik.reshape(n * m, n_sup)[flat_idx]
        dead = np.isneginf(ll).all(axis=-1)
        if dead.any():
            i, j = np.unravel_index(flat_idx[np.argmax(dead)], (n, m))
            raise ValueError(f"depth conditional of pixel ({i}, {j}) is zero on the whole support")
        uu = u.reshape(-1)[flat_idx]
        if phase is not None:
            nb_vals, nb_mask = priors.neighbor_depth_stack(t_new)
            nb_vals = nb_vals.reshape(4, -1)[:, flat_idx]
            nb_mask = nb_mask.reshape(4, -1)[:, flat_idx]

        def work(sl, ll=ll, uu=uu, phase=phase):
            log_w = ll[sl]
            if phase is not None and epsilon != 0:
                tv = np.zeros_like(log_w)
                for k in range(4):
                    diff = np.abs(support_bins[None, :] - nb_vals[k, sl, None])
                    tv += np.where(nb_mask[k, sl, None], diff, 0)
                log_w = log_w - 2.0 * epsilon * tv
            idx, p = sample_categorical(log_w, uu[sl])
            return support_bins[idx], p

        new_t, p = parallel_rows(work, flat_idx.size, workers)
        t_new.reshape(-1)[flat_idx] = new_t
        pmf.reshape(n * m, n_sup)[flat_idx] = p
    return t_new, pmf


# ------------------------------------------------------------------ labels


@lru_cache(maxsize=64)
def parity3(shape: tuple[int, int, int], color: int) -> np.ndarray:
    i, j, band = np.indices(shape)
    mask = (i + j + band) % 2 == color
    mask.setflags(write=False)
    return mask


def label_log_lik_ratio(y_tilde, base, x, g_tilde):
    """``log pi(1) - log pi(0)`` from the reduced likelihood; ``+inf`` if only z=1 is possible."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ll1 = xlogy(y_tilde, base + x) - (base + x) * g_tilde
        ll0 = xlogy(y_tilde, base) - base * g_tilde
        return np.where(np.isneginf(ll0), np.inf, ll1 - ll0)


def update_labels(
    z: np.ndarray,
    ll_ratio: Optional[np.ndarray],
    beta_n: float,
    beta_l: float,
    beta_0: float,
    seed: int,
    sweep: int,
    stage: str = "label",
) -> np.ndarray:
    """Gibbs update of the anomaly labels in two parity colours of the 3-D lattice.

    ``ll_ratio`` is the per-site likelihood log-odds (``None`` for a
    prior-only chain). Sites of one colour share no spatial or spectral edge.
    """
    z = np.array(z)
    shape = tuple(z.shape)
    for color in (0, 1):
        u = stream(seed, sweep, stage, color).random(z.size).reshape(z.shape)
        sites = parity3(shape, color)
        log_odds = priors.ising_prior_log_odds(z, beta_n, beta_l, beta_0)
        if ll_ratio is not None:
            log_odds = log_odds + ll_ratio
        draw = (u < expit(log_odds)).astype(z.dtype)
        z[sites] = draw[sites]
    return z


# -------------------------------------------------------------- abundances


@dataclass
class AbundanceTarget:
    """Per-pixel conditional of the abundances, flattened to ``(N, ...)`` rows."""

    y_tilde: np.ndarray  # (N, L)
    g_tilde: np.ndarray  # (N, L)
    r: np.ndarray  # (N, L)
    abar: np.ndarray  # (N, R)
    c: np.ndarray  # (R,)
    m: np.ndarray  # (L, R)

    def rows(self, sl: slice) -> "AbundanceTarget":
        return AbundanceTarget(
            self.y_tilde[sl], self.g_tilde[sl], self.r[sl], self.abar[sl], self.c, self.m
        )

    def potential(self, a: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = mix(a, self.m) + self.r
            ll = (xlogy(self.y_tilde, lam) - lam * self.g_tilde).sum(axis=-1)
            lp = ((self.c - 1) * np.log(a) - self.c * a / self.abar).sum(axis=-1)
        out = -(ll + lp)
        return np.where(np.isnan(out), np.inf, out)

    def grad_potential(self, a: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = mix(a, self.m) + self.r
            ratio = np.where(self.y_tilde > 0, self.y_tilde / lam, 0.0)
            g_ll = mix_transpose(ratio - self.g_tilde, self.m)
            g_lp = (self.c - 1) / a - self.c / self.abar
        return -(g_ll + g_lp)


def leapfrog(target: AbundanceTarget, a, p, step, n_steps: int):
    """Leapfrog trajectory reflected at ``a_r = 0``; ``step`` is per row ``(N, 1)``."""
    a = np.array(a)
    p = np.array(p)
    if n_steps == 0:
        return a, p
    with np.errstate(invalid="ignore", over="ignore"):
        p = p - 0.5 * step * target.grad_potential(a)
        for s in range(n_steps):
            a = a + step * p
            neg = a < 0
            a = np.where(neg, -a, a)
            p = np.where(neg, -p, p)
            if s < n_steps - 1:
                p = p - step * target.grad_potential(a)
        p = p - 0.5 * step * target.grad_potential(a)
    return a, p


def hamiltonian(target: AbundanceTarget, a, p) -> np.ndarray:
    return target.potential(a) + 0.5 * (p * p).sum(axis=-1)


def update_abundances(
    a: np.ndarray,
    target: AbundanceTarget,
    log_step: np.ndarray,
    n_steps: int,
    seed: int,
    sweep: int,
    stage: str = "abundance",
    workers: int = 1,
):
    """One constrained HMC move per pixel, all pixels independently.

    ``a`` is ``(N, R)``; ``log_step`` holds one log step size per pixel.
    Returns the new abundances and each pixel's acceptance probability;
    a non-finite Hamiltonian rejects the move.
    """
    gen = stream(seed, sweep, stage)
    p0 = gen.standard_normal(a.shape)
    u = gen.random(a.shape[0])

    def work(sl):
        tgt = target.rows(sl)
        a0 = a[sl]
        step = np.exp(log_step[sl])[:, None]
        a1, p1 = leapfrog(tgt, a0, p0[sl], step, n_steps)
        h0 = hamiltonian(tgt, a0, p0[sl])
        h1 = hamiltonian(tgt, a1, p1)
        with np.errstate(invalid="ignore", over="ignore"):
            log_acc = np.where(np.isfinite(h1) & np.all(a1 > 0, axis=-1), h0 - h1, -np.inf)
        acc = np.exp(np.minimum(log_acc, 0.0))
        take = u[sl] < acc
        return np.where(take[:, None], a1, a0), acc

    return parallel_rows(work, a.shape[0], workers)


# ---------------------------------------------------------- anomaly values


def anomaly_log_conditional(x, y_tilde, base, g_tilde, alpha: float, nu: float):
    """Unnormalised log-conditional of anomaly values at sites with ``z = 1``."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return xlogy(y_tilde, base + x) - (base + x) * g_tilde + (alpha - 1) * np.log(x) - x / nu


def grad_anomaly_log_conditional(x, y_tilde, base, g_tilde, alpha: float, nu: float):
    """Derivative of :func:`anomaly_log_conditional` with respect to ``x``."""
    x = np.asarray(x, dtype=float)
    return grad_log_lik_anomaly(y_tilde, g_tilde, base, x, 1) + (alpha - 1) / x - 1.0 / nu


def update_anomaly_values(
    x: np.ndarray,
    z: np.ndarray,
    y_tilde: np.ndarray,
    base: np.ndarray,
    g_tilde: np.ndarray,
    alpha: float,
    nu: float,
    seed: int,
    sweep: int,
):
    """Independent Metropolis-Hastings per site with the gamma prior as proposal.

    Prior terms cancel; sites with ``z = 0`` accept with probability one.
    Returns the new values and the acceptance probabilities.
    """
    gen = stream(seed, sweep, "anomaly")
    prop = gen.gamma(alpha, nu, size=x.shape)
    u = gen.random(x.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = (
            xlogy(y_tilde, base + prop) - xlogy(y_tilde, base + x) - (prop - x) * g_tilde
        )
    log_ratio = np.where(z == 1, log_ratio, 0.0)
    log_ratio = np.where(np.isnan(log_ratio), -np.inf, log_ratio)
    acc = np.exp(np.minimum(log_ratio, 0.0))
    return np.where(u < acc, prop, x), acc


# -------------------------------------------------------------- auxiliaries


def update_gamma_aux(a: np.ndarray, c: np.ndarray, seed: int, sweep: int, stage: str = "gamma"):
    """Draw every auxiliary from its inverse-gamma conditional ``IG(c, c * beta)``.

    ``a`` is ``(n_row, n_col, R)``; returns ``(R, n_row+1, n_col+1)``.
    """
    n, m, R = a.shape
    gen = stream(seed, sweep, stage)
    out = np.empty((R, n + 1, m + 1))
    for r in range(R):
        beta = priors.gmrf_beta_field(a[:, :, r])
        out[r] = c[r] * beta / gen.standard_gamma(c[r], size=beta.shape)
    return out


def abar_field(gamma: np.ndarray) -> np.ndarray:
    """Prior means ``(n_row, n_col, R)`` for every abundance."""
    return np.stack([priors.gmrf_abar_field(g) for g in gamma], axis=-1)


def update_abundances_prior(gamma: np.ndarray, c: np.ndarray, seed: int, sweep: int, stage="aux-abundance"):
    """Exact Gibbs draw of the abundances under the gamma-MRF prior alone."""
    abar = abar_field(gamma)
    gen = stream(seed, sweep, stage)
    draws = gen.standard_gamma(np.broadcast_to(c, abar.shape))
    return draws * abar / c

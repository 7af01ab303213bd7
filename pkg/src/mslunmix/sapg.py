"""Stochastic-approximation updates of the MRF hyperparameters.

The marginal-likelihood gradient of an exponential-family prior
``exp(theta . s(x)) / C(theta)`` is ``E_post[s] - E_prior[s]``. One sample of
each expectation comes from the main chain and from an auxiliary chain that
targets the prior alone. Scores are divided by site counts so that step
sizes do not depend on the image size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import priors

N_FIXED = 4  # epsilon, beta_n, beta_l, beta_0; then one c per endmember


@dataclass
class ThetaBox:
    eps_max: float = 5.0
    beta_min: float = 1e-6
    beta_max: float = 1.0
    c_min: float = 1.0 + 1e-3
    c_max: float = 50.0

    def project(self, theta: np.ndarray) -> np.ndarray:
        out = np.array(theta, dtype=float)
        out[0] = np.clip(out[0], 0.0, self.eps_max)
        out[1:3] = np.clip(out[1:3], self.beta_min, self.beta_max)
        out[3] = np.clip(out[3], 0.0, 1.0)
        out[N_FIXED:] = np.clip(out[N_FIXED:], self.c_min, self.c_max)
        return out


def prior_scores(t, z, a, gamma) -> np.ndarray:
    """Per-site sufficient statistics ``d log prior / d theta`` (unnormalised part).

    ``t`` may be ``None`` when the depth prior is not adapted.
    """
    n, m, L = z.shape
    R = a.shape[-1]
    out = np.zeros(N_FIXED + R)
    if t is not None:
        out[0] = -priors.tv_potential(t) / t.size
    phi_l, phi_n, n0, n1 = priors.ising_suff_stats(z)
    out[1] = phi_n / z.size
    out[2] = phi_l / z.size
    out[3] = (n0 - n1) / z.size
    for r in range(R):
        out[N_FIXED + r] = priors.gmrf_score(a[:, :, r], gamma[r]) / (n * m)
    return out


def sapg_step_size(delta0: np.ndarray, u: int, exponent: float = 0.8) -> np.ndarray:
    return np.asarray(delta0) * float(u) ** (-exponent)


def auto_delta0(theta: np.ndarray, grad: np.ndarray, fraction: float = 0.05, floor: float = 0.05):
    """Per-parameter ``delta0`` so that a step of gradient size ``grad`` moves each entry by ``fraction``.

    Entries with a zero gradient scale fall back to a unit gradient.
    """
    scale = np.maximum(np.abs(theta), floor)
    g = np.abs(np.asarray(grad, dtype=float))
    return fraction * scale / np.where(g > 0, g, 1.0)


def sapg_update_hyperparams(theta, main_scores, aux_scores, delta_u, box: ThetaBox, mask=None):
    """Projected stochastic-gradient ascent step on the marginal likelihood.

    ``mask`` selects which entries are adapted; the others are returned unchanged.
    """
    grad = np.asarray(main_scores) - np.asarray(aux_scores)
    if mask is not None:
        grad = np.where(mask, grad, 0.0)
    return box.project(np.asarray(theta) + delta_u * grad), grad

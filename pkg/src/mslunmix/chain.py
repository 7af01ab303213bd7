"""Sweep orchestration: initialisation, burn-in adaptation, sample storage, checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import priors, sampler
from .core import HyperParams, Problem, SceneState, mix
from .likelihood import SuffStats, build_suff_stats, log_lik_field
from .sapg import N_FIXED, ThetaBox, auto_delta0, prior_scores, sapg_step_size, sapg_update_hyperparams

logger = logging.getLogger(__name__)

TRACE_KEYS = ("log_lik", "tv", "phi_l", "phi_n", "n_one", "hmc_accept", "x_accept", "theta")


@dataclass
class SamplerConfig:
    n_mc: int = 5000
    n_bi: int = 2000
    hmc_steps: int = 10
    hmc_step_size: float = 0.05
    hmc_target: float = 0.75
    hmc_adapt_rate: float = 0.5
    sapg_exponent: float = 0.8
    # per-parameter initial SAPG step (epsilon, beta_n, beta_l, beta_0, c);
    # None selects the 5% rule applied to the mean gradient of the probe sweeps
    sapg_delta0: Optional[tuple] = None
    sapg_probe: int = 20
    # freeze theta at the mean of the iterates from the second half of burn-in
    sapg_average: bool = True
    eps_max: float = 5.0
    beta_max: float = 1.0
    c_max: float = 50.0
    tv_enabled: bool = False
    adapt_theta: bool = True
    update_depth: bool = True
    thin: int = 1
    store_samples: bool = True
    seed: int = 0
    workers: int = 1
    checkpoint_every: int = 0
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        if not 0 < self.n_bi < self.n_mc:
            raise ValueError("need 0 < n_bi < n_mc")
        if self.hmc_step_size <= 0 or self.hmc_steps < 0 or self.thin < 1:
            raise ValueError("step size must be > 0, leapfrog steps >= 0, thin >= 1")
        if self.sapg_probe < 0:
            raise ValueError("sapg_probe must be >= 0")

    def box(self) -> ThetaBox:
        return ThetaBox(eps_max=self.eps_max, beta_max=self.beta_max, c_max=self.c_max)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SamplerConfig":
        data = json.loads(text)
        if data.get("sapg_delta0") is not None:
            data["sapg_delta0"] = tuple(data["sapg_delta0"])
        return cls(**data)


@dataclass
class ChainState:
    """Everything needed to continue a run bit-exactly."""

    sweep: int
    state: SceneState
    theta: np.ndarray
    log_step: np.ndarray  # (N,) HMC log step sizes
    aux: Optional[SceneState]  # prior-only companion chains (t, z, a, gamma used)
    delta0: Optional[np.ndarray]
    acc: dict  # running sums over post-burn-in sweeps
    samples: dict  # lists of stored arrays
    traces: dict  # lists of per-sweep scalars


@dataclass
class ChainOutput:
    samples: dict
    traces: dict
    theta_hat: np.ndarray
    hyper: HyperParams
    support_bins: np.ndarray
    n_post: int
    sum_a: np.ndarray
    count_z1: np.ndarray
    sum_x_z1: np.ndarray
    depth_hist: np.ndarray  # (n_row, n_col, T') sample counts
    depth_pmf_sum: np.ndarray  # (n_row, n_col, T') summed conditional pmfs
    hmc_log_step: np.ndarray
    config: SamplerConfig

    def arrays(self) -> dict:
        out = {f"sample_{k}": v for k, v in self.samples.items()}
        out.update({f"trace_{k}": v for k, v in self.traces.items()})
        out.update(
            theta_hat=self.theta_hat,
            sum_a=self.sum_a,
            count_z1=self.count_z1,
            sum_x_z1=self.sum_x_z1,
            depth_hist=self.depth_hist,
            depth_pmf_sum=self.depth_pmf_sum,
            hmc_log_step=self.hmc_log_step,
        )
        return out


def _nnls_poisson(y_tilde, g_tilde, m, n_iter=50, floor=1e-3):
    """Multiplicative KL updates for ``ytil ~ Poisson(gtil * M a)`` with ``M`` fixed."""
    a = np.ones(y_tilde.shape[:-1] + (m.shape[1],))
    denom = sampler.mix_transpose(g_tilde, m)
    for _ in range(n_iter):
        lam = mix(a, m) * g_tilde
        ratio = np.where(y_tilde > 0, y_tilde / np.maximum(lam, 1e-300), 0.0)
        a = a * sampler.mix_transpose(ratio * g_tilde, m) / denom
    return np.maximum(a, floor)


def initial_state(stats: SuffStats, m: np.ndarray, hyper: HyperParams) -> SceneState:
    """Deterministic start: pixel-wise ML depths, Poisson-NMF abundances, no anomalies."""
    from .estimators import ml_depth_baseline

    if np.any(stats.y_tilde > 0):
        t = ml_depth_baseline(stats, mode="joint")
    else:
        t = np.full(stats.shape, stats.support.t_min + stats.support.size // 2)
    a = _nnls_poisson(stats.y_tilde, stats.g_tilde_at(t), m)
    gamma = np.stack([priors.gmrf_beta_field(a[:, :, r]) for r in range(m.shape[1])])
    z = np.zeros(stats.y_tilde.shape, dtype=np.int8)
    x = np.full(stats.y_tilde.shape, hyper.alpha * hyper.nu)
    return SceneState(t=t.astype(np.int64), a=a, z=z, x=x, gamma=gamma)


def _new_chain(stats, m, hyper, config, init):
    state = (init or initial_state(stats, m, hyper)).copy()
    aux = state.copy() if config.adapt_theta else None
    n, mm, L = stats.y_tilde.shape
    R = m.shape[1]
    n_sup = stats.support.size
    acc = dict(
        n_post=0,
        sum_a=np.zeros((n, mm, R)),
        count_z1=np.zeros((n, mm, L), dtype=np.int64),
        sum_x_z1=np.zeros((n, mm, L)),
        depth_hist=np.zeros((n, mm, n_sup), dtype=np.int64),
        depth_pmf_sum=np.zeros((n, mm, n_sup)),
        sapg_grad_abs=np.zeros(N_FIXED + R),
        sapg_theta_sum=np.zeros(N_FIXED + R),
        sapg_theta_n=0,
    )
    return ChainState(
        sweep=0,
        state=state,
        theta=hyper.theta(),
        log_step=np.full(n * mm, np.log(config.hmc_step_size)),
        aux=aux,
        delta0=None if config.sapg_delta0 is None else _expand_delta0(config.sapg_delta0, R),
        acc=acc,
        samples={k: [] for k in ("t", "a", "z", "x")},
        traces={k: [] for k in TRACE_KEYS},
    )


def _expand_delta0(d, R):
    d = list(d)
    if len(d) == N_FIXED + 1:
        d = d[:N_FIXED] + [d[N_FIXED]] * R
    return np.asarray(d, dtype=float)


def _adapt_mask(config: SamplerConfig, R: int) -> np.ndarray:
    mask = np.ones(N_FIXED + R, dtype=bool)
    if not (config.tv_enabled and config.update_depth):
        mask[0] = False
    return mask


def _probe_length(config: SamplerConfig) -> int:
    return 0 if config.sapg_delta0 is not None else min(config.sapg_probe, config.n_bi // 2)


def _sapg_step(cs: ChainState, s_main, s_aux, mask, u: int, config: SamplerConfig) -> None:
    """One hyperparameter update, including the step-size probe and iterate averaging."""
    acc = cs.acc
    probe = _probe_length(config)
    if cs.delta0 is None:
        grad = np.where(mask, s_main - s_aux, 0.0)
        acc["sapg_grad_abs"] += np.abs(grad)
        if u < probe:
            return
        cs.delta0 = auto_delta0(cs.theta, acc["sapg_grad_abs"] / max(u, 1))
        if u == probe:
            return
    delta_u = sapg_step_size(cs.delta0, u - probe, config.sapg_exponent)
    cs.theta, _ = sapg_update_hyperparams(cs.theta, s_main, s_aux, delta_u, config.box(), mask)
    if config.sapg_average and 2 * u > config.n_bi:
        acc["sapg_theta_sum"] += cs.theta
        acc["sapg_theta_n"] += 1
        if u == config.n_bi:
            cs.theta = acc["sapg_theta_sum"] / acc["sapg_theta_n"]


def sweep(cs: ChainState, stats: SuffStats, m: np.ndarray, hyper: HyperParams, config: SamplerConfig):
    """Advance the chain by one sweep in the order A, Gamma, T, Z, X, theta."""
    u = cs.sweep + 1
    seed, workers = config.seed, config.workers
    st = cs.state
    theta = cs.theta
    eps, beta_n, beta_l, beta_0 = theta[:N_FIXED]
    c = theta[N_FIXED:]
    n, mm, L = stats.y_tilde.shape
    R = m.shape[1]
    burn_in = u <= config.n_bi

    # abundances
    gt = stats.g_tilde_at(st.t)
    target = sampler.AbundanceTarget(
        y_tilde=stats.y_tilde.reshape(-1, L),
        g_tilde=gt.reshape(-1, L),
        r=(st.z * st.x).reshape(-1, L),
        abar=sampler.abar_field(st.gamma).reshape(-1, R),
        c=c,
        m=m,
    )
    a_flat, hmc_acc = sampler.update_abundances(
        st.a.reshape(-1, R), target, cs.log_step, config.hmc_steps, seed, u, workers=workers
    )
    st.a = a_flat.reshape(n, mm, R)
    if burn_in:
        rate = config.hmc_adapt_rate * u ** -0.6
        cs.log_step = np.clip(cs.log_step + rate * (hmc_acc - config.hmc_target), -12.0, 2.0)

    # auxiliaries
    st.gamma = sampler.update_gamma_aux(st.a, c, seed, u)

    # depths
    base = mix(st.a, m)
    pmf = None
    if config.update_depth:
        lam = base + st.z * st.x
        table = sampler.depth_log_lik_table(stats, lam)
        st.t, pmf = sampler.update_depths(
            st.t, table, stats.support.bins, eps, config.tv_enabled, seed, u, workers=workers
        )
        gt = stats.g_tilde_at(st.t)

    # labels
    llr = sampler.label_log_lik_ratio(stats.y_tilde, base, st.x, gt)
    st.z = sampler.update_labels(st.z, llr, beta_n, beta_l, beta_0, seed, u)

    # anomaly values
    st.x, x_acc = sampler.update_anomaly_values(
        st.x, st.z, stats.y_tilde, base, gt, hyper.alpha, hyper.nu, seed, u
    )

    # hyperparameters
    if config.adapt_theta and burn_in:
        aux = cs.aux
        tv_on = config.tv_enabled and config.update_depth
        aux.z = sampler.update_labels(aux.z, None, beta_n, beta_l, beta_0, seed, u, stage="aux-label")
        if tv_on:
            aux.t, _ = sampler.update_depths(
                aux.t, None, stats.support.bins, eps, True, seed, u, stage="aux-depth", workers=workers
            )
        aux.a = sampler.update_abundances_prior(aux.gamma, c, seed, u)
        aux.gamma = sampler.update_gamma_aux(aux.a, c, seed, u, stage="aux-gamma")
        s_main = prior_scores(st.t if tv_on else None, st.z, st.a, st.gamma)
        s_aux = prior_scores(aux.t if tv_on else None, aux.z, aux.a, aux.gamma)
        mask = _adapt_mask(config, R)
        _sapg_step(cs, s_main, s_aux, mask, u, config)

    # bookkeeping
    lam = mix(st.a, m) + st.z * st.x
    tr = cs.traces
    tr["log_lik"].append(float(log_lik_field(stats, lam, st.t).sum()))
    tr["tv"].append(priors.tv_potential(st.t))
    phi_l, phi_n, _, n1 = priors.ising_suff_stats(st.z)
    tr["phi_l"].append(phi_l)
    tr["phi_n"].append(phi_n)
    tr["n_one"].append(n1)
    tr["hmc_accept"].append(float(hmc_acc.mean()))
    on = st.z == 1
    tr["x_accept"].append(float(x_acc[on].mean()) if on.any() else 1.0)
    tr["theta"].append(np.array(cs.theta))

    if not burn_in:
        acc = cs.acc
        acc["n_post"] += 1
        acc["sum_a"] += st.a
        acc["count_z1"] += on
        acc["sum_x_z1"] += np.where(on, st.x, 0.0)
        k = stats.index_of(st.t)
        np.put_along_axis(
            acc["depth_hist"], k[..., None], np.take_along_axis(acc["depth_hist"], k[..., None], 2) + 1, 2
        )
        if pmf is not None:
            acc["depth_pmf_sum"] += pmf
        else:
            np.put_along_axis(
                acc["depth_pmf_sum"],
                k[..., None],
                np.take_along_axis(acc["depth_pmf_sum"], k[..., None], 2) + 1.0,
                2,
            )
        if config.store_samples and (u - config.n_bi) % config.thin == 0:
            cs.samples["t"].append(st.t.copy())
            cs.samples["a"].append(st.a.copy())
            cs.samples["z"].append(st.z.copy())
            cs.samples["x"].append(st.x.copy())
    cs.sweep = u


def run_chain(
    problem: Problem | SuffStats,
    m: np.ndarray,
    hyper: HyperParams,
    config: SamplerConfig,
    init: Optional[SceneState] = None,
    progress: Optional[Callable[[int, float, np.ndarray], None]] = None,
    stop_after: Optional[int] = None,
    chain_state: Optional[ChainState] = None,
):
    """Run the sampler for ``config.n_mc`` sweeps and return a :class:`ChainOutput`.

    ``problem`` may be a validated :class:`Problem` or prebuilt statistics.
    ``stop_after`` ends the run early (after writing a checkpoint when one
    is configured) and returns the live :class:`ChainState` instead.
    """
    stats = problem if isinstance(problem, SuffStats) else build_suff_stats(
        problem.cube, problem.irf, problem.support
    )
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m) & (m >= 0)):
        raise ValueError("endmember matrix must be finite and nonnegative")
    if np.any(hyper.c <= 1):
        raise ValueError("gamma-MRF shapes must exceed 1")
    if hyper.c.size == 1 and m.shape[1] > 1:
        hyper = HyperParams(hyper.alpha, hyper.nu, hyper.epsilon, hyper.beta_n, hyper.beta_l, hyper.beta_0,
                            c=np.full(m.shape[1], hyper.c[0]))
    cs = chain_state or _new_chain(stats, m, hyper, config, init)
    while cs.sweep < config.n_mc:
        try:
            sweep(cs, stats, m, hyper, config)
        except Exception as exc:  # attach sweep context
            raise RuntimeError(f"sampler failed at sweep {cs.sweep + 1}: {exc}") from exc
        u = cs.sweep
        if progress is not None:
            progress(u, cs.traces["log_lik"][-1], cs.theta)
        if config.checkpoint_every and config.checkpoint_path and u % config.checkpoint_every == 0:
            save_checkpoint(config.checkpoint_path, cs, config, hyper)
        if stop_after is not None and u >= stop_after:
            return cs
    return finish(cs, stats, hyper, config)


def finish(cs: ChainState, stats: SuffStats, hyper: HyperParams, config: SamplerConfig) -> ChainOutput:
    samples = {k: np.array(v) for k, v in cs.samples.items()}
    traces = {k: np.array(v) for k, v in cs.traces.items()}
    acc = cs.acc
    return ChainOutput(
        samples=samples,
        traces=traces,
        theta_hat=np.array(cs.theta),
        hyper=hyper.with_theta(cs.theta),
        support_bins=stats.support.bins,
        n_post=acc["n_post"],
        sum_a=acc["sum_a"],
        count_z1=acc["count_z1"],
        sum_x_z1=acc["sum_x_z1"],
        depth_hist=acc["depth_hist"],
        depth_pmf_sum=acc["depth_pmf_sum"],
        hmc_log_step=cs.log_step,
        config=config,
    )


# ------------------------------------------------------------- checkpoints

_STATE_FIELDS = ("t", "a", "z", "x", "gamma")


def save_checkpoint(path, cs: ChainState, config: SamplerConfig, hyper: HyperParams) -> None:
    arrays = {f"state_{f}": getattr(cs.state, f) for f in _STATE_FIELDS}
    if cs.aux is not None:
        arrays.update({f"aux_{f}": getattr(cs.aux, f) for f in _STATE_FIELDS})
    arrays.update({f"acc_{k}": np.asarray(v) for k, v in cs.acc.items()})
    for k, v in cs.samples.items():
        arrays[f"samples_{k}"] = np.array(v)
    for k, v in cs.traces.items():
        arrays[f"traces_{k}"] = np.array(v)
    arrays["theta"] = cs.theta
    arrays["log_step"] = cs.log_step
    if cs.delta0 is not None:
        arrays["delta0"] = cs.delta0
    meta = dict(
        sweep=cs.sweep,
        config=json.loads(config.to_json()),
        hyper=dict(alpha=hyper.alpha, nu=hyper.nu, theta0=hyper.theta().tolist()),
    )
    arrays["meta"] = np.array(json.dumps(meta))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(ChainState, SamplerConfig, HyperParams)`` stored at ``path``."""
    with np.load(path, allow_pickle=False) as f:
        data = {k: f[k] for k in f.files}
    meta = json.loads(str(data["meta"]))
    config = SamplerConfig(**{**meta["config"], "sapg_delta0": meta["config"].get("sapg_delta0")})
    if config.sapg_delta0 is not None:
        config.sapg_delta0 = tuple(config.sapg_delta0)
    h = meta["hyper"]
    hyper = HyperParams(h["alpha"], h["nu"]).with_theta(h["theta0"])
    state = SceneState(*(data[f"state_{f}"] for f in _STATE_FIELDS))
    aux = None
    if "aux_t" in data:
        aux = SceneState(*(data[f"aux_{f}"] for f in _STATE_FIELDS))
    acc = {k[4:]: data[k] for k in data if k.startswith("acc_")}
    acc["n_post"] = int(acc["n_post"])
    acc["sapg_theta_n"] = int(acc["sapg_theta_n"])
    samples = {k: list(data[f"samples_{k}"]) for k in ("t", "a", "z", "x")}
    traces = {k: list(data[f"traces_{k}"]) for k in TRACE_KEYS}
    cs = ChainState(
        sweep=int(meta["sweep"]),
        state=state,
        theta=data["theta"],
        log_step=data["log_step"],
        aux=aux,
        delta0=data.get("delta0"),
        acc=acc,
        samples=samples,
        traces=traces,
    )
    return cs, config, hyper


def resume_chain(path, problem: Problem | SuffStats, m: np.ndarray, progress=None, **overrides):
    """Continue a checkpointed run to completion."""
    cs, config, hyper = load_checkpoint(path)
    for k, v in overrides.items():
        setattr(config, k, v)
    return run_chain(problem, m, hyper, config, progress=progress, chain_state=cs)

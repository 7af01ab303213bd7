"""Command-line entry point: ``mslunmix <subcommand> ...``.

Exit status is 0 on success, 2 when inputs fail validation and 3 when a
run fails. The worker count comes from ``--workers`` or, failing that, the
``MSLUNMIX_WORKERS`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .chain import SamplerConfig, load_checkpoint, run_chain
from .config import RunConfig
from .core import DepthSupport, HyperParams, Problem, ValidationError, validate_inputs
from .estimators import estimate_bundle, label_f1, ml_depth_baseline
from .likelihood import build_suff_stats
from .pfa import pfa_unmix
from .scene import default_irf, empty_fraction, make_endmember_library, make_scene, simulate_cube

logger = logging.getLogger("mslunmix")

WORKERS_ENV = "MSLUNMIX_WORKERS"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class InputError(Exception):
    """Wraps any failure while reading or validating inputs."""


def _workers(args) -> int:
    if getattr(args, "workers", None):
        return args.workers
    return int(os.environ.get(WORKERS_ENV, "1"))


def _config(args) -> RunConfig:
    overrides = {}
    mapping = {
        "cube": "cube", "endmembers": "endmembers", "irf": "irf", "out": "output_dir",
        "budget": "budget", "alpha": "alpha", "nu": "nu", "t_min": "t_min", "t_max": "t_max",
        "iters": "sampler.n_mc", "burnin": "sampler.n_bi", "seed": "sampler.seed",
        "checkpoint_every": "sampler.checkpoint_every", "thin": "sampler.thin",
        "rows": "scene.n_row", "cols": "scene.n_col", "bands": "scene.n_band", "bins": "scene.n_bin",
        "endmember_count": "scene.n_endmember", "scene_seed": "scene.seed",
    }
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "tv", None) is not None:
        overrides["sampler.tv_enabled"] = args.tv
    overrides["sampler.workers"] = _workers(args)
    return RunConfig.load(getattr(args, "config", None), overrides)


def _problem(cfg: RunConfig) -> Problem:
    run = cfg.run
    for name in ("cube", "endmembers", "irf"):
        if getattr(run, name) is None:
            raise ValidationError([f"missing input: --{name}"])
    cube = io.read_cube(run.cube)
    lib = io.read_endmembers(run.endmembers)
    irf = io.read_irf(run.irf, n_bin=cube.dims.n_bin)
    default = DepthSupport.default(cube.dims.n_bin, irf)
    sup = DepthSupport(run.t_min or default.t_min, run.t_max or default.t_max)
    return validate_inputs(cube, lib, irf, sup)


def _hyper(cfg: RunConfig, R: int) -> HyperParams:
    r = cfg.run
    return HyperParams(r.alpha, r.nu, r.epsilon, r.beta_n, r.beta_l, r.beta_0, c=np.full(R, r.c))


def _progress(every: int):
    def report(u, loglik, theta):
        if u % every == 0:
            logger.info("sweep %d  log-lik %.6g  theta %s", u, loglik, np.array2string(theta, precision=4))

    return report


def _emit(output, problem: Problem, cfg: RunConfig, out: Path) -> None:
    dims = problem.dims
    bundle = estimate_bundle(output, dims, cfg.run.depth_estimator)
    ref = cfg.run.ref_bin if cfg.run.ref_bin is not None else problem.support.t_min
    bundle.depth_mm = (bundle.depth_bins - ref) * dims.mm_per_bin
    lo = (problem.support.t_min - ref) * dims.mm_per_bin
    hi = (problem.support.t_max - ref) * dims.mm_per_bin
    io.write_maps(bundle, out, names=list(problem.library.names), depth_range_mm=(lo, hi))
    io.write_matrix(out / "depth_bins.csv", bundle.depth_bins)
    summary = dict(
        theta_hat=output.theta_hat.tolist(),
        n_post=output.n_post,
        hmc_accept=float(np.mean(output.traces["hmc_accept"][output.config.n_bi:])),
        final_log_lik=float(output.traces["log_lik"][-1]),
    )
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


# ------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    try:
        cfg = _config(args)
        spec = cfg.scene
        lib = make_endmember_library(spec.n_band, spec.n_endmember)
        irf = default_irf(spec)
        scene = make_scene(spec, irf)
    except (ValueError, ValidationError) as exc:
        raise InputError(exc) from exc
    sim = simulate_cube(scene, lib, irf, cfg.run.budget, seed=cfg.sampler.seed)
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_cube(out / "cube.mslcube", sim.cube)
    io.write_endmembers(out / "endmembers.csv", lib)
    io.write_irf(out / "irf.txt", sim.irf)
    truth = out / "truth"
    truth.mkdir(exist_ok=True)
    dims = scene.dims
    io.write_matrix(truth / "depth_bins.csv", scene.depth)
    io.write_matrix(truth / "depth_mm.csv", (scene.depth - scene.support.t_min) * dims.mm_per_bin)
    for r, name in enumerate(lib.names):
        io.write_matrix(truth / f"abundance_{name}.csv", scene.abundances[..., r])
    for b in range(dims.n_band):
        io.write_matrix(truth / f"labels_{b + 1}.csv", scene.labels[..., b])
    meta = dict(
        gain=sim.gain,
        budget=cfg.run.budget,
        realised_mean=float(sim.cube.y_tilde.mean()),
        empty_fraction=empty_fraction(sim.cube),
        t_min=scene.support.t_min,
        t_max=scene.support.t_max,
    )
    (out / "simulation.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote {out}: mean {meta['realised_mean']:.4f} photons/pixel/band, gain {sim.gain:.6g}")
    return EXIT_OK


def _prepare(args):
    try:
        cfg = _config(args)
        problem = _problem(cfg)
    except (OSError, ValueError, ValidationError) as exc:
        raise InputError(exc) from exc
    return cfg, problem


def cmd_unmix(args) -> int:
    cfg, problem = _prepare(args)
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = cfg.sampler
    if config.checkpoint_every and not config.checkpoint_path:
        config.checkpoint_path = str(out / "checkpoint.npz")
    (out / "run.cfg").write_text(cfg.dump())
    output = run_chain(problem, problem.library.m, _hyper(cfg, problem.library.n_endmember), config,
                       progress=_progress(max(1, config.n_mc // 20)))
    _emit(output, problem, cfg, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_resume(args) -> int:
    try:
        cs, config, hyper = load_checkpoint(args.checkpoint)
        run_file = Path(args.checkpoint).parent / "run.cfg"
        cfg = RunConfig.load(run_file if run_file.exists() else None)
        if args.out:
            cfg.run.output_dir = args.out
        problem = _problem(cfg)
    except (OSError, ValueError, ValidationError) as exc:
        raise InputError(exc) from exc
    config.workers = _workers(args)
    cfg.sampler = config
    output = run_chain(problem, problem.library.m, hyper, config, chain_state=cs,
                       progress=_progress(max(1, config.n_mc // 20)))
    out = Path(cfg.run.output_dir)
    _emit(output, problem, cfg, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ml_depth(args) -> int:
    cfg, problem = _prepare(args)
    stats = build_suff_stats(problem.cube, problem.irf, problem.support)
    mode = "joint" if args.band is None else args.band - 1
    try:
        t = ml_depth_baseline(stats, mode=mode)
    except ValueError as exc:
        raise InputError(exc) from exc
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ref = cfg.run.ref_bin if cfg.run.ref_bin is not None else problem.support.t_min
    io.write_matrix(out / "depth_bins.csv", t)
    io.write_matrix(out / "depth_mm.csv", (t - ref) * problem.dims.mm_per_bin)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_pfa(args) -> int:
    cfg, problem = _prepare(args)
    stats = build_suff_stats(problem.cube, problem.irf, problem.support)
    try:
        output = pfa_unmix(stats, problem.library.m, _hyper(cfg, problem.library.n_endmember),
                           cfg.sampler, force=args.force)
    except ValueError as exc:
        raise InputError(exc) from exc
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = estimate_bundle(output, problem.dims)
    for r, name in enumerate(problem.library.names):
        io.write_matrix(out / f"abundance_{name}.csv", bundle.abundances[..., r])
        io.write_pgm(out / f"abundance_{name}.pgm", bundle.abundances[..., r], *io.ABUNDANCE_SCALE)
    for b in range(problem.dims.n_band):
        io.write_matrix(out / f"labels_{b + 1}.csv", bundle.labels[..., b])
    io.write_matrix(out / "anomaly_log_intensity.csv", bundle.anomaly_log_intensity)
    print(f"wrote {out}")
    return EXIT_OK


def _depth_file(path: Path) -> Path:
    return path / "depth_mm.csv" if path.is_dir() else path


def cmd_eval(args) -> int:
    try:
        est, ref = Path(args.est), Path(args.ref)
        t_est = io.read_matrix(_depth_file(est))
        t_ref = io.read_matrix(_depth_file(ref))
        if t_est.shape != t_ref.shape:
            raise ValidationError([f"depth map shapes differ: {t_est.shape} vs {t_ref.shape}"])
        labels = None
        if est.is_dir() and ref.is_dir() and list(est.glob("labels_*.csv")) and list(ref.glob("labels_*.csv")):
            labels = io.read_label_maps(est), io.read_label_maps(ref)
    except (OSError, ValueError, ValidationError) as exc:
        raise InputError(exc) from exc
    err = float(np.sqrt(np.mean((t_est - t_ref) ** 2)))
    print(f"depth RMSE: {err:.3f} mm")
    if labels is not None:
        print(f"label F1: {label_f1(*labels):.3f}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _common(p: argparse.ArgumentParser, inputs: bool = True) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help=f"worker threads (default ${WORKERS_ENV} or 1)")
    if inputs:
        p.add_argument("--cube", help="MSLCUBE 1 photon cube")
        p.add_argument("--endmembers", help="endmember CSV")
        p.add_argument("--irf", help="IRF 1 or IRFGAUSS 1 impulse responses")
        p.add_argument("--t-min", dest="t_min", type=int, help="first supported depth bin")
        p.add_argument("--t-max", dest="t_max", type=int, help="last supported depth bin")


def _sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iters", type=int, help="total sweeps (default 5000)")
    p.add_argument("--burnin", type=int, help="burn-in sweeps (default 2000)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--alpha", type=float, help="anomaly prior shape (default 1)")
    p.add_argument("--nu", type=float, help="anomaly prior scale (default 0.05)")
    p.add_argument("--thin", type=int, help="store every k-th post-burn-in sample")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, help="checkpoint period in sweeps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mslunmix", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scene and photon cube")
    _common(p, inputs=False)
    p.add_argument("--budget", type=float, help="mean photons per pixel and band")
    p.add_argument("--seed", type=int, help="photon-noise seed")
    p.add_argument("--scene-seed", dest="scene_seed", type=int, help="scene layout seed")
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--bands", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--endmember-count", dest="endmember_count", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("unmix", help="run the sampler and write estimated maps")
    _common(p)
    _sampler_flags(p)
    p.add_argument("--tv", action="store_true", default=None, help="enable the TV depth prior")
    p.set_defaults(func=cmd_unmix)

    p = sub.add_parser("ml-depth", help="pixel-wise maximum-likelihood depth")
    _common(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--band", type=int, help="use a single band (1-based)")
    group.add_argument("--joint", action="store_true", help="use all bands")
    p.set_defaults(func=cmd_ml_depth)

    p = sub.add_parser("pfa", help="depth-free unmixing of integrated counts")
    _common(p)
    _sampler_flags(p)
    p.add_argument("--force", action="store_true", help="run even if the reduction is invalid")
    p.set_defaults(func=cmd_pfa)

    p = sub.add_parser("eval", help="compare estimated and reference maps")
    p.add_argument("--est", required=True, help="estimate directory or depth CSV")
    p.add_argument("--ref", required=True, help="reference directory or depth CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("resume", help="continue a checkpointed unmix run")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="output directory (default from the saved run)")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_resume)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

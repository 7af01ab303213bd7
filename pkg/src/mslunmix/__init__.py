"""Bayesian spectral unmixing and depth estimation for multispectral single-photon Lidar."""

from .chain import ChainOutput, SamplerConfig, resume_chain, run_chain
from .core import (
    DepthSupport,
    EndmemberLibrary,
    GaussianIrf,
    GridDims,
    HyperParams,
    ImpulseResponseSet,
    PhotonCube,
    Problem,
    SceneState,
    ValidationError,
    depth_bins_to_mm,
    validate_inputs,
)
from .estimators import EstimateBundle, estimate_bundle, ml_depth_baseline, rmse
from .likelihood import SuffStats, build_suff_stats
from .scene import SceneSpec, make_endmember_library, make_irf_set, make_scene, simulate_cube

__all__ = [
    "ChainOutput",
    "DepthSupport",
    "EndmemberLibrary",
    "EstimateBundle",
    "GaussianIrf",
    "GridDims",
    "HyperParams",
    "ImpulseResponseSet",
    "PhotonCube",
    "Problem",
    "SamplerConfig",
    "SceneSpec",
    "SceneState",
    "SuffStats",
    "ValidationError",
    "build_suff_stats",
    "depth_bins_to_mm",
    "estimate_bundle",
    "make_endmember_library",
    "make_irf_set",
    "make_scene",
    "ml_depth_baseline",
    "resume_chain",
    "rmse",
    "run_chain",
    "simulate_cube",
    "validate_inputs",
]

"""Desk-scale dense SLAM on synthetic scenes.

A recurrent pointmap predictor feeds a covisibility-driven frontend that
groups frames into submaps; each submap is fused by local alignment, submaps
are stitched by an SE(3) pose graph with loop closures, and results are
scored against ground truth (trajectory RMSE, map accuracy/completeness).
"""

from .evaluation import EvalConfig, EvalReport, ate_rmse, evaluate_run
from .frontend import Frontend, FrontendConfig, Submap, covisibility
from .geometry import Quaternion, SE3Pose, Sim3Transform, se3_exp, se3_log
from .local_align import (
    LocalAlignConfig,
    LocalSolution,
    build_connectivity_graph,
    optimize_submap,
    weighted_umeyama,
)
from .pipeline import RunConfig, RunResult, run_pipeline, write_run_artifacts
from .pointmaps import ConfidenceMap, PointMap
from .posegraph import (
    OptimizeConfig,
    PoseGraph,
    PoseGraphEdge,
    Prior,
    assemble_global_map,
    detect_loops,
    incremental_update,
    optimize,
    read_g2o,
    write_g2o,
)
from .predictor import GatedRecurrentPredictor, ModelConfig
from .synth import Box, NoiseSpec, OraclePredictor, SceneSpec, Waypoint, generate
from .trajectory import Trajectory, read_tum, write_tum

__version__ = "0.1.0"

__all__ = [
    "Box",
    "ConfidenceMap",
    "EvalConfig",
    "EvalReport",
    "Frontend",
    "FrontendConfig",
    "GatedRecurrentPredictor",
    "LocalAlignConfig",
    "LocalSolution",
    "ModelConfig",
    "NoiseSpec",
    "OptimizeConfig",
    "OraclePredictor",
    "PointMap",
    "PoseGraph",
    "PoseGraphEdge",
    "Prior",
    "Quaternion",
    "RunConfig",
    "RunResult",
    "SE3Pose",
    "SceneSpec",
    "Sim3Transform",
    "Submap",
    "Trajectory",
    "Waypoint",
    "ate_rmse",
    "assemble_global_map",
    "build_connectivity_graph",
    "covisibility",
    "detect_loops",
    "evaluate_run",
    "generate",
    "incremental_update",
    "optimize",
    "optimize_submap",
    "read_g2o",
    "read_tum",
    "run_pipeline",
    "se3_exp",
    "se3_log",
    "weighted_umeyama",
    "write_g2o",
    "write_run_artifacts",
    "write_tum",
]

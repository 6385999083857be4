"""Trajectory and reconstruction metrics: ATE-RMSE with optional similarity
alignment, cloud alignment (trajectory-matched Umeyama plus point-to-point
ICP), and accuracy/completeness statistics.

All computation is in meters; report serialization converts the cloud
metrics to centimeters, which is the unit convention of the result tables
this mirrors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import Sim3Transform
from .local_align import weighted_umeyama
from .neighbors import nn_query
from .trajectory import Trajectory


@dataclass(frozen=True)
class EvalConfig:
    align_trajectory: bool = True
    icp_max_iters: int = 50
    icp_rel_tol: float = 1e-6
    max_icp_points: int = 20000
    distance_cutoff: float = None  # optional outlier cutoff for acc/comp
    timestamp_tol: float = 0.02


@dataclass
class EvalReport:
    ate_rmse: float
    acc_mean: float
    acc_median: float
    comp_mean: float
    comp_median: float
    alignment: Sim3Transform
    frame_count: int

    def to_dict(self) -> dict:
        """JSON-friendly dict; cloud metrics in centimeters, labeled."""
        q = self.alignment.rotation
        return {
            "ate_rmse_m": self.ate_rmse,
            "acc_mean_cm": self.acc_mean * 100.0,
            "acc_median_cm": self.acc_median * 100.0,
            "comp_mean_cm": self.comp_mean * 100.0,
            "comp_median_cm": self.comp_median * 100.0,
            "alignment": {
                "scale": self.alignment.scale,
                "quat_wxyz": [q.w, q.x, q.y, q.z],
                "translation": self.alignment.translation.tolist(),
            },
            "frame_count": self.frame_count,
        }


def match_trajectories(est: Trajectory, gt: Trajectory, tol: float = 0.02):
    """Pair poses by nearest timestamp within tol; synthetic data matches
    exactly.  Returns (est_positions, gt_positions) arrays."""
    if len(est) < 2 or len(gt) < 2:
        raise ValueError("need at least 2 poses in each trajectory")
    gt_ts = gt.timestamps
    est_pos, gt_pos = [], []
    for ts, pose in zip(est.timestamps, est.poses):
        j = int(np.argmin(np.abs(gt_ts - ts)))
        if abs(gt_ts[j] - ts) <= tol:
            est_pos.append(pose.translation)
            gt_pos.append(gt.poses[j].translation)
    if len(est_pos) < 2:
        raise ValueError("no matching timestamps between trajectories")
    return np.array(est_pos), np.array(gt_pos)


def ate_rmse(est: Trajectory, gt: Trajectory, align: bool = True,
             tol: float = 0.02) -> float:
    """Root-mean-square translational error after optional Sim(3) alignment
    of estimated to ground-truth positions."""
    est_pos, gt_pos = match_trajectories(est, gt, tol)
    if align:
        sim = weighted_umeyama(est_pos, gt_pos, with_scale=True)
        est_pos = sim.apply(est_pos)
    return float(np.sqrt(np.mean(np.sum((est_pos - gt_pos) ** 2, axis=1))))


def _subsample(points: np.ndarray, limit: int) -> np.ndarray:
    if limit is None or len(points) <= limit:
        return points
    idx = np.linspace(0, len(points) - 1, limit).astype(int)
    return points[idx]


def icp_refine(src: np.ndarray, dst: np.ndarray, init: Sim3Transform,
               max_iters: int = 50, rel_tol: float = 1e-6,
               max_points: int = None):
    """Point-to-point ICP with fixed scale starting from init.

    Each iteration associates every (subsampled) source point with its
    nearest destination point and solves the rigid Umeyama update in closed
    form, which cannot increase the association RMSE.  Stops when the
    relative RMSE change drops below rel_tol.  Returns (refined transform,
    RMSE trace).
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    sub = _subsample(src, max_points)
    current = init
    trace = []
    prev = None
    for _ in range(max_iters):
        moved = current.apply(sub)
        dists, idx = nn_query(dst, moved)
        rmse = float(np.sqrt(np.mean(dists**2)))
        trace.append(rmse)
        if prev is not None and abs(prev - rmse) <= rel_tol * max(prev, 1e-300):
            break
        prev = rmse
        try:
            step = weighted_umeyama(moved, dst[idx], with_scale=False)
        except ValueError:
            break  # degenerate association; keep the current estimate
        current = step.compose(current)
    return current, trace


def align_clouds(pred_cloud: np.ndarray, gt_cloud: np.ndarray,
                 est_traj: Trajectory = None, gt_traj: Trajectory = None,
                 cfg: EvalConfig = EvalConfig()):
    """Similarity alignment of a predicted cloud to ground truth.

    The similarity stage uses matched trajectory positions when given (the
    clouds themselves have no correspondences); otherwise it starts from the
    identity.  Point-to-point ICP with the scale frozen then reduces the
    residual geometric error.  Returns (Sim3Transform, icp trace).
    """
    pred_cloud = np.asarray(pred_cloud, dtype=float).reshape(-1, 3)
    gt_cloud = np.asarray(gt_cloud, dtype=float).reshape(-1, 3)
    if len(pred_cloud) < 3 or len(gt_cloud) < 3:
        raise ValueError("clouds must have at least 3 points")
    if est_traj is not None and gt_traj is not None:
        est_pos, gt_pos = match_trajectories(est_traj, gt_traj, cfg.timestamp_tol)
        coarse = weighted_umeyama(est_pos, gt_pos, with_scale=True)
    else:
        coarse = Sim3Transform.identity()
    return icp_refine(pred_cloud, gt_cloud, coarse,
                      cfg.icp_max_iters, cfg.icp_rel_tol, cfg.max_icp_points)


def accuracy_completeness(pred_cloud: np.ndarray, gt_cloud: np.ndarray,
                          cutoff: float = None):
    """(acc_mean, acc_median, comp_mean, comp_median) in meters.

    Accuracy: predicted-to-nearest-ground-truth distances.  Completeness:
    ground-truth-to-nearest-predicted.  An optional cutoff drops distances
    above it (outlier rejection); default keeps everything.
    """
    pred_cloud = np.asarray(pred_cloud, dtype=float).reshape(-1, 3)
    gt_cloud = np.asarray(gt_cloud, dtype=float).reshape(-1, 3)
    if len(pred_cloud) == 0 or len(gt_cloud) == 0:
        raise ValueError("clouds must be non-empty")
    acc, _ = nn_query(gt_cloud, pred_cloud)
    comp, _ = nn_query(pred_cloud, gt_cloud)
    if cutoff is not None:
        acc = acc[acc <= cutoff]
        comp = comp[comp <= cutoff]
        if len(acc) == 0 or len(comp) == 0:
            raise ValueError("cutoff removed all points")
    return (float(acc.mean()), float(np.median(acc)),
            float(comp.mean()), float(np.median(comp)))


def evaluate_run(est_traj: Trajectory, gt_traj: Trajectory,
                 pred_cloud: np.ndarray, gt_cloud: np.ndarray,
                 cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Full protocol: ATE on trajectories, similarity+ICP cloud alignment,
    accuracy/completeness on the aligned cloud."""
    ate = ate_rmse(est_traj, gt_traj, cfg.align_trajectory, cfg.timestamp_tol)
    sim, _ = align_clouds(pred_cloud, gt_cloud, est_traj, gt_traj, cfg)
    aligned = sim.apply(np.asarray(pred_cloud, dtype=float).reshape(-1, 3))
    acc_mean, acc_med, comp_mean, comp_med = accuracy_completeness(
        aligned, gt_cloud, cfg.distance_cutoff)
    return EvalReport(ate, acc_mean, acc_med, comp_mean, comp_med, sim, len(est_traj))


def write_report(path, report: EvalReport) -> None:
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, sort_keys=True, indent=1)
        f.write("\n")

"""Confidence-weighted pointmap regression and pose losses with analytic
gradients, plus a finite-difference oracle for checking them.

The regression loss sums, over pixels the ground truth marks valid,

    c_i * || xhat_i / shat - x_i / s ||_2  -  beta * log c_i

where s and shat are the mean Euclidean norms of the valid ground-truth and
predicted points.  With metric_scale the predicted normalizer is tied to the
ground-truth one (shat := s), which removes the scale ambiguity.

The pose loss sums quaternion L2 differences (after hemisphere alignment)
plus scale-normalized translation L2 differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import SE3Pose
from .pointmaps import ConfidenceMap, PointMap


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.2
    metric_scale: bool = True

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")


def _masked_terms(pred: PointMap, conf: ConfidenceMap, gt: PointMap, cfg: LossConfig):
    if pred.points.shape != gt.points.shape:
        raise ValueError("pred/gt shape mismatch")
    if conf.values.shape != gt.points.shape[:2]:
        raise ValueError("confidence shape mismatch")
    mask = gt.valid & pred.valid
    if not mask.any():
        raise ValueError("no valid pixels in common")
    x_hat = pred.points[mask]
    x = gt.points[mask]
    c = conf.values[mask]
    s = float(np.linalg.norm(x, axis=1).mean())
    if not s > 0:
        raise ValueError("ground-truth normalizer is zero")
    if cfg.metric_scale:
        s_hat = s
    else:
        s_hat = float(np.linalg.norm(x_hat, axis=1).mean())
        if not s_hat > 0:
            raise ValueError("prediction normalizer is zero")
    return mask, x_hat, x, c, s, s_hat


def regression_loss(pred: PointMap, conf: ConfidenceMap, gt: PointMap,
                    cfg: LossConfig = LossConfig()) -> float:
    _, x_hat, x, c, s, s_hat = _masked_terms(pred, conf, gt, cfg)
    resid = np.linalg.norm(x_hat / s_hat - x / s, axis=1)
    return float(np.sum(c * resid - cfg.beta * np.log(c)))


def regression_loss_grad(pred: PointMap, conf: ConfidenceMap, gt: PointMap,
                         cfg: LossConfig = LossConfig()):
    """Loss plus analytic gradients w.r.t. predicted points and confidences.

    Gradients are zero at invalid pixels.  At pixels with exactly zero
    residual the distance term is not differentiable; those entries are
    returned as zero (a valid subgradient).
    """
    mask, x_hat, x, c, s, s_hat = _masked_terms(pred, conf, gt, cfg)
    u = x_hat / s_hat - x / s
    n = np.linalg.norm(u, axis=1)
    loss = float(np.sum(c * n - cfg.beta * np.log(c)))

    safe_n = np.where(n > 0, n, 1.0)
    unit = np.where(n[:, None] > 0, u / safe_n[:, None], 0.0)
    g = c[:, None] * unit / s_hat
    if not cfg.metric_scale:
        # shat is the mean norm of the predictions, so every residual also
        # moves when one prediction moves: dL/dshat * dshat/dx_hat_k.
        m = len(x_hat)
        dl_ds = -np.sum(c * np.einsum("ij,ij->i", np.where(n[:, None] > 0, u, 0.0), x_hat)
                        / safe_n) / s_hat**2
        norms_hat = np.linalg.norm(x_hat, axis=1)
        safe_nh = np.where(norms_hat > 0, norms_hat, 1.0)
        g = g + dl_ds * np.where(norms_hat[:, None] > 0, x_hat / safe_nh[:, None], 0.0) / m

    grad_points = np.zeros_like(pred.points)
    grad_points[mask] = g
    grad_conf = np.zeros_like(conf.values)
    grad_conf[mask] = n - cfg.beta / c
    return loss, grad_points, grad_conf


def _aligned_quat_arrays(pred: list[SE3Pose], gt: list[SE3Pose]):
    qp = np.array([[p.rotation.w, p.rotation.x, p.rotation.y, p.rotation.z] for p in pred])
    qg = np.array([[p.rotation.w, p.rotation.x, p.rotation.y, p.rotation.z] for p in gt])
    # Double cover: flip predictions into the ground-truth hemisphere.
    sign = np.where(np.sum(qp * qg, axis=1) < 0, -1.0, 1.0)
    return qp * sign[:, None], qg


def pose_loss(pred: list[SE3Pose], gt: list[SE3Pose], cfg: LossConfig = LossConfig(),
              pred_scale: float = 1.0, gt_scale: float = 1.0) -> float:
    """Sum of per-frame quaternion and normalized-translation L2 errors.

    The normalizers are sequence-global and supplied by the caller (default
    1, i.e. metric); with cfg.metric_scale the prediction normalizer is tied
    to the ground-truth one.
    """
    if len(pred) != len(gt):
        raise ValueError("pose list length mismatch")
    if len(pred) == 0:
        raise ValueError("empty pose lists")
    if cfg.metric_scale:
        pred_scale = gt_scale
    qp, qg = _aligned_quat_arrays(pred, gt)
    tp = np.array([p.translation for p in pred]) / pred_scale
    tg = np.array([p.translation for p in gt]) / gt_scale
    return float(np.sum(np.linalg.norm(qp - qg, axis=1) + np.linalg.norm(tp - tg, axis=1)))


def pose_loss_translation_grad(pred: list[SE3Pose], gt: list[SE3Pose],
                               cfg: LossConfig = LossConfig(),
                               pred_scale: float = 1.0, gt_scale: float = 1.0):
    """Loss plus the analytic gradient w.r.t. each predicted translation."""
    loss = pose_loss(pred, gt, cfg, pred_scale, gt_scale)
    if cfg.metric_scale:
        pred_scale = gt_scale
    tp = np.array([p.translation for p in pred]) / pred_scale
    tg = np.array([p.translation for p in gt]) / gt_scale
    v = tp - tg
    n = np.linalg.norm(v, axis=1)
    safe = np.where(n > 0, n, 1.0)
    grad = np.where(n[:, None] > 0, v / safe[:, None], 0.0) / pred_scale
    return loss, grad


def numerical_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float).reshape(-1)
    g = np.zeros_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2.0 * eps)
    return g

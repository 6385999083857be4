"""Synthetic desk-scale worlds and a scripted oracle predictor.

Scenes are unions of axis-aligned boxes (rooms) seen from the inside.  A
pinhole camera (60 degree horizontal FOV) ray-casts against the union's
boundary: per pixel, the slab intervals of all boxes along the ray are merged
and the ray stops where the connected free-space interval containing the
origin ends.  Ground-truth clouds come from uniform grid sampling of the box
faces, dropping samples that fall inside another box.

The oracle predictor implements the same step interface as the learned toy
model but returns ground-truth geometry corrupted per a NoiseSpec: per-pixel
Gaussian noise, pixel dropout, per-step compounding drift on the estimated
pose (and therefore on the world-frame points), and confidences that decay
with the injected noise magnitude.  All randomness is keyed by
(seed, stream, frame index), so outputs do not depend on call order or on
where submap resets happen.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .geometry import Quaternion, SE3Pose
from .pointmaps import (
    ConfidenceMap,
    PointMap,
    read_ply_pointmap,
    write_ply_pointmap,
)
from .predictor import FramePrediction
from .trajectory import Trajectory, read_tum, write_tum

_FOV_DEG = 60.0
_NOISE_STREAM = 7
_DROPOUT_STREAM = 11


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by min/max corners, meters."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValueError(f"degenerate box {lo} {hi}")

    def contains(self, p: np.ndarray, margin: float = 0.0) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        lo = np.array(self.lo) + margin
        hi = np.array(self.hi) - margin
        return ((p >= lo) & (p <= hi)).all(axis=-1)

    def surface_distance(self, p: np.ndarray) -> np.ndarray:
        """Unsigned distance to the box surface (0 on a face)."""
        p = np.asarray(p, dtype=float)
        lo, hi = np.array(self.lo), np.array(self.hi)
        d_out = np.maximum(lo - p, p - hi)
        outside = np.linalg.norm(np.maximum(d_out, 0.0), axis=-1)
        inside = -np.minimum(d_out.max(axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Waypoint:
    position: tuple
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "yaw", float(self.yaw))


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    boxes: tuple = (Box((0.0, 0.0, 0.0), (4.0, 3.0, 2.5)),)
    density: float = 200.0
    waypoints: tuple = (Waypoint((1.0, 1.5, 1.2), 0.0), Waypoint((2.5, 1.5, 1.2), 0.0))
    frames_per_segment: int = 20
    frame_rate: float = 1.0
    height: int = 32
    width: int = 32

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "waypoints", tuple(self.waypoints))
        if not self.boxes:
            raise ValueError("at least one box required")
        if len(self.waypoints) < 1:
            raise ValueError("at least one waypoint required")
        if self.density <= 0 or self.frame_rate <= 0:
            raise ValueError("density and frame_rate must be positive")
        if self.frames_per_segment < 1:
            raise ValueError("frames_per_segment must be >= 1")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "boxes": [[list(b.lo), list(b.hi)] for b in self.boxes],
            "density": self.density,
            "waypoints": [[list(w.position), w.yaw] for w in self.waypoints],
            "frames_per_segment": self.frames_per_segment,
            "frame_rate": self.frame_rate,
            "height": self.height,
            "width": self.width,
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        kw = {k: d[k] for k in ("seed", "density", "frames_per_segment",
                                "frame_rate", "height", "width") if k in d}
        if "boxes" in d:
            kw["boxes"] = tuple(Box(tuple(lo), tuple(hi)) for lo, hi in d["boxes"])
        if "waypoints" in d:
            kw["waypoints"] = tuple(Waypoint(tuple(p), yaw)
                                    for p, yaw in d["waypoints"])
        return SceneSpec(**kw)


@dataclass(frozen=True)
class NoiseSpec:
    sigma_p: float = 0.0
    drift_rot: float = 0.0
    drift_trans: float = 0.0
    conf_coupling: float = 25.0
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.sigma_p, self.drift_rot, self.drift_trans, self.conf_coupling) < 0:
            raise ValueError("noise parameters must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class SequenceFrame:
    index: int
    timestamp: float
    pose: SE3Pose  # camera-to-world
    points_cam: PointMap
    depth: np.ndarray


@dataclass
class SyntheticSequence:
    spec: SceneSpec
    frames: list
    trajectory: Trajectory
    gt_cloud: np.ndarray


def yaw_pose(position, yaw: float) -> SE3Pose:
    """Camera-to-world pose: x right, y down, z forward; z-up world, yaw only."""
    c, s = math.cos(yaw), math.sin(yaw)
    r = np.array([
        [s, 0.0, c],
        [-c, 0.0, s],
        [0.0, -1.0, 0.0],
    ])
    return SE3Pose(Quaternion.from_matrix(r), np.asarray(position, dtype=float))


def pixel_rays(height: int, width: int) -> np.ndarray:
    """Camera-frame ray directions with unit forward (z) component."""
    fx = (width / 2.0) / math.tan(math.radians(_FOV_DEG) / 2.0)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    u = np.arange(width)
    v = np.arange(height)
    xs = (u[None, :] - cx) / fx
    ys = (v[:, None] - cy) / fx
    d = np.empty((height, width, 3))
    d[..., 0] = xs
    d[..., 1] = ys
    d[..., 2] = 1.0
    return d


def _slab_interval(origin, dirs, box: Box):
    """Per-ray (enter, exit) parameters; enter > exit marks a miss."""
    lo = np.array(box.lo)
    hi = np.array(box.hi)
    enter = np.full(dirs.shape[:-1], -np.inf)
    exit_ = np.full(dirs.shape[:-1], np.inf)
    for k in range(3):
        d = dirs[..., k]
        o = origin[k]
        with np.errstate(divide="ignore"):
            t0 = (lo[k] - o) / d
            t1 = (hi[k] - o) / d
        near, far = np.minimum(t0, t1), np.maximum(t0, t1)
        parallel = np.abs(d) < 1e-15
        inside_slab = (o >= lo[k]) & (o <= hi[k])
        near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), far)
        enter = np.maximum(enter, near)
        exit_ = np.minimum(exit_, far)
    return enter, exit_


def cast_rays(origin, dirs, boxes) -> np.ndarray:
    """Parameter t where each ray leaves the union of boxes (0 if outside)."""
    intervals = [_slab_interval(origin, dirs, b) for b in boxes]
    t_end = np.zeros(dirs.shape[:-1])
    hit = np.zeros(dirs.shape[:-1], dtype=bool)
    for enter, exit_ in intervals:
        inside = (enter <= 1e-9) & (exit_ > 0)
        t_end = np.where(inside, np.maximum(t_end, exit_), t_end)
        hit |= inside
    for _ in range(len(boxes) - 1):
        for enter, exit_ in intervals:
            extend = hit & (enter <= t_end + 1e-9) & (exit_ > t_end)
            t_end = np.where(extend, exit_, t_end)
    return np.where(hit, t_end, 0.0)


def render_view(pose: SE3Pose, boxes, height: int, width: int):
    """Ray-cast one pinhole view; returns (points_cam PointMap, depth array)."""
    dirs_cam = pixel_rays(height, width)
    dirs_world = dirs_cam @ pose.rotation.to_matrix().T
    depth = cast_rays(pose.translation, dirs_world, boxes)
    valid = depth > 0
    pts = dirs_cam * depth[..., None]
    return PointMap(pts, valid), depth


def sample_surfaces(boxes, density: float) -> np.ndarray:
    """Grid-sample every box face at spacing 1/sqrt(density); drop samples
    strictly inside another box (they are not on the union boundary)."""
    h = 1.0 / math.sqrt(density)
    clouds = []
    for bi, box in enumerate(boxes):
        lo, hi = np.array(box.lo), np.array(box.hi)
        for axis in range(3):
            u_axis, v_axis = [a for a in range(3) if a != axis]
            nu = max(1, int(round((hi[u_axis] - lo[u_axis]) / h)))
            nv = max(1, int(round((hi[v_axis] - lo[v_axis]) / h)))
            us = lo[u_axis] + (np.arange(nu) + 0.5) * (hi[u_axis] - lo[u_axis]) / nu
            vs = lo[v_axis] + (np.arange(nv) + 0.5) * (hi[v_axis] - lo[v_axis]) / nv
            uu, vv = np.meshgrid(us, vs, indexing="ij")
            for side in (lo[axis], hi[axis]):
                pts = np.empty((nu * nv, 3))
                pts[:, axis] = side
                pts[:, u_axis] = uu.ravel()
                pts[:, v_axis] = vv.ravel()
                keep = np.ones(len(pts), dtype=bool)
                for bj, other in enumerate(boxes):
                    if bj != bi:
                        keep &= ~other.contains(pts, margin=1e-9)
                clouds.append(pts[keep])
    return np.vstack(clouds)


def script_trajectory(spec: SceneSpec):
    """Interpolate waypoint positions/yaws; constant rates per segment."""
    if len(spec.waypoints) == 1:
        w = spec.waypoints[0]
        return [np.array(w.position)], [w.yaw]
    positions, yaws = [], []
    for a, b in zip(spec.waypoints[:-1], spec.waypoints[1:]):
        n = spec.frames_per_segment
        for i in range(n):
            f = i / n
            positions.append((1 - f) * np.array(a.position) + f * np.array(b.position))
            yaws.append((1 - f) * a.yaw + f * b.yaw)
    last = spec.waypoints[-1]
    positions.append(np.array(last.position))
    yaws.append(last.yaw)
    return positions, yaws


def generate(spec: SceneSpec) -> SyntheticSequence:
    positions, yaws = script_trajectory(spec)
    for i, p in enumerate(positions):
        if not any(b.contains(p, margin=1e-6) for b in spec.boxes):
            raise ValueError(f"trajectory exits free space at frame {i}: {p}")
    frames = []
    traj = Trajectory()
    for i, (p, yaw) in enumerate(zip(positions, yaws)):
        pose = yaw_pose(p, yaw)
        pts, depth = render_view(pose, spec.boxes, spec.height, spec.width)
        ts = i / spec.frame_rate
        frames.append(SequenceFrame(i, ts, pose, pts, depth))
        traj.append(ts, pose)
    cloud = sample_surfaces(spec.boxes, spec.density)
    return SyntheticSequence(spec, frames, traj, cloud)


def synthetic_image(points_cam: PointMap, scale: float = 5.0) -> np.ndarray:
    """Deterministic [0,1] texture for the toy predictor (it never sees
    real photometry): squashed camera-frame coordinates, 0 where invalid."""
    img = (np.tanh(points_cam.points / scale) + 1.0) / 2.0
    return np.where(points_cam.valid[..., None], img, 0.0)


# ------------------------------------------------------------------- oracle


@dataclass
class OracleState:
    steps: int = 0
    drift: SE3Pose = field(default_factory=SE3Pose.identity)
    anchor_inverse: SE3Pose = None


class OraclePredictor:
    """Drop-in predictor producing noisy ground truth for a fixed sequence.

    World-frame outputs are expressed relative to the anchor (the first frame
    seen after a state reset), matching how the recurrent model's submap
    coordinates work.  Drift compounds per step and resets with the state.
    """

    def __init__(self, sequence: SyntheticSequence, noise: NoiseSpec = NoiseSpec(),
                 seed: int = 0):
        self.sequence = sequence
        self.noise = noise
        self.seed = seed
        step = SE3Pose(Quaternion.from_rotvec([0.0, 0.0, noise.drift_rot]),
                       np.array([noise.drift_trans, 0.0, 0.0]))
        self._drift_step = step

    def initial_state(self) -> OracleState:
        return OracleState()

    def step(self, state: OracleState, frame_index: int):
        if not 0 <= frame_index < len(self.sequence.frames):
            raise IndexError(f"frame index {frame_index} out of range")
        frame = self.sequence.frames[frame_index]
        noise = self.noise
        h, w = frame.points_cam.points.shape[:2]

        if state.anchor_inverse is None:
            anchor_inverse = frame.pose.inverse()
            drift = SE3Pose.identity()
        else:
            anchor_inverse = state.anchor_inverse
            drift = self._drift_step.compose(state.drift)

        rng = np.random.default_rng([self.seed, _NOISE_STREAM, frame_index])
        eps = rng.normal(0.0, noise.sigma_p, (h, w, 3)) if noise.sigma_p > 0 \
            else np.zeros((h, w, 3))
        pts_self = frame.points_cam.points + eps
        valid = frame.points_cam.valid.copy()
        if noise.dropout > 0:
            drop_rng = np.random.default_rng([self.seed, _DROPOUT_STREAM, frame_index])
            valid &= drop_rng.random((h, w)) >= noise.dropout

        conf = 1.0 + np.exp(-noise.conf_coupling * np.linalg.norm(eps, axis=2))
        rel = anchor_inverse.compose(frame.pose)
        est_pose = drift.compose(rel)
        self_map = PointMap(pts_self, valid)
        world_map = PointMap(est_pose.apply(pts_self), valid.copy())
        pred = FramePrediction(self_map, ConfidenceMap(conf),
                               world_map, ConfidenceMap(conf.copy()), est_pose)
        return OracleState(state.steps + 1, drift, anchor_inverse), pred


# -------------------------------------------------------------- persistence


def save_sequence(dirpath, seq: SyntheticSequence) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    (d / "scene.json").write_text(json.dumps(seq.spec.to_dict(), sort_keys=True, indent=1))
    write_tum(d / "gt_traj.tum", seq.trajectory)
    for f in seq.frames:
        conf = ConfidenceMap(np.ones(f.points_cam.points.shape[:2]))
        write_ply_pointmap(d / f"frame_{f.index:05d}.ply", f.points_cam, conf)


def load_sequence(dirpath) -> SyntheticSequence:
    d = Path(dirpath)
    spec = SceneSpec.from_dict(json.loads((d / "scene.json").read_text()))
    traj = read_tum(d / "gt_traj.tum")
    frames = []
    for i, (ts, pose) in enumerate(zip(traj.timestamps, traj.poses)):
        pm, _ = read_ply_pointmap(d / f"frame_{i:05d}.ply")
        depth = pm.points[..., 2].copy()
        frames.append(SequenceFrame(i, float(ts), pose, pm, depth))
    cloud = sample_surfaces(spec.boxes, spec.density)
    return SyntheticSequence(spec, frames, traj, cloud)

"""Per-frame policy: covisibility scoring, keyframe promotion, and submap
boundary detection with latent-state resets.

Covisibility between two frames is the overlap of their world-frame
pointmaps: the fraction of (stride-subsampled) valid points of one frame
whose nearest neighbor in the other frame's full valid point set lies within
a radius.  The default score is the min over both directions, which makes it
symmetric.  Two thresholds drive the policy, anchor first: falling below
tau_anchor against the submap anchor starts a new submap (resetting the
predictor state); otherwise falling below tau_kf against the last keyframe
promotes the frame to a keyframe.

Before the reset, the boundary frame is run once through the old state so
its pose exists in both submap frames; the pose-graph layer turns that
shared observation into the sequential inter-submap constraint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import SE3Pose
from .neighbors import fraction_within
from .predictor import FramePrediction


DECISION_ORDINARY = "ordinary"
DECISION_KEYFRAME = "new_keyframe"
DECISION_SUBMAP = "new_submap"


@dataclass(frozen=True)
class FrontendConfig:
    tau_kf: float = 0.7
    tau_anchor: float = 0.3
    tau_loop: float = 0.5
    radius: float = 0.05
    stride: int = 4

    def __post_init__(self):
        if not (0.0 < self.tau_anchor <= self.tau_kf < 1.0):
            raise ValueError("need 0 < tau_anchor <= tau_kf < 1")
        if not 0.0 < self.tau_loop < 1.0:
            raise ValueError("tau_loop must be in (0,1)")
        if self.radius <= 0 or self.stride < 1:
            raise ValueError("radius must be positive, stride >= 1")


@dataclass
class Frame:
    id: int
    timestamp: float
    prediction: FramePrediction
    is_keyframe: bool = False


@dataclass
class Submap:
    id: int
    anchor_id: int
    pose: SE3Pose = field(default_factory=SE3Pose.identity)  # world-from-submap
    keyframe_ids: list = field(default_factory=list)
    frame_ids: list = field(default_factory=list)
    frames: dict = field(default_factory=dict)
    finalized: bool = False

    def add(self, frame: Frame) -> None:
        if self.frame_ids and frame.id <= self.frame_ids[-1]:
            raise ValueError("frame ids must be strictly increasing")
        self.frame_ids.append(frame.id)
        self.frames[frame.id] = frame
        if frame.is_keyframe:
            self.keyframe_ids.append(frame.id)

    @property
    def anchor(self) -> Frame:
        return self.frames[self.anchor_id]

    @property
    def last_keyframe(self) -> Frame:
        return self.frames[self.keyframe_ids[-1]]


@dataclass
class BoundaryObservation:
    """The same frame observed in two consecutive submap frames."""

    old_submap: int
    new_submap: int
    frame_id: int
    pose_in_old: SE3Pose
    pose_in_new: SE3Pose


def _subsampled_world(pred: FramePrediction, stride: int) -> np.ndarray:
    pts = pred.points_world.points[::stride, ::stride]
    mask = pred.points_world.valid[::stride, ::stride]
    return pts[mask]


def covisibility_directional(a: FramePrediction, b: FramePrediction,
                             cfg: FrontendConfig = FrontendConfig()) -> float:
    """Fraction of a's subsampled valid world points with a neighbor in b's
    full valid world point set within cfg.radius."""
    sample = _subsampled_world(a, cfg.stride)
    ref = b.points_world.valid_points()
    if len(sample) == 0 or len(ref) == 0:
        raise ValueError("frame has no valid world points")
    return fraction_within(ref, sample, cfg.radius)


def covisibility(a: FramePrediction, b: FramePrediction,
                 cfg: FrontendConfig = FrontendConfig()) -> float:
    """Symmetric covisibility: min of the two directional scores."""
    return min(covisibility_directional(a, b, cfg),
               covisibility_directional(b, a, cfg))


class Frontend:
    """Sequential frame policy driving a predictor adapter.

    The adapter must provide initial_state() and step(state, frame) ->
    (state, FramePrediction); both the toy network and the synthetic oracle
    satisfy it (see pipeline module).
    """

    def __init__(self, adapter, cfg: FrontendConfig = FrontendConfig()):
        self.adapter = adapter
        self.cfg = cfg
        self.state = adapter.initial_state()
        self.submaps: list[Submap] = []
        self.boundaries: list[BoundaryObservation] = []
        self.log: list[dict] = []
        self.reset_count = 0

    @property
    def current(self) -> Submap:
        return self.submaps[-1]

    def _start_submap(self, frame: Frame) -> None:
        sid = len(self.submaps)
        pose = SE3Pose.identity()
        if self.submaps:
            prev = self.submaps[-1]
            prev.finalized = True
            boundary = self.boundaries[-1]
            delta = boundary.pose_in_old.compose(boundary.pose_in_new.inverse())
            pose = prev.pose.compose(delta)
        sub = Submap(id=sid, anchor_id=frame.id, pose=pose)
        frame.is_keyframe = True
        sub.add(frame)
        self.submaps.append(sub)

    def process_frame(self, seq_frame) -> str:
        """Run one frame through the predictor and the gating policy."""
        self.state, pred = self.adapter.step(self.state, seq_frame)
        fid, ts = seq_frame.index, seq_frame.timestamp

        if not self.submaps:
            frame = Frame(fid, ts, pred, is_keyframe=True)
            self._start_submap(frame)
            self._log(fid, DECISION_SUBMAP, None, None)
            return DECISION_SUBMAP

        sub = self.current
        cov_anchor = covisibility(pred, sub.anchor.prediction, self.cfg)
        cov_kf = covisibility(pred, sub.last_keyframe.prediction, self.cfg)

        if cov_anchor < self.cfg.tau_anchor:
            # Boundary: the prediction above is the frame's pose in the old
            # submap; rerun it on a fresh state to anchor the new submap.
            self.state = self.adapter.initial_state()
            self.reset_count += 1
            self.state, fresh = self.adapter.step(self.state, seq_frame)
            self.boundaries.append(BoundaryObservation(
                old_submap=sub.id, new_submap=sub.id + 1, frame_id=fid,
                pose_in_old=pred.pose, pose_in_new=fresh.pose))
            frame = Frame(fid, ts, fresh, is_keyframe=True)
            self._start_submap(frame)
            decision = DECISION_SUBMAP
        elif cov_kf < self.cfg.tau_kf:
            frame = Frame(fid, ts, pred, is_keyframe=True)
            sub.add(frame)
            decision = DECISION_KEYFRAME
        else:
            sub.add(Frame(fid, ts, pred))
            decision = DECISION_ORDINARY
        self._log(fid, decision, cov_kf, cov_anchor)
        return decision

    def _log(self, fid: int, decision: str, cov_kf, cov_anchor) -> None:
        self.log.append({"frame": fid, "decision": decision,
                         "cov_kf": cov_kf, "cov_anchor": cov_anchor})

    def finalize(self) -> None:
        if self.submaps:
            self.submaps[-1].finalized = True


def write_decision_log(path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_decision_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]

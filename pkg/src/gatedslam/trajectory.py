"""Timestamped pose sequences and TUM-format serialization.

One line per pose: `timestamp tx ty tz qx qy qz qw`, space separated,
9 significant digits.  Values already printed at 9 digits survive a
write -> read -> write cycle byte-identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Quaternion, SE3Pose


class TrajectoryParseError(ValueError):
    """Malformed TUM content; carries the 1-based offending line number."""

    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass
class Trajectory:
    """Ordered (timestamp, pose) pairs with strictly increasing timestamps."""

    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    poses: list = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamp/pose count mismatch")
        if len(self.timestamps) > 1 and not (np.diff(self.timestamps) > 0).all():
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def append(self, timestamp: float, pose: SE3Pose) -> None:
        if len(self.timestamps) and timestamp <= self.timestamps[-1]:
            raise ValueError(f"timestamp {timestamp} not increasing")
        self.timestamps = np.append(self.timestamps, timestamp)
        self.poses.append(pose)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_tum(path, traj: Trajectory) -> None:
    lines = []
    for ts, pose in zip(traj.timestamps, traj.poses):
        q = pose.rotation
        t = pose.translation
        lines.append(" ".join(_fmt(v) for v in (ts, t[0], t[1], t[2], q.x, q.y, q.z, q.w)))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path) -> Trajectory:
    timestamps = []
    poses = []
    for i, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 8:
            raise TrajectoryParseError(i, f"expected 8 fields, got {len(tok)}")
        try:
            vals = [float(v) for v in tok]
        except ValueError:
            raise TrajectoryParseError(i, f"non-numeric field in {line!r}") from None
        ts, tx, ty, tz, qx, qy, qz, qw = vals
        try:
            pose = SE3Pose(Quaternion(qw, qx, qy, qz), np.array([tx, ty, tz]))
        except ValueError as e:
            raise TrajectoryParseError(i, str(e)) from None
        timestamps.append(ts)
        poses.append(pose)
    return Trajectory(np.array(timestamps), poses)

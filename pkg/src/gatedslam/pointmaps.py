"""Per-pixel point grids with validity masks and confidence, plus PLY export.

Point clouds are written as ASCII PLY with an extra `confidence` property.
Two layouts exist: a plain cloud (valid points only) and a full pixel grid
(raster order, confidence 0 marking invalid pixels) that round-trips the
H x W structure through `comment width/height` header lines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .geometry import SE3Pose, Sim3Transform


class PlyParseError(ValueError):
    """Malformed PLY content; message carries the offending line number."""

    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass
class PointMap:
    """H x W grid of 3D points (meters) with a boolean validity mask."""

    points: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError(f"points must be HxWx3, got {self.points.shape}")
        if self.valid is None:
            self.valid = np.ones(self.points.shape[:2], dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.points.shape[:2]:
            raise ValueError("validity mask shape does not match points")
        if not np.isfinite(self.points[self.valid]).all():
            raise ValueError("valid points must be finite")

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    def valid_points(self) -> np.ndarray:
        """Return the valid points as an (N, 3) array in raster order."""
        return self.points[self.valid]


@dataclass
class ConfidenceMap:
    """H x W grid of positive per-pixel confidences."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("confidence map must be 2-D")
        if not (self.values > 0).all():
            raise ValueError("confidences must be positive")


def transform_pointmap(t: Union[SE3Pose, Sim3Transform], p: PointMap) -> PointMap:
    """Apply a rigid or similarity transform to every point; mask is kept."""
    return PointMap(t.apply(p.points), p.valid.copy())


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _ply_header(count: int, comments: list[str]) -> list[str]:
    lines = ["ply", "format ascii 1.0"]
    lines += [f"comment {c}" for c in comments]
    lines += [
        f"element vertex {count}",
        "property double x",
        "property double y",
        "property double z",
        "property double confidence",
        "end_header",
    ]
    return lines


def write_ply_cloud(path, points: np.ndarray, confidence: np.ndarray = None) -> None:
    """Write an (N, 3) cloud; confidence defaults to 1 for every point."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if confidence is None:
        confidence = np.ones(len(points))
    confidence = np.asarray(confidence, dtype=float).reshape(-1)
    if len(confidence) != len(points):
        raise ValueError("confidence length does not match point count")
    lines = _ply_header(len(points), [])
    for p, c in zip(points, confidence):
        lines.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {_fmt(c)}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_ply_pointmap(path, pmap: PointMap, conf: ConfidenceMap) -> None:
    """Write the full pixel grid in raster order; invalid pixels get
    coordinates 0 and the confidence-0 sentinel."""
    if conf.values.shape != pmap.points.shape[:2]:
        raise ValueError("confidence shape does not match pointmap")
    h, w = pmap.points.shape[:2]
    pts = np.where(pmap.valid[..., None], pmap.points, 0.0).reshape(-1, 3)
    cs = np.where(pmap.valid, conf.values, 0.0).reshape(-1)
    lines = _ply_header(h * w, [f"width {w}", f"height {h}"])
    for p, c in zip(pts, cs):
        lines.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {_fmt(c)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Read an ASCII PLY written by this module.

    Returns (points (N,3), confidence (N,), comments dict).  Comments of the
    form `comment key value` are parsed into the dict.
    """
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyParseError(1, "missing ply magic")
    count = None
    comments = {}
    body_start = None
    for i, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "comment" and len(tok) == 3:
            comments[tok[1]] = tok[2]
        elif tok[0] == "element":
            if len(tok) != 3 or tok[1] != "vertex":
                raise PlyParseError(i, f"unsupported element {line!r}")
            count = int(tok[2])
        elif tok[0] == "end_header":
            body_start = i
            break
    if body_start is None or count is None:
        raise PlyParseError(len(lines), "header not terminated")
    body = lines[body_start:body_start + count]
    if len(body) != count:
        raise PlyParseError(len(lines), f"expected {count} vertices, got {len(body)}")
    data = np.empty((count, 4))
    for j, line in enumerate(body):
        tok = line.split()
        if len(tok) != 4:
            raise PlyParseError(body_start + 1 + j, f"expected 4 values, got {len(tok)}")
        try:
            data[j] = [float(v) for v in tok]
        except ValueError as e:
            raise PlyParseError(body_start + 1 + j, str(e)) from None
    return data[:, :3], data[:, 3], comments


def read_ply_pointmap(path) -> tuple[PointMap, ConfidenceMap]:
    """Reconstruct the pixel grid; confidence 0 becomes an invalid pixel."""
    points, conf, comments = read_ply(path)
    if "width" not in comments or "height" not in comments:
        raise PlyParseError(1, "missing width/height comments")
    w, h = int(comments["width"]), int(comments["height"])
    if len(points) != w * h:
        raise PlyParseError(1, f"vertex count {len(points)} != {w}x{h}")
    valid = conf.reshape(h, w) > 0
    values = np.where(valid, conf.reshape(h, w), 1.0)
    return PointMap(points.reshape(h, w, 3), valid), ConfidenceMap(values)

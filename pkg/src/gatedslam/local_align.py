"""Intra-submap refinement: keyframe-centered connectivity graph plus
alternating closed-form minimization of a confidence-weighted alignment loss.

Each keyframe n of a submap centers one edge whose members are the submap
frames with ids in [n-k, n+k].  Every edge carries its own predictions of the
member pointmaps, expressed in the edge's (center keyframe) coordinate frame.
The optimization estimates one similarity transform per edge plus one fused
pointmap per frame (xi), minimizing

    sum_e sum_{v in e} sum_i  C_i^{v,e} || xi_i^v - sigma_e P_e X_i^{v,e} ||^2

by alternation: (a) per-edge (sigma, P) via weighted Umeyama with xi fixed,
(b) xi as the confidence-weighted average of the transformed edge maps.
Both half-steps are exact minimizers, so this squared objective never
increases.  The reported solution loss additionally gives the unsquared sum
(per-pixel L2, not squared), which is the quantity the squared surrogate
stands in for.  The edge centered at the submap anchor keyframe is pinned to
the identity to fix the gauge; per-edge scale is optimized only when enabled
(all submaps nominally share one metric scale).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Quaternion, Sim3Transform
from .pointmaps import ConfidenceMap, PointMap


@dataclass(frozen=True)
class LocalAlignConfig:
    window: int = 2
    max_iters: int = 100
    rel_tol: float = 1e-10
    optimize_scale: bool = False

    def __post_init__(self):
        if self.window < 1 or self.max_iters < 1 or self.rel_tol <= 0:
            raise ValueError("window/max_iters must be >= 1, rel_tol > 0")


@dataclass
class Edge:
    center: int
    members: list
    points: dict  # frame id -> PointMap in the center keyframe's frame
    conf: dict  # frame id -> ConfidenceMap


@dataclass
class ConnectivityGraph:
    anchor_center: int
    edges: list

    def __post_init__(self):
        if not self.edges:
            raise ValueError("empty connectivity graph")
        centers = [e.center for e in self.edges]
        if len(set(centers)) != len(centers):
            raise ValueError("duplicate edge centers")
        if self.anchor_center not in centers:
            raise ValueError("anchor keyframe has no edge")

    def frames(self) -> list:
        return sorted({v for e in self.edges for v in e.members})


@dataclass
class LocalSolution:
    points: dict  # frame id -> fused PointMap
    transforms: dict  # edge center -> Sim3Transform
    loss: float  # unsquared confidence-weighted objective
    trace: list  # squared objective after every half-step
    iterations: int
    converged: bool


def build_connectivity_graph(submap, window: int, edge_source) -> ConnectivityGraph:
    """One edge per keyframe; members are the submap frames within the id
    window.  edge_source(center, members) supplies per-edge predictions as
    {frame id: (PointMap, ConfidenceMap)}."""
    if not submap.frame_ids:
        raise ValueError("empty submap")
    edges = []
    for n in submap.keyframe_ids:
        members = [v for v in submap.frame_ids if n - window <= v <= n + window]
        preds = edge_source(n, members)
        if set(preds) != set(members):
            raise ValueError("edge source returned wrong member set")
        pts = {v: preds[v][0] for v in members}
        conf = {v: preds[v][1] for v in members}
        edges.append(Edge(n, members, pts, conf))
    return ConnectivityGraph(submap.anchor_id, edges)


def weighted_umeyama(src: np.ndarray, dst: np.ndarray, weights: np.ndarray = None,
                     with_scale: bool = True) -> Sim3Transform:
    """Closed-form minimizer of sum_i w_i ||dst_i - s R src_i - t||^2.

    det(R) = +1 is enforced by the sign-correction step, so mirrored inputs
    yield the best proper rotation rather than a reflection.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("src/dst shape mismatch")
    if len(src) < 3:
        raise ValueError("need at least 3 point pairs")
    if weights is None:
        weights = np.ones(len(src))
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if (weights <= 0).any():
        raise ValueError("weights must be positive")
    wn = weights / weights.sum()
    mu_s = wn @ src
    mu_d = wn @ dst
    sc = src - mu_s
    dc = dst - mu_d
    cov = (dc * wn[:, None]).T @ sc
    u, s, vt = np.linalg.svd(cov)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise ValueError("degenerate point configuration (collinear or coincident)")
    d = 1.0 if np.linalg.det(u @ vt) >= 0 else -1.0
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    if with_scale:
        var_s = float(wn @ (sc**2).sum(axis=1))
        scale = (s[0] + s[1] + d * s[2]) / var_s
        if not scale > 0:
            raise ValueError("non-positive recovered scale")
    else:
        scale = 1.0
    t = mu_d - scale * (r @ mu_s)
    return Sim3Transform(scale, Quaternion.from_matrix(r), t)


def _objective(edges, transforms, xi_points, xi_valid, squared: bool) -> float:
    total = 0.0
    for e in edges:
        t = transforms[e.center]
        for v in e.members:
            mask = e.points[v].valid & xi_valid[v]
            if not mask.any():
                continue
            diff = xi_points[v][mask] - t.apply(e.points[v].points[mask])
            n = np.linalg.norm(diff, axis=1)
            c = e.conf[v].values[mask]
            total += float((c * (n * n if squared else n)).sum())
    return total


def _average_step(edges, transforms, shape_of):
    """Exact xi minimizer: per-pixel confidence-weighted average of the
    transformed per-edge maps."""
    num = {v: np.zeros(shape_of[v] + (3,)) for v in shape_of}
    den = {v: np.zeros(shape_of[v]) for v in shape_of}
    for e in edges:
        t = transforms[e.center]
        for v in e.members:
            mask = e.points[v].valid
            c = np.where(mask, e.conf[v].values, 0.0)
            num[v] += c[..., None] * t.apply(e.points[v].points)
            den[v] += c
    pts, valid = {}, {}
    for v in shape_of:
        valid[v] = den[v] > 0
        safe = np.where(valid[v], den[v], 1.0)
        pts[v] = np.where(valid[v][..., None], num[v] / safe[..., None], 0.0)
    return pts, valid


def _greedy_transforms(graph: ConnectivityGraph, with_scale: bool) -> dict:
    """Chain edges off the anchor via shared members (identity fallback)."""
    transforms = {graph.anchor_center: Sim3Transform.identity()}
    pending = sorted((e for e in graph.edges if e.center != graph.anchor_center),
                     key=lambda e: abs(e.center - graph.anchor_center))
    by_center = {e.center: e for e in graph.edges}
    for e in pending:
        srcs, dsts, ws = [], [], []
        for v in e.members:
            for c2, t2 in transforms.items():
                e2 = by_center[c2]
                if v not in e2.members:
                    continue
                mask = e.points[v].valid & e2.points[v].valid
                if not mask.any():
                    continue
                srcs.append(e.points[v].points[mask])
                dsts.append(t2.apply(e2.points[v].points[mask]))
                ws.append(e.conf[v].values[mask])
        transforms[e.center] = Sim3Transform.identity()
        if srcs:
            src = np.vstack(srcs)
            if len(src) >= 3:
                try:
                    transforms[e.center] = weighted_umeyama(
                        src, np.vstack(dsts), np.hstack(ws), with_scale)
                except ValueError:
                    pass
    return transforms


def optimize_submap(graph: ConnectivityGraph, cfg: LocalAlignConfig = LocalAlignConfig(),
                    initial_points: dict = None, trace_csv=None) -> LocalSolution:
    """Alternating minimization over (per-edge transforms, fused pointmaps).

    initial_points optionally seeds xi (e.g. from the frontend's world-frame
    predictions); otherwise a greedy chain of Umeyama registrations seeds the
    per-edge transforms and xi starts as their fused average.
    """
    edges = graph.edges
    shape_of = {}
    for e in edges:
        for v in e.members:
            shape_of[v] = e.points[v].points.shape[:2]

    if initial_points is None:
        transforms = _greedy_transforms(graph, cfg.optimize_scale)
        xi_pts, xi_valid = _average_step(edges, transforms, shape_of)
    else:
        transforms = {e.center: Sim3Transform.identity() for e in edges}
        xi_pts, xi_valid = {}, {}
        fill_pts, fill_valid = _average_step(edges, transforms, shape_of)
        for v in shape_of:
            given = initial_points.get(v)
            if given is None:
                xi_pts[v], xi_valid[v] = fill_pts[v], fill_valid[v]
            else:
                use = given.valid & fill_valid[v]
                xi_pts[v] = np.where(use[..., None], given.points, fill_pts[v])
                xi_valid[v] = fill_valid[v]

    trace = [_objective(edges, transforms, xi_pts, xi_valid, squared=True)]
    converged = False
    iters = 0
    for iters in range(1, cfg.max_iters + 1):
        for e in edges:
            if e.center == graph.anchor_center:
                continue  # gauge
            srcs, dsts, ws = [], [], []
            for v in e.members:
                mask = e.points[v].valid & xi_valid[v]
                if not mask.any():
                    continue
                srcs.append(e.points[v].points[mask])
                dsts.append(xi_pts[v][mask])
                ws.append(e.conf[v].values[mask])
            if not srcs:
                continue
            src = np.vstack(srcs)
            if len(src) < 3:
                continue
            try:
                transforms[e.center] = weighted_umeyama(
                    src, np.vstack(dsts), np.hstack(ws), cfg.optimize_scale)
            except ValueError:
                pass  # keep previous transform on degenerate data
        trace.append(_objective(edges, transforms, xi_pts, xi_valid, squared=True))

        xi_pts, xi_valid = _average_step(edges, transforms, shape_of)
        trace.append(_objective(edges, transforms, xi_pts, xi_valid, squared=True))

        prev, cur = trace[-3], trace[-1]
        if prev - cur <= cfg.rel_tol * max(prev, 1e-300):
            converged = True
            break

    if trace_csv is not None:
        lines = ["iter,loss"] + [f"{i},{v:.17g}" for i, v in enumerate(trace)]
        Path(trace_csv).write_text("\n".join(lines) + "\n")

    points = {v: PointMap(xi_pts[v], xi_valid[v]) for v in shape_of}
    final_unsquared = _objective(edges, transforms, xi_pts, xi_valid, squared=False)
    return LocalSolution(points, transforms, final_unsquared, trace, iters, converged)

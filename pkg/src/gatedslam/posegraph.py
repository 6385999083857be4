"""Inter-submap registration: sequential and loop-closure constraints over
submap base poses, solved by Levenberg-Marquardt on the SE(3) manifold.

Each edge (u, v) stores a measured relative pose D and contributes the
residual r = Log(D^-1 T_u^-1 T_v) weighted by a 6x6 information matrix; a
prior factor on one node pins the global gauge.  Loop closures are found by
scoring prior keyframes with the frontend covisibility metric after coarse
alignment through the current node estimates; only the single best match
above threshold is kept, and its relative pose comes from a rigid Umeyama
fit on overlapping points plus ICP refinement.

Jacobians are numeric (central differences on the 6-dim local
perturbation).  Graphs here stay small, tens of submaps, so correctness
beats speed; analytic Jacobians would be the optimization path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import icp_refine
from .frontend import BoundaryObservation, FrontendConfig, Submap
from .geometry import Quaternion, SE3Pose, se3_exp, se3_log
from .local_align import weighted_umeyama
from .neighbors import fraction_within, nn_query
from .trajectory import Trajectory

KIND_SEQUENTIAL = "sequential"
KIND_LOOP = "loop"

# Default factor weights.  Loops earn more weight than odometry because they
# are geometrically verified; the prior is near-rigid to pin the gauge.
SEQUENTIAL_INFO_SCALE = 1.0
LOOP_INFO_SCALE = 10.0
PRIOR_INFO_SCALE = 1e6


def _check_info(info: np.ndarray) -> np.ndarray:
    info = np.asarray(info, dtype=float)
    if info.shape != (6, 6):
        raise ValueError("information matrix must be 6x6")
    if not np.allclose(info, info.T, atol=1e-12):
        raise ValueError("information matrix must be symmetric")
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise ValueError("information matrix must be positive definite") from None
    return info


@dataclass
class PoseGraphEdge:
    u: int
    v: int
    delta: SE3Pose  # measured T_u^-1 T_v
    info: np.ndarray
    kind: str = KIND_SEQUENTIAL

    def __post_init__(self):
        self.info = _check_info(self.info)
        if self.kind not in (KIND_SEQUENTIAL, KIND_LOOP):
            raise ValueError(f"unknown edge kind {self.kind!r}")
        if self.u == self.v:
            raise ValueError("self edges are not allowed")


@dataclass
class Prior:
    node: int
    pose: SE3Pose
    info: np.ndarray

    def __post_init__(self):
        self.info = _check_info(self.info)


@dataclass
class PoseGraph:
    nodes: dict  # submap id -> SE3Pose (world-from-submap)
    edges: list = field(default_factory=list)
    prior: Prior = None

    def __post_init__(self):
        if self.prior is None:
            raise ValueError("pose graph needs a prior to fix the gauge")
        if self.prior.node not in self.nodes:
            raise ValueError("prior node missing from the graph")
        for e in self.edges:
            if e.u not in self.nodes or e.v not in self.nodes:
                raise ValueError(f"edge ({e.u},{e.v}) references a missing node")

    @staticmethod
    def create(node: int, pose: SE3Pose, info: np.ndarray = None) -> "PoseGraph":
        if info is None:
            info = PRIOR_INFO_SCALE * np.eye(6)
        return PoseGraph({node: pose}, [], Prior(node, pose, info))


def sequential_constraint(boundary: BoundaryObservation,
                          info: np.ndarray = None) -> PoseGraphEdge:
    """Rigid inter-submap constraint from the boundary frame seen in both
    submap frames: D = pose_in_old * pose_in_new^-1."""
    if info is None:
        info = SEQUENTIAL_INFO_SCALE * np.eye(6)
    delta = boundary.pose_in_old.compose(boundary.pose_in_new.inverse())
    return PoseGraphEdge(boundary.old_submap, boundary.new_submap, delta,
                         info, KIND_SEQUENTIAL)


# ------------------------------------------------------------ optimization


@dataclass(frozen=True)
class OptimizeConfig:
    max_iters: int = 50
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    grad_tol: float = 1e-10
    jac_step: float = 1e-6
    huber_delta: float = None  # robust kernel off by default
    max_rejects: int = 60


@dataclass
class OptimizeResult:
    cost: float
    iterations: int  # accepted steps
    cost_trace: list  # cost after each accepted step, starting at the initial
    grad_norm: float
    converged: bool
    singular_events: int = 0


def _edge_residual(delta_inv: SE3Pose, tu: SE3Pose, tv: SE3Pose) -> np.ndarray:
    return se3_log(delta_inv.compose(tu.inverse().compose(tv)))


def _factor_terms(graph: PoseGraph):
    """Yield (node ids, residual function) per factor; the residual closes
    over the measurement, not the state."""
    for e in graph.edges:
        dinv = e.delta.inverse()
        yield ([e.u, e.v], e.info,
               lambda tu, tv, dinv=dinv: _edge_residual(dinv, tu, tv))
    p = graph.prior
    yield ([p.node], p.info,
           lambda t, pose=p.pose: se3_log(t.inverse().compose(pose)))


def _robust_weight(e2: float, delta: float) -> float:
    if delta is None:
        return 1.0
    r = np.sqrt(e2)
    return 1.0 if r <= delta else delta / r


def _robust_cost(e2: float, delta: float) -> float:
    if delta is None:
        return e2
    r = np.sqrt(e2)
    return e2 if r <= delta else 2.0 * delta * r - delta * delta


def graph_cost(graph: PoseGraph, nodes: dict = None,
               huber_delta: float = None) -> float:
    """Weighted squared residual sum over the given node poses (defaults to
    the graph's own)."""
    if nodes is None:
        nodes = graph.nodes
    total = 0.0
    for ids, info, fn in _factor_terms(graph):
        r = fn(*[nodes[i] for i in ids])
        total += _robust_cost(float(r @ info @ r), huber_delta)
    return total


def _check_connected(graph: PoseGraph) -> None:
    adj: dict = {n: [] for n in graph.nodes}
    for e in graph.edges:
        adj[e.u].append(e.v)
        adj[e.v].append(e.u)
    seen = {graph.prior.node}
    stack = [graph.prior.node]
    while stack:
        for m in adj[stack.pop()]:
            if m not in seen:
                seen.add(m)
                stack.append(m)
    missing = set(graph.nodes) - seen
    if missing:
        raise ValueError(f"nodes {sorted(missing)} not connected to the prior")


def _numeric_jacobian(fn, poses: list, h: float) -> np.ndarray:
    """Central-difference Jacobian of a residual over the stacked 6-dim
    local perturbations of the given poses (retraction T * exp(eps))."""
    k = len(poses)
    jac = np.zeros((6, 6 * k))
    for p in range(k):
        for d in range(6):
            eps = np.zeros(6)
            eps[d] = h
            plus = list(poses)
            plus[p] = poses[p].compose(se3_exp(eps))
            minus = list(poses)
            minus[p] = poses[p].compose(se3_exp(-eps))
            jac[:, 6 * p + d] = (fn(*plus) - fn(*minus)) / (2.0 * h)
    return jac


def optimize(graph: PoseGraph, cfg: OptimizeConfig = OptimizeConfig()) -> OptimizeResult:
    """Damped Gauss-Newton over all node poses; steps are accepted only if
    the cost does not increase, so the accepted-cost trace is monotone.
    Updates graph.nodes in place."""
    _check_connected(graph)
    order = sorted(graph.nodes)
    slot = {n: i for i, n in enumerate(order)}
    dim = 6 * len(order)

    lam = cfg.lambda_init
    cost = graph_cost(graph, huber_delta=cfg.huber_delta)
    trace = [cost]
    accepted = 0
    singular = 0
    grad_norm = np.inf
    converged = False

    for _ in range(cfg.max_iters):
        hess = np.zeros((dim, dim))
        grad = np.zeros(dim)
        for ids, info, fn in _factor_terms(graph):
            poses = [graph.nodes[i] for i in ids]
            r = fn(*poses)
            w = _robust_weight(float(r @ info @ r), cfg.huber_delta)
            lt = np.linalg.cholesky(w * info).T
            rw = lt @ r
            jw = lt @ _numeric_jacobian(fn, poses, cfg.jac_step)
            idx = np.concatenate([np.arange(6 * slot[i], 6 * slot[i] + 6) for i in ids])
            hess[np.ix_(idx, idx)] += jw.T @ jw
            grad[idx] += jw.T @ rw
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < cfg.grad_tol:
            converged = True
            break

        stepped = False
        for _ in range(cfg.max_rejects):
            try:
                delta = np.linalg.solve(hess + lam * np.eye(dim), -grad)
            except np.linalg.LinAlgError:
                singular += 1
                lam *= cfg.lambda_up
                continue
            candidate = {
                n: graph.nodes[n].compose(se3_exp(delta[6 * slot[n]: 6 * slot[n] + 6]))
                for n in order
            }
            new_cost = graph_cost(graph, candidate, cfg.huber_delta)
            if new_cost <= cost:
                graph.nodes.update(candidate)
                cost = new_cost
                trace.append(cost)
                accepted += 1
                lam = max(lam * cfg.lambda_down, 1e-12)
                stepped = True
                break
            lam *= cfg.lambda_up
        if not stepped:
            break  # no non-increasing step found at any damping

    return OptimizeResult(cost, accepted, trace, grad_norm, converged, singular)


def incremental_update(graph: PoseGraph, edge: PoseGraphEdge,
                       cfg: OptimizeConfig = OptimizeConfig()):
    """Append a factor.  Sequential edges initialize the new node by
    composition and return None; loop edges trigger re-optimization and
    return its result."""
    if edge.u not in graph.nodes:
        raise ValueError(f"edge source node {edge.u} unknown")
    if edge.kind == KIND_SEQUENTIAL:
        if edge.v not in graph.nodes:
            graph.nodes[edge.v] = graph.nodes[edge.u].compose(edge.delta)
        graph.edges.append(edge)
        return None
    if edge.v not in graph.nodes:
        raise ValueError(f"loop edge target node {edge.v} unknown")
    graph.edges.append(edge)
    return optimize(graph, cfg)


# ------------------------------------------------------------ loop closure


@dataclass
class KeyframeEntry:
    frame_id: int
    submap_id: int
    points: np.ndarray  # valid world points in the submap frame
    sample: np.ndarray  # stride-subsampled subset, query side


@dataclass
class KeyframeDatabase:
    entries: list = field(default_factory=list)

    def add(self, frame_id: int, submap_id: int, prediction,
            stride: int = 4) -> None:
        pm = prediction.points_world
        pts = pm.valid_points()
        sub = pm.points[::stride, ::stride][pm.valid[::stride, ::stride]]
        self.entries.append(KeyframeEntry(frame_id, submap_id, pts, sub))

    def add_submap(self, submap: Submap, stride: int = 4) -> None:
        for kid in submap.keyframe_ids:
            self.add(kid, submap.id, submap.frames[kid].prediction, stride)


@dataclass
class LoopCandidate:
    query_id: int  # keyframe in the finalized submap
    match_id: int  # keyframe in the earlier submap
    score: float
    delta: SE3Pose  # T_old_submap^-1 T_new_submap
    old_submap: int
    new_submap: int


def _pair_score(match: KeyframeEntry, query_pts: np.ndarray,
                query_sample: np.ndarray, radius: float) -> float:
    if len(query_sample) == 0 or len(match.sample) == 0:
        return 0.0
    return min(fraction_within(match.points, query_sample, radius),
               fraction_within(query_pts, match.sample, radius))


def detect_loops(submap: Submap, db: KeyframeDatabase, graph: PoseGraph,
                 cfg: FrontendConfig = FrontendConfig(),
                 min_separation: int = 2) -> list:
    """Score all prior keyframes against the finalized submap's keyframes
    and keep at most the single best pair above tau_loop.

    Adjacent submaps (separation < min_separation) are skipped: their
    overlap is already captured by the sequential constraint.
    """
    if submap.id not in graph.nodes:
        raise ValueError("finalized submap missing from the graph")
    best = None
    queries = []
    for kid in submap.keyframe_ids:
        pm = submap.frames[kid].prediction.points_world
        pts = pm.valid_points()
        sub = pm.points[::cfg.stride, ::cfg.stride][pm.valid[::cfg.stride, ::cfg.stride]]
        queries.append((kid, pts, sub))
    for entry in db.entries:
        if submap.id - entry.submap_id < min_separation:
            continue
        if entry.submap_id not in graph.nodes:
            continue
        # coarse alignment of new-submap points into the entry's submap frame
        guess = graph.nodes[entry.submap_id].inverse().compose(graph.nodes[submap.id])
        for kid, pts, sub in queries:
            score = _pair_score(entry, guess.apply(pts), guess.apply(sub), cfg.radius)
            if best is None or score > best[0]:
                best = (score, kid, entry, guess)
    if best is None or best[0] < cfg.tau_loop:
        return []
    score, kid, entry, guess = best
    pts = submap.frames[kid].prediction.points_world.valid_points()
    moved = guess.apply(pts)
    dists, idx = nn_query(entry.points, moved)
    keep = dists <= cfg.radius
    if keep.sum() < 3:
        return []
    correction = weighted_umeyama(moved[keep], entry.points[idx[keep]],
                                  with_scale=False)
    refined, _ = icp_refine(moved, entry.points, correction)
    fix = SE3Pose(refined.rotation, refined.translation)
    delta = fix.compose(guess)
    return [LoopCandidate(kid, entry.frame_id, score, delta,
                          entry.submap_id, submap.id)]


def loop_constraint(candidate: LoopCandidate, info: np.ndarray = None) -> PoseGraphEdge:
    if info is None:
        info = LOOP_INFO_SCALE * np.eye(6)
    return PoseGraphEdge(candidate.old_submap, candidate.new_submap,
                         candidate.delta, info, KIND_LOOP)


# ------------------------------------------------------------- g2o format


class G2oParseError(ValueError):
    """Malformed g2o content; carries the 1-based offending line number."""

    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_g2o(path, graph: PoseGraph) -> None:
    """Vertices sorted by id, the FIX line for the prior node, then edges in
    insertion order.  Files written here round trip byte-identically."""
    lines = []
    for n in sorted(graph.nodes):
        pose = graph.nodes[n]
        q, t = pose.rotation, pose.translation
        lines.append("VERTEX_SE3:QUAT %d %s" % (
            n, " ".join(_fmt(v) for v in (t[0], t[1], t[2], q.x, q.y, q.z, q.w))))
    lines.append("FIX %d" % graph.prior.node)
    for e in graph.edges:
        q, t = e.delta.rotation, e.delta.translation
        upper = [e.info[i, j] for i in range(6) for j in range(i, 6)]
        vals = (t[0], t[1], t[2], q.x, q.y, q.z, q.w) + tuple(upper)
        lines.append("EDGE_SE3:QUAT %d %d %s" % (
            e.u, e.v, " ".join(_fmt(v) for v in vals)))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_pose(tok: list, lineno: int) -> SE3Pose:
    tx, ty, tz, qx, qy, qz, qw = (float(v) for v in tok)
    try:
        return SE3Pose(Quaternion(qw, qx, qy, qz), np.array([tx, ty, tz]))
    except ValueError as exc:
        raise G2oParseError(lineno, str(exc)) from None


def read_g2o(path) -> PoseGraph:
    nodes = {}
    edges = []
    fixed = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        try:
            if tok[0] == "VERTEX_SE3:QUAT":
                if len(tok) != 9:
                    raise G2oParseError(lineno, "vertex needs 9 fields")
                nodes[int(tok[1])] = _parse_pose(tok[2:9], lineno)
            elif tok[0] == "FIX":
                fixed = int(tok[1])
            elif tok[0] == "EDGE_SE3:QUAT":
                if len(tok) != 31:
                    raise G2oParseError(lineno, "edge needs 31 fields")
                u, v = int(tok[1]), int(tok[2])
                delta = _parse_pose(tok[3:10], lineno)
                upper = [float(x) for x in tok[10:31]]
                info = np.zeros((6, 6))
                k = 0
                for i in range(6):
                    for j in range(i, 6):
                        info[i, j] = info[j, i] = upper[k]
                        k += 1
                kind = KIND_SEQUENTIAL if v == u + 1 else KIND_LOOP
                edges.append(PoseGraphEdge(u, v, delta, info, kind))
            else:
                raise G2oParseError(lineno, f"unknown record {tok[0]!r}")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, G2oParseError):
                raise
            raise G2oParseError(lineno, str(exc)) from None
    if fixed is None:
        raise G2oParseError(0, "no FIX line; the gauge is undefined")
    if fixed not in nodes:
        raise G2oParseError(0, f"FIX references unknown vertex {fixed}")
    prior = Prior(fixed, nodes[fixed], PRIOR_INFO_SCALE * np.eye(6))
    return PoseGraph(nodes, edges, prior)


# ------------------------------------------------------------ map assembly


def assemble_global_map(submaps: list, graph: PoseGraph,
                        local_solutions: dict):
    """Map every frame's fused pointmap and pose through its submap's node
    transform.  Returns (world cloud, world Trajectory ordered by time).

    Output is independent of the submap list order: submaps are walked by
    id and the trajectory is sorted by timestamp.
    """
    chunks = []
    entries = []
    for sub in sorted(submaps, key=lambda s: s.id):
        if sub.id not in graph.nodes:
            raise ValueError(f"submap {sub.id} has no pose graph node")
        if sub.id not in local_solutions:
            raise ValueError(f"submap {sub.id} has no local solution")
        base = graph.nodes[sub.id]
        sol = local_solutions[sub.id]
        for fid in sub.frame_ids:
            frame = sub.frames[fid]
            entries.append((frame.timestamp, base.compose(frame.prediction.pose)))
            pm = sol.points[fid]
            pts = pm.valid_points()
            if len(pts):
                chunks.append(base.apply(pts))
    entries.sort(key=lambda e: e[0])
    traj = Trajectory()
    for ts, pose in entries:
        traj.append(ts, pose)
    cloud = np.vstack(chunks) if chunks else np.zeros((0, 3))
    return cloud, traj

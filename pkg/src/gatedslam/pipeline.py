"""End-to-end run orchestration: sequence -> frontend -> alignment -> metrics.

Wires the pieces together: a predictor adapter feeds the frontend, finished
submaps are fused locally and stitched globally through the pose graph, and
the result is scored against the synthetic ground truth.  Everything here is
deterministic given the config seed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .evaluation import EvalConfig, EvalReport, evaluate_run, write_report
from .frontend import (
    DECISION_SUBMAP,
    Frontend,
    FrontendConfig,
    Submap,
    write_decision_log,
)
from .geometry import Quaternion, SE3Pose
from .local_align import LocalAlignConfig, build_connectivity_graph, optimize_submap
from .neighbors import nn_query
from .pointmaps import write_ply_cloud
from .posegraph import (
    KIND_SEQUENTIAL,
    KeyframeDatabase,
    OptimizeConfig,
    PoseGraph,
    PoseGraphEdge,
    Prior,
    assemble_global_map,
    detect_loops,
    incremental_update,
    loop_constraint,
    sequential_constraint,
    write_g2o,
)
from .predictor import GatedRecurrentPredictor, ModelConfig
from .synth import (
    NoiseSpec,
    OraclePredictor,
    SceneSpec,
    SequenceFrame,
    SyntheticSequence,
    generate,
    synthetic_image,
)
from .trajectory import write_tum

PREDICTOR_KINDS = ("oracle", "toy")


class OracleAdapter:
    """Frontend adapter around the ground-truth-plus-noise predictor."""

    def __init__(self, oracle: OraclePredictor):
        self.oracle = oracle

    def initial_state(self):
        return self.oracle.initial_state()

    def step(self, state, frame: SequenceFrame):
        return self.oracle.step(state, frame.index)


class ToyAdapter:
    """Frontend adapter that renders each frame and runs the tiny network."""

    def __init__(self, model: GatedRecurrentPredictor):
        self.model = model

    def initial_state(self):
        return self.model.initial_state()

    def step(self, state, frame: SequenceFrame):
        image = synthetic_image(frame.points_cam)
        return self.model.step(state, image)


class RerunEdgeSource:
    """Produces per-edge pointmap sets by replaying frames from a fresh state.

    Running the predictor with the edge center first makes every output live
    in the center frame's coordinates, which is exactly what the local
    alignment wants: each member pointmap expressed relative to the center.
    """

    def __init__(self, adapter, sequence: SyntheticSequence):
        self.adapter = adapter
        self.frames = {f.index: f for f in sequence.frames}

    def __call__(self, center: int, members) -> dict:
        order = [center] + sorted(m for m in members if m != center)
        state = self.adapter.initial_state()
        out = {}
        for fid in order:
            state, pred = self.adapter.step(state, self.frames[fid])
            out[fid] = (pred.points_world, pred.conf_world)
        return out


@dataclass
class RunConfig:
    """Full description of a pipeline run; JSON round-trippable."""

    scene: SceneSpec = field(default_factory=SceneSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    predictor: str = "oracle"
    seed: int = 0
    threads: int = 1
    model: dict = field(default_factory=dict)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    local: LocalAlignConfig = field(default_factory=LocalAlignConfig)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)
    eval_cfg: EvalConfig = field(default_factory=EvalConfig)
    min_separation: int = 2
    loop_min_overlap: float = 0.8
    loop_gate_radius: float = 0.1
    loop_min_conditioning: float = 0.05

    def __post_init__(self):
        if self.predictor not in PREDICTOR_KINDS:
            raise ValueError(f"unknown predictor kind: {self.predictor!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        def sub(cls, key):
            return cls(**d.get(key, {}))

        return RunConfig(
            scene=SceneSpec.from_dict(d["scene"]) if "scene" in d else SceneSpec(),
            noise=sub(NoiseSpec, "noise"),
            predictor=d.get("predictor", "oracle"),
            seed=int(d.get("seed", 0)),
            threads=int(d.get("threads", 1)),
            model=dict(d.get("model", {})),
            frontend=sub(FrontendConfig, "frontend"),
            local=sub(LocalAlignConfig, "local"),
            optimize=sub(OptimizeConfig, "optimize"),
            eval_cfg=sub(EvalConfig, "eval"),
            min_separation=int(d.get("min_separation", 2)),
            loop_min_overlap=float(d.get("loop_min_overlap", 0.8)),
            loop_gate_radius=float(d.get("loop_gate_radius", 0.1)),
            loop_min_conditioning=float(d.get("loop_min_conditioning", 0.05)),
        )

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(),
            "noise": dataclasses.asdict(self.noise),
            "predictor": self.predictor,
            "seed": self.seed,
            "threads": self.threads,
            "model": dict(self.model),
            "frontend": dataclasses.asdict(self.frontend),
            "local": dataclasses.asdict(self.local),
            "optimize": dataclasses.asdict(self.optimize),
            "eval": dataclasses.asdict(self.eval_cfg),
            "min_separation": self.min_separation,
            "loop_min_overlap": self.loop_min_overlap,
            "loop_gate_radius": self.loop_gate_radius,
            "loop_min_conditioning": self.loop_min_conditioning,
        }


def make_adapter(cfg: RunConfig, sequence: SyntheticSequence):
    if cfg.predictor == "oracle":
        return OracleAdapter(OraclePredictor(sequence, cfg.noise, seed=cfg.seed))
    mc = ModelConfig(height=cfg.scene.height, width=cfg.scene.width, **cfg.model)
    return ToyAdapter(GatedRecurrentPredictor(mc))


@dataclass
class RunResult:
    config: RunConfig
    sequence: SyntheticSequence
    frontend: Frontend
    graph: PoseGraph
    solutions: dict
    loops: list
    est_traj: object
    est_cloud: np.ndarray
    report: EvalReport
    open_report: EvalReport
    metrics: dict


def _solution_cloud(sol) -> np.ndarray:
    return np.vstack([pm.valid_points() for pm in sol.points.values()])


def _cloud_normals(cloud: np.ndarray, k: int = 10):
    """Per-point unit normals from the smallest local PCA direction.

    Returns (normals, flat) where flat marks points whose neighborhood is
    genuinely planar.  Neighborhoods straddling an edge or corner mix two
    faces and their PCA normal points between them; such normals describe
    no real surface and must not feed a point-to-plane objective.
    """
    tree = cKDTree(cloud)
    _, knn = tree.query(cloud, k=k)
    nb = cloud[knn]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", nb, nb)
    vals, vecs = np.linalg.eigh(cov)
    flat = vals[:, 0] <= 0.05 * vals[:, 1]
    return vecs[:, :, 0], flat


def _point_to_plane_refine(src: np.ndarray, dst: np.ndarray, init: SE3Pose,
                           normals: np.ndarray, flat: np.ndarray,
                           max_iters: int = 30, rel_tol: float = 1e-12,
                           max_points: int = 4000) -> SE3Pose:
    """Rigid refinement minimizing distances to local planes of dst.

    Unlike point-to-point ICP this is unbiased when the two clouds sample
    the same surfaces at different grid points: at the true transform every
    source point already lies on a destination plane, so the update
    vanishes instead of chasing nearest-sample offsets.  Contacts whose
    nearest destination neighborhood is not planar are skipped; their
    blended normals would re-introduce exactly that bias.
    """
    step = max(1, len(src) // max_points)
    sub = src[::step]
    tree = cKDTree(dst)
    current = init
    prev = None
    for _ in range(max_iters):
        moved = current.apply(sub)
        _, idx = tree.query(moved)
        keep = flat[idx]
        if keep.sum() < 6:
            break
        p, q, n = moved[keep], dst[idx[keep]], normals[idx[keep]]
        r = np.einsum("ij,ij->i", p - q, n)
        # Points within half a sampling pitch of a corner can match a sample
        # on the perpendicular face; their plane distance stays at pitch
        # scale even at perfect alignment.  Trim far outside the bulk.
        scale = float(np.median(np.abs(r)))
        inl = np.abs(r) <= max(3.0 * scale, 1e-9)
        if inl.sum() < 6:
            break
        p, n, r = p[inl], n[inl], r[inl]
        rmse = float(np.sqrt(np.mean(r ** 2)))
        if prev is not None and abs(prev - rmse) <= rel_tol * max(prev, 1e-300):
            break
        prev = rmse
        rows = np.hstack([np.cross(p, n), n])
        try:
            sol = np.linalg.solve(rows.T @ rows, -rows.T @ r)
        except np.linalg.LinAlgError:
            break
        delta = SE3Pose(Quaternion.from_rotvec(sol[:3]), sol[3:])
        current = delta.compose(current)
    return current


def _constraint_eigenvalues(contacts: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Eigenvalues of the point-to-plane alignment Hessian, ascending.

    Each contact constrains the relative transform only along the local
    surface normal; on boxy scenes a single shared wall leaves a slide
    direction with a near-zero eigenvalue even though the point fit looks
    tight.
    """
    lever = contacts - contacts.mean(axis=0)
    rows = np.hstack([np.cross(lever, normals), normals])
    return np.linalg.eigvalsh(rows.T @ rows / len(rows))


def _refine_loop_delta(cand, solutions: dict, cfg: RunConfig):
    """Re-estimate a loop transform with submap-to-submap ICP, or reject it.

    The keyframe-level estimate comes from a single view pair; on mostly
    planar scenes it can slide along a wall.  The fused submap clouds span
    many viewpoints and pin down the remaining degrees of freedom.  Two
    gates then decide whether to keep the constraint: the clouds must
    actually overlap under the refined transform (wrong-basin check), and
    the contact geometry must constrain all six degrees of freedom
    (degenerate-slide check).
    """
    src = _solution_cloud(solutions[cand.new_submap])
    dst = _solution_cloud(solutions[cand.old_submap])
    normals, flat = _cloud_normals(dst)
    refined = _point_to_plane_refine(src, dst, cand.delta, normals, flat)
    probe = refined.apply(src[:: max(1, len(src) // 1500)])
    dists, idx = nn_query(dst, probe)
    close = dists <= cfg.loop_gate_radius
    if close.mean() < cfg.loop_min_overlap or close.sum() < 50:
        return None
    use = close & flat[idx]
    eig = _constraint_eigenvalues(probe[use], normals[idx[use]])
    if eig[0] < cfg.loop_min_conditioning:
        return None
    return dataclasses.replace(cand, delta=refined)


def _finalize_submap(sub: Submap, edge_source, db: KeyframeDatabase, graph, cfg: RunConfig,
                     solutions: dict, loops: list) -> None:
    """Fuse one finished submap, look for loops against older ones, file it."""
    local_graph = build_connectivity_graph(sub, cfg.local.window, edge_source)
    # Seeding the fused maps from the streaming predictions keeps every
    # keyframe window anchored to the submap frame even when windows do not
    # overlap (the connectivity graph alone fixes only relative placement).
    seed_pts = {fid: sub.frames[fid].prediction.points_world
                for fid in sub.frame_ids}
    sol = optimize_submap(local_graph, cfg.local, initial_points=seed_pts)
    # Frames outside every keyframe window are not refined; they enter the
    # assembled map with their raw submap-frame predictions.
    for fid in sub.frame_ids:
        if fid not in sol.points:
            sol.points[fid] = sub.frames[fid].prediction.points_world
    solutions[sub.id] = sol
    found = detect_loops(sub, db, graph, cfg=cfg.frontend,
                         min_separation=cfg.min_separation)
    for cand in found:
        cand = _refine_loop_delta(cand, solutions, cfg)
        if cand is None:
            continue
        incremental_update(graph, loop_constraint(cand), cfg.optimize)
        loops.append(cand)
    db.add_submap(sub, stride=cfg.frontend.stride)


def run_pipeline(cfg: RunConfig) -> RunResult:
    """Run the whole stack on a synthetic scene and score the result."""
    sequence = generate(cfg.scene)
    adapter = make_adapter(cfg, sequence)
    fe = Frontend(adapter, cfg.frontend)
    edge_source = RerunEdgeSource(adapter, sequence)

    graph = None
    db = KeyframeDatabase()
    solutions: dict = {}
    loops: list = []

    for frame in sequence.frames:
        decision = fe.process_frame(frame)
        if decision != DECISION_SUBMAP:
            continue
        if graph is None:
            graph = PoseGraph.create(fe.submaps[0].id, fe.submaps[0].pose)
            continue
        boundary = fe.boundaries[-1]
        incremental_update(graph, sequential_constraint(boundary), cfg.optimize)
        _finalize_submap(fe.submaps[-2], edge_source, db, graph, cfg,
                         solutions, loops)
    fe.finalize()
    if graph is None:
        raise ValueError("sequence produced no submaps")
    _finalize_submap(fe.submaps[-1], edge_source, db, graph, cfg,
                     solutions, loops)

    est_cloud, est_traj = assemble_global_map(fe.submaps, graph, solutions)

    # Open-loop baseline: raw frontend chaining, no loop closures applied.
    open_graph = PoseGraph(
        nodes={s.id: s.pose for s in fe.submaps},
        edges=[PoseGraphEdge(e.u, e.v, e.delta, e.info, e.kind)
               for e in graph.edges if e.kind == KIND_SEQUENTIAL],
        prior=Prior(fe.submaps[0].id, fe.submaps[0].pose, 1e6 * np.eye(6)),
    )
    open_cloud, open_traj = assemble_global_map(fe.submaps, open_graph, solutions)

    report = evaluate_run(est_traj, sequence.trajectory, est_cloud,
                          sequence.gt_cloud, cfg.eval_cfg)
    open_report = evaluate_run(open_traj, sequence.trajectory, open_cloud,
                               sequence.gt_cloud, cfg.eval_cfg)

    metrics = {
        "ate_rmse_m": report.ate_rmse,
        "open_loop_ate_m": open_report.ate_rmse,
        "acc_mean_cm": report.acc_mean * 100.0,
        "acc_median_cm": report.acc_median * 100.0,
        "comp_mean_cm": report.comp_mean * 100.0,
        "comp_median_cm": report.comp_median * 100.0,
        "open_loop_acc_mean_cm": open_report.acc_mean * 100.0,
        "open_loop_comp_mean_cm": open_report.comp_mean * 100.0,
        "frame_count": len(sequence.frames),
        "submap_count": len(fe.submaps),
        "keyframe_count": sum(len(s.keyframe_ids) for s in fe.submaps),
        "loop_count": len(loops),
        "reset_count": fe.reset_count,
        "predictor": cfg.predictor,
        "seed": cfg.seed,
    }
    return RunResult(cfg, sequence, fe, graph, solutions, loops,
                     est_traj, est_cloud, report, open_report, metrics)


def write_run_artifacts(out_dir, result: RunResult) -> None:
    """Dump the standard artifact set for one run into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "est_traj.tum", result.est_traj)
    write_ply_cloud(out / "map.ply", result.est_cloud)
    write_g2o(out / "posegraph.g2o", result.graph)
    write_decision_log(out / "decisions.jsonl", result.frontend.log)

    subs = []
    for s in result.frontend.submaps:
        node = result.graph.nodes[s.id]
        subs.append({
            "id": s.id,
            "anchor_frame": s.anchor_id,
            "frame_ids": list(s.frame_ids),
            "keyframe_ids": list(s.keyframe_ids),
            "pose_tum": _pose_row(node),
        })
    payload = {
        "submaps": subs,
        "loops": [{"query": c.query_id, "match": c.match_id,
                   "score": c.score,
                   "submaps": [c.old_submap, c.new_submap]}
                  for c in result.loops],
    }
    with open(out / "submaps.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")

    with open(out / "metrics.json", "w") as fh:
        json.dump(result.metrics, fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_report(out / "eval_report.json", result.report)


def _pose_row(pose: SE3Pose) -> list:
    q = pose.rotation
    t = pose.translation
    return [float(v) for v in (t[0], t[1], t[2], q.x, q.y, q.z, q.w)]

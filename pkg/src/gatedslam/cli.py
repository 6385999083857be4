"""Command-line interface: generate sequences, run the pipeline, evaluate.

Exit codes: 0 success, 2 bad input (missing/malformed files, bad config),
3 pipeline failure (an error.json report is left in the output directory).
"""

import argparse
import dataclasses
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from .evaluation import ate_rmse, match_trajectories
from .local_align import weighted_umeyama
from .pipeline import RunConfig, run_pipeline, write_run_artifacts
from .posegraph import G2oParseError, read_g2o, write_g2o
from .synth import SceneSpec, generate, save_sequence
from .trajectory import TrajectoryParseError, read_tum

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PIPELINE = 3


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_INPUT


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValueError(f"cannot read {path}: {exc.strerror or exc}")
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})")


def _dump_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def cmd_generate(args) -> int:
    try:
        spec = SceneSpec.from_dict(_read_json(args.config))
        if args.seed is not None:
            spec = dataclasses.replace(spec, seed=args.seed)
        seq = generate(spec)
    except (ValueError, KeyError, TypeError) as exc:
        return _fail(str(exc))
    save_sequence(args.out, seq)
    print(f"wrote {len(seq.frames)} frames to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        blob = _read_json(args.config)
        if not isinstance(blob, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
        if args.seed is not None:
            blob["seed"] = args.seed
        if args.predictor is not None:
            blob["predictor"] = args.predictor
        if args.threads is not None:
            blob["threads"] = args.threads
        cfg = RunConfig.from_dict(blob)
    except (ValueError, KeyError, TypeError) as exc:
        return _fail(str(exc))
    out = Path(args.out)
    try:
        result = run_pipeline(cfg)
    except Exception as exc:
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "error.json", {
            "error": str(exc),
            "type": type(exc).__name__,
            "trace": traceback.format_exc().splitlines(),
        })
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    write_run_artifacts(out, result)
    m = result.metrics
    print(f"ate_rmse {m['ate_rmse_m']:.6g} m  "
          f"open_loop {m['open_loop_ate_m']:.6g} m  "
          f"submaps {m['submap_count']}  loops {m['loop_count']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        est = read_tum(args.est)
        gt = read_tum(args.gt)
    except TrajectoryParseError as exc:
        return _fail(f"{exc}")
    except OSError as exc:
        return _fail(str(exc))
    try:
        est_pos, gt_pos = match_trajectories(est, gt)
        ate = ate_rmse(est, gt, align=True)
        unaligned = ate_rmse(est, gt, align=False)
        sim = weighted_umeyama(est_pos, gt_pos, with_scale=True)
    except ValueError as exc:
        return _fail(str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "metrics.json", {
        "ate_rmse_m": ate,
        "ate_rmse_unaligned_m": unaligned,
        "matched_poses": len(est_pos),
    })
    residuals = np.linalg.norm(sim.apply(est_pos) - gt_pos, axis=1)
    write_trajectory_svg(out / "trajectories.svg",
                         sim.apply(est_pos), gt_pos, residuals)
    print(f"ate_rmse {ate:.6g} m over {len(est_pos)} matched poses")
    return EXIT_OK


def cmd_export_g2o(args) -> int:
    src = Path(args.source)
    if src.is_dir():
        src = src / "posegraph.g2o"
    try:
        graph = read_g2o(src)
    except OSError as exc:
        return _fail(str(exc))
    except G2oParseError as exc:
        return _fail(f"{src}: {exc}")
    write_g2o(args.out, graph)
    print(f"wrote {args.out} ({len(graph.nodes)} nodes, {len(graph.edges)} edges)")
    return EXIT_OK


def _heat(frac: float) -> str:
    """Green-to-red ramp for residual coloring."""
    r = int(round(220 * frac + 30))
    g = int(round(190 * (1.0 - frac) + 30))
    return f"#{r:02x}{g:02x}30"


def write_trajectory_svg(path, est_xy, gt_xy, residuals) -> None:
    """Static top-down (XY) plot: ground truth gray, estimate colored by
    per-pose residual.  No plotting library; plain SVG text."""
    est_xy = np.asarray(est_xy, dtype=float)[:, :2]
    gt_xy = np.asarray(gt_xy, dtype=float)[:, :2]
    size, margin = 640.0, 45.0
    both = np.vstack([est_xy, gt_xy])
    lo = both.min(axis=0)
    span = max(float((both.max(axis=0) - lo).max()), 1e-9)
    scale = (size - 2 * margin) / span

    def px(p):
        return (margin + (p[0] - lo[0]) * scale,
                size - margin - (p[1] - lo[1]) * scale)

    rmax = max(float(residuals.max()), 1e-12)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" '
             f'height="{size:.0f}" viewBox="0 0 {size:.0f} {size:.0f}">',
             f'<rect width="{size:.0f}" height="{size:.0f}" fill="white"/>']
    gt_pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (px(p) for p in gt_xy))
    parts.append(f'<polyline points="{gt_pts}" fill="none" stroke="#999999" '
                 f'stroke-width="2.5"/>')
    for i in range(len(est_xy) - 1):
        x1, y1 = px(est_xy[i])
        x2, y2 = px(est_xy[i + 1])
        color = _heat(float(residuals[i]) / rmax)
        parts.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" '
                     f'y2="{y2:.2f}" stroke="{color}" stroke-width="1.6"/>')
    parts.append(f'<text x="{margin:.0f}" y="24" font-size="13" '
                 f'font-family="monospace">estimate (colored by residual, '
                 f'max {rmax:.4g} m) vs ground truth (gray)</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gatedslam",
        description="Desk-scale dense SLAM on synthetic scenes: generate "
                    "sequences, run the full pipeline, evaluate trajectories.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic sequence")
    g.add_argument("--config", required=True, help="scene spec JSON")
    g.add_argument("--out", required=True, help="output sequence directory")
    g.add_argument("--seed", type=int, help="override the scene seed")
    g.set_defaults(fn=cmd_generate)

    r = sub.add_parser("run", help="run the full pipeline on a scene")
    r.add_argument("--config", required=True, help="run config JSON")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, help="override the run seed")
    r.add_argument("--threads", type=int, help="worker cap (currently serial)")
    r.add_argument("--predictor", choices=("toy", "oracle"),
                   help="override the predictor choice")
    r.set_defaults(fn=cmd_run)

    e = sub.add_parser("eval", help="score an estimated trajectory")
    e.add_argument("est", help="estimated trajectory (TUM)")
    e.add_argument("gt", help="ground-truth trajectory (TUM)")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("export-g2o", help="re-emit a pose graph in g2o text")
    x.add_argument("source", help="run directory or .g2o file")
    x.add_argument("--out", required=True, help="destination .g2o path")
    x.set_defaults(fn=cmd_export_g2o)

    args = parser.parse_args(argv)
    return args.fn(args)


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    sys.exit(main())

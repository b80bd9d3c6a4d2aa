"""Command-line entry point: dataset rendering, calibration, runs, campaigns, reports.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 internal
invariant violation. Every command is deterministic for identical inputs and
seed, so reruns produce byte-identical outputs. Set OODSIM_LOG=DEBUG for
verbose logging.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    AnalysisError,
    check_sweep_monotonicity,
    stopping_stats,
    threshold_sweep,
    timing_report,
    timing_summary_dict,
    write_score_distance_svg,
    write_sweep_boxes_svg,
    write_sweep_csv,
    write_sweep_summary,
)
from .bus import BusError, StageOrderError, TraceLog
from .config import ConfigError, ScenarioConfig, load_config, save_config
from .detector import (
    Calibration,
    DetectorError,
    calibrate_threshold,
    kl_per_dim,
    select_detectors,
    write_scores_csv,
)
from .nn import NonFiniteError, ShapeError, WeightFormatError, load_weights
from .ppm import PpmError, write_image
from .render import OBSTACLE_TYPES
from .sim import (
    OracleScorer,
    SimError,
    build_scorer,
    load_dataset_frames,
    oracle_threshold,
    read_run_dir,
    render_dataset,
    run_scenario,
    write_run_dir,
)
from .vision import preprocess_color

log = logging.getLogger("oodsim")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

DATA_ERRORS = (
    ConfigError,
    DetectorError,
    WeightFormatError,
    ShapeError,
    NonFiniteError,
    PpmError,
    BusError,
    StageOrderError,
    SimError,
    AnalysisError,
    FileNotFoundError,
    NotADirectoryError,
)


class UsageError(Exception):
    pass


class InvariantViolation(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_or_default_config(args) -> ScenarioConfig:
    config = load_config(args.config) if args.config else ScenarioConfig()
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    if getattr(args, "scorer", None):
        config = replace(config, detector=replace(config.detector, scorer=args.scorer))
    if getattr(args, "weights", None):
        config = replace(
            config, detector=replace(config.detector, weights_path=args.weights)
        )
    return config


def _resolve_threshold(config: ScenarioConfig) -> ScenarioConfig:
    from .sim import resolve_config

    return resolve_config(config)


def _parse_thresholds(raw: str) -> list[float]:
    vals = [float(x) for x in raw.split(",") if x.strip()]
    if not vals:
        raise UsageError("no thresholds given")
    return vals


# --- commands -------------------------------------------------------------

def cmd_render_dataset(args) -> int:
    config = _load_or_default_config(args)
    out = render_dataset(args.out, args.clear, args.obstacle, config.seed, config)
    print(f"rendered {args.clear} clear + {args.obstacle} obstacle frames -> {out}")
    return EXIT_OK


def _kl_rows_for_frames(config: ScenarioConfig, frames) -> np.ndarray:
    det = config.detector
    if det.scorer == "oracle":
        scorer = build_scorer(
            replace(config, detector=replace(det, threshold=det.threshold or 0.0))
        )
        return np.array([[scorer.score_at(f.x)] for f in frames], dtype=np.float64)
    if det.weights_path is None:
        raise ConfigError("vae calibration requires --weights")
    model = load_weights(det.weights_path)
    rows = []
    for f in frames:
        view = preprocess_color(f.image)
        x = (view.astype(np.float32) / 255.0).transpose(2, 0, 1)
        from .nn import encode

        rows.append(kl_per_dim(encode(model, x)))
    return np.array(rows, dtype=np.float64)


def cmd_calibrate(args) -> int:
    config = _load_or_default_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.frames:
        frames = load_dataset_frames(args.frames, only_clear=True)
    else:
        from .render import render_frame
        from .sim import Frame

        scene = replace(config.scene(), obstacle=None, obstacle_distance_m=None)
        seed = config.seed
        frames = [
            Frame(i, i, 0.0, lambda i=i: render_frame(scene, 0.0, seed, i))
            for i in range(args.count)
        ]
    if not frames:
        raise DetectorError("empty calibration set")
    if len(frames) == 1:
        log.warning("calibration set has a single frame; threshold equals its score")

    kl_matrix = _kl_rows_for_frames(config, frames)
    k = min(config.detector.k, kl_matrix.shape[1])
    calibration = Calibration.from_kl(kl_matrix, k)
    threshold = calibrate_threshold(calibration.scores, config.detector.quantile)

    with open(out / "kl.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seq"] + [f"dim_{i}" for i in range(kl_matrix.shape[1])])
        for frame, row in zip(frames, kl_matrix):
            w.writerow([frame.seq] + [repr(float(v)) for v in row])
    write_scores_csv(out / "scores.csv", calibration.scores, [f.seq for f in frames])
    calibrated = replace(
        config,
        detector=replace(
            config.detector,
            threshold=threshold,
            subset=calibration.subset,
            latent_dim=kl_matrix.shape[1],
        ),
    )
    save_config(calibrated, out / "detector.ini")

    from .detector import nearest_rank

    ordered = sorted(calibration.scores)
    n = len(ordered)
    print(f"calibrated on {n} frames; subset={list(calibration.subset)}")
    for q in (0.50, 0.80, 0.90, 0.95, 0.99):
        print(f"  p{int(q * 100):02d} = {ordered[nearest_rank(n, q) - 1]:.6f}")
    print(f"threshold (q={config.detector.quantile}) = {threshold!r}")
    above = sum(1 for s in calibration.scores if s > threshold)
    print(f"{above} of {n} calibration frames score above threshold")
    return EXIT_OK


def cmd_select_detectors(args) -> int:
    with open(args.kl, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "seq":
            raise DetectorError(f"bad kl matrix header in {args.kl}")
        rows = [[float(v) for v in row[1:]] for row in reader]
    if not rows:
        raise DetectorError("empty kl matrix")
    subset = select_detectors(np.array(rows), args.k)
    print(",".join(str(i) for i in subset))
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = _resolve_threshold(_load_or_default_config(args))
    run = run_scenario(config)
    write_run_dir(run, args.out)
    dist = "n/a" if run.stopping_distance_m is None else f"{run.stopping_distance_m:.3f} m"
    print(
        f"outcome={run.outcome} stopping_distance={dist} "
        f"frames_scored={run.frames_scored} -> {args.out}"
    )
    return EXIT_OK


def cmd_campaign(args) -> int:
    config = _load_or_default_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    obstacle_names = (
        args.obstacles.split(",") if args.obstacles else [o.name for o in OBSTACLE_TYPES]
    )
    runs = []
    summaries = []
    for i in range(args.runs):
        run_config = replace(
            config,
            seed=config.seed + i,
            obstacle_type=obstacle_names[i % len(obstacle_names)],
        )
        run_config = _resolve_threshold(run_config)
        run = run_scenario(run_config)
        run_dir = out / f"run_{i:04d}"
        write_run_dir(run, run_dir)
        from .sim import summary_dict

        record = {"run": i, **summary_dict(run)}
        summaries.append(record)
        runs.append(run)
        log.info(
            "run %d: %s distance=%s scored=%d", i, run.outcome,
            run.stopping_distance_m, run.frames_scored,
        )
    with open(out / "summary.jsonl", "w") as f:
        for record in summaries:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    stats = stopping_stats(runs)
    with open(out / "stats.json", "w") as f:
        json.dump(
            {
                "median_m": stats.median_m,
                "ci95_low_m": stats.ci95_low_m,
                "ci95_high_m": stats.ci95_high_m,
                "success_rate": stats.success_rate,
                "n_runs": stats.n_runs,
            },
            f, indent=2, sort_keys=True,
        )
        f.write("\n")
    if args.emit_svg:
        threshold = runs[0].config.detector.threshold
        if any(r.config.detector.threshold != threshold for r in runs):
            threshold = None
        write_score_distance_svg(runs, out / "score_vs_distance.svg", threshold)
    print(
        f"{args.runs} runs: success_rate={stats.success_rate:.3f} "
        f"median={stats.median_m:.3f} m CI95=[{stats.ci95_low_m:.3f}, {stats.ci95_high_m:.3f}]"
    )
    return EXIT_OK


def _load_runs(logs_dir) -> list:
    logs_dir = Path(logs_dir)
    run_dirs = sorted(d for d in logs_dir.glob("run_*") if d.is_dir())
    if not run_dirs:
        if (logs_dir / "events.csv").exists():
            run_dirs = [logs_dir]
        else:
            raise AnalysisError(f"no run directories under {logs_dir}")
    return [read_run_dir(d) for d in run_dirs]


def cmd_sweep(args) -> int:
    runs = _load_runs(args.logs)
    if args.thresholds:
        thresholds = _parse_thresholds(args.thresholds)
    else:
        scores = [rec.score for run in runs for rec in run.scores]
        lo, hi = min(scores), max(scores)
        thresholds = [lo + (hi - lo) * i / 7 for i in range(8)]
    result = threshold_sweep(runs, thresholds)
    try:
        check_sweep_monotonicity(result)
    except AnalysisError as e:
        raise InvariantViolation(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(result, out / "sweep.csv")
    write_sweep_summary(result, out / "sweep_summary.json")
    if args.emit_svg:
        write_sweep_boxes_svg(result, out / "sweep_boxes.svg", runs[0].config.risk_zone_m)
    print(
        f"swept {len(thresholds)} thresholds x {len(runs)} runs; "
        f"collisions per threshold: {list(result.collisions)}"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    runs = _load_runs(args.logs)
    timing = timing_report(runs)
    report = {"timing": timing_summary_dict(timing)}
    with_distance = [r for r in runs if r.stopping_distance_m is not None]
    if with_distance:
        stats = stopping_stats(with_distance)
        report["stopping"] = {
            "median_m": stats.median_m,
            "ci95_low_m": stats.ci95_low_m,
            "ci95_high_m": stats.ci95_high_m,
            "success_rate": stats.success_rate,
            "n_runs": stats.n_runs,
        }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    if args.emit_svg and with_distance:
        threshold = with_distance[0].config.detector.threshold
        write_score_distance_svg(with_distance, out / "score_vs_distance.svg", threshold)
    print(f"busiest stage: {timing.busiest_stage}")
    return EXIT_OK


def cmd_replay(args) -> int:
    trace = TraceLog.read_csv(Path(args.run) / "events.csv")
    complete = trace.seqs_with("capture", "motor_zeroed")
    print(f"{len(trace.records)} events, {len(trace._by_seq)} frames")
    for seq in complete:
        hops = []
        from .analysis import HOP_PAIRS

        for name, start, end in HOP_PAIRS:
            lat = trace.hop_latency_ns(seq, start, end)
            if lat is not None:
                hops.append(f"{name}={lat / 1e6:.1f}ms")
        total = trace.hop_latency_ns(seq, "capture", "motor_zeroed")
        print(f"  seq {seq}: {' '.join(hops)} end_to_end={total / 1e6:.1f}ms")
    return EXIT_OK


def cmd_debug_frame(args) -> int:
    """Render one frame and dump vision intermediates (mask, edges) as images."""
    config = _load_or_default_config(args)
    from .render import render_frame
    from .vision import LaneFollower

    frame = render_frame(config.scene(), args.x, config.seed, args.seq)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_image(out / "frame.ppm", frame)
    follower = LaneFollower(config.vision)
    estimate = follower.process(frame, keep_debug=True)
    dbg = follower.last_debug
    write_image(out / "gray.pgm", dbg.gray)
    write_image(out / "mask.pgm", dbg.mask)
    write_image(out / "edges.pgm", dbg.edges)
    print(f"angle={estimate.angle_deg:.2f} deg confidence={dbg.raw.confidence}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="oodsim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"oodsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--config", help="scenario config INI")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", default=out_default, required=out_default is None)

    p = sub.add_parser("render-dataset", help="write PPM frames + index.csv")
    common(p)
    p.add_argument("--clear", type=int, default=200, help="clear-lane frame count")
    p.add_argument("--obstacle", type=int, default=0, help="obstacle frame count")
    p.set_defaults(func=cmd_render_dataset)

    p = sub.add_parser("calibrate", help="score in-distribution frames, pick threshold")
    common(p)
    p.add_argument("--frames", help="rendered dataset dir (uses clear frames)")
    p.add_argument("--count", type=int, default=100, help="frames to render if no --frames")
    p.add_argument("--scorer", choices=["oracle", "vae"])
    p.add_argument("--weights", help="weight file for the vae scorer")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("select-detectors", help="top-k latent dims from a KL matrix CSV")
    p.add_argument("--kl", required=True)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_select_detectors)

    p = sub.add_parser("simulate", help="run one scenario")
    common(p)
    p.add_argument("--scorer", choices=["oracle", "vae"])
    p.add_argument("--weights")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("campaign", help="run a batch of seeded scenarios")
    common(p)
    p.add_argument("--runs", type=int, default=40)
    p.add_argument("--obstacles", help="comma list of obstacle types to cycle")
    p.add_argument("--scorer", choices=["oracle", "vae"])
    p.add_argument("--weights")
    p.add_argument("--emit-svg", action="store_true")
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("sweep", help="threshold sweep over recorded runs")
    p.add_argument("--logs", required=True)
    p.add_argument("--thresholds", help="comma list; default spans the score range")
    p.add_argument("--out", required=True)
    p.add_argument("--emit-svg", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="timing + stopping summary from run logs")
    p.add_argument("--logs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-svg", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="re-read one run's event log and print hops")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("debug-frame", help="render a frame and dump vision intermediates")
    common(p)
    p.add_argument("--x", type=float, default=0.0, help="vehicle position")
    p.add_argument("--seq", type=int, default=0)
    p.set_defaults(func=cmd_debug_frame)

    return parser


def main(argv=None) -> int:
    level = os.environ.get("OODSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantViolation, AssertionError) as e:
        print(f"internal invariant violated: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

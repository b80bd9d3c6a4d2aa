"""Post-hoc analytics over run logs: stopping stats, timing, threshold sweeps.

The sweep replays each run's own recorded per-frame latencies against candidate
thresholds: the earliest scored frame above a threshold is the trigger, and the
projected stop position is its capture position plus the velocity estimate
times that frame's recorded capture-to-motor-stop latency (plus coast). The
position clamps at the obstacle, so a run that never triggers projects a
collision at distance zero.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .bus import STAGES
from .detector import nearest_rank
from .sim import RunLog


class AnalysisError(Exception):
    pass


def velocity_estimate(run: RunLog) -> float:
    """Pre-stop distance over the time from first motion to the e-stop command."""
    if run.t_first_motion_ns is None:
        raise AnalysisError("run never moved")
    if run.t_estop_ns is not None:
        elapsed_ns = run.t_estop_ns - run.t_first_motion_ns
        travelled = run.x_at_estop_m
    else:
        elapsed_ns = run.t_end_ns - run.t_first_motion_ns
        travelled = run.x_final_m
    if elapsed_ns <= 0:
        raise AnalysisError("zero elapsed time between first motion and stop")
    if travelled is None or travelled <= 0:
        raise AnalysisError("run recorded no pre-stop travel")
    return travelled / (elapsed_ns / 1e9)


@dataclass(frozen=True)
class StoppingStats:
    median_m: float
    ci95_low_m: float
    ci95_high_m: float
    success_rate: float
    n_runs: int


def median_ci_indices(n: int, alpha: float = 0.05) -> tuple[int, int]:
    """Distribution-free CI for the median via binomial order statistics.

    Picks the largest l with P(Bin(n, 1/2) <= l-1) <= alpha/2 and u = n - l + 1,
    so [x_(l), x_(u)] covers the median with probability >= 1 - alpha. Exact
    rational arithmetic; degenerates to the full range when n is too small for
    the requested coverage (and to [x, x] for a singleton).
    """
    if n < 1:
        raise AnalysisError("need at least one sample")
    half = Fraction(alpha) / 2
    denom = 2**n
    cum = 0
    l = 0
    for i in range(n):
        cum += math.comb(n, i)  # cum/2^n = P(K <= i)
        if Fraction(cum, denom) <= half:
            l = i + 1
        else:
            break
    l = max(1, l)
    u = max(l, n - l + 1)
    return l, u


def stopping_stats(runs: list[RunLog]) -> StoppingStats:
    if not runs:
        raise AnalysisError("no runs")
    distances = []
    for run in runs:
        if run.stopping_distance_m is None:
            raise AnalysisError("run without an obstacle has no stopping distance")
        distances.append(run.stopping_distance_m)
    ordered = sorted(distances)
    n = len(ordered)
    l, u = median_ci_indices(n)
    success = sum(1 for r in runs if not r.collision) / n
    return StoppingStats(
        median_m=float(np.median(ordered)),
        ci95_low_m=ordered[l - 1],
        ci95_high_m=ordered[u - 1],
        success_rate=success,
        n_runs=n,
    )


@dataclass(frozen=True)
class StageTiming:
    name: str
    samples_s: tuple[float, ...]
    min_s: float
    median_s: float
    p95_s: float
    max_s: float


@dataclass(frozen=True)
class TimingSummary:
    stages: dict[str, StageTiming]
    busiest_stage: str  # hop with the largest median latency


HOP_PAIRS = (
    ("capture_to_ingest", "capture", "ingest"),
    ("ingest_to_detect", "ingest", "detect_done"),
    ("detect_to_estop", "detect_done", "estop_sent"),
    ("estop_to_motor", "estop_sent", "motor_zeroed"),
)


def _nearest_rank(ordered: list[float], q: float) -> float:
    return ordered[nearest_rank(len(ordered), q) - 1]


def timing_report(runs: list[RunLog]) -> TimingSummary:
    """Per-hop latency distributions plus end-to-end, all from recorded stages."""
    samples: dict[str, list[float]] = {name: [] for name, _, _ in HOP_PAIRS}
    samples["end_to_end"] = []
    seen_stages = set()
    for run in runs:
        for rec in run.trace.records:
            seen_stages.add(rec.stage)
        for name, start, end in HOP_PAIRS:
            for seq in run.trace.seqs_with(start, end):
                samples[name].append(run.trace.hop_latency_ns(seq, start, end) / 1e9)
        for seq in run.trace.seqs_with("capture", "motor_zeroed"):
            samples["end_to_end"].append(
                run.trace.hop_latency_ns(seq, "capture", "motor_zeroed") / 1e9
            )
    missing = [s for s in STAGES if s not in seen_stages]
    if missing:
        raise AnalysisError(f"logs are missing stage events: {missing}")

    stages = {}
    for name, vals in samples.items():
        if not vals:
            raise AnalysisError(f"no samples for stage pair {name}")
        ordered = sorted(vals)
        stages[name] = StageTiming(
            name=name,
            samples_s=tuple(vals),
            min_s=ordered[0],
            median_s=_nearest_rank(ordered, 0.5),
            p95_s=_nearest_rank(ordered, 0.95),
            max_s=ordered[-1],
        )
    busiest = max((stages[n] for n, _, _ in HOP_PAIRS), key=lambda st: st.median_s)
    return TimingSummary(stages=stages, busiest_stage=busiest.name)


@dataclass(frozen=True)
class SweepResult:
    thresholds: tuple[float, ...]
    # distances[i][j]: projected stopping distance of run j at thresholds[i]
    distances_m: tuple[tuple[float, ...], ...]
    collisions: tuple[int, ...]  # projected distance <= 0
    stops_outside_zone: tuple[int, ...]  # projected distance > risk zone
    triggers_outside_zone: tuple[int, ...]  # trigger frame captured outside the zone


def project_run(run: RunLog, threshold: float) -> tuple[float, bool]:
    """Projected (stopping distance, trigger-captured-outside-zone) for one run."""
    cfg = run.config
    d_obs = cfg.obstacle_distance_m
    v_est = run.velocity_estimate_mps
    if v_est is None:
        v_est = velocity_estimate(run)
    trigger = None
    for rec in sorted(run.scores, key=lambda r: r.capture_ns):
        if rec.score > threshold:
            trigger = rec
            break
    if trigger is None:
        return 0.0, False  # never flags: drives into the obstacle
    pos = trigger.capture_x_m + v_est * (trigger.stop_latency_ns / 1e9) + cfg.coast_m
    pos = min(pos, d_obs)
    distance = d_obs - pos
    outside = (d_obs - trigger.capture_x_m) > cfg.risk_zone_m
    return distance, outside


def threshold_sweep(runs: list[RunLog], thresholds) -> SweepResult:
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise AnalysisError("empty threshold list")
    if not runs:
        raise AnalysisError("no runs")
    for run in runs:
        if not run.scores:
            raise AnalysisError("run has no recorded scores")
    distances, collisions, stops_out, trig_out = [], [], [], []
    for tau in thresholds:
        row = []
        n_col = n_out = n_trig_out = 0
        for run in runs:
            d, outside = project_run(run, tau)
            row.append(d)
            if d <= 0:
                n_col += 1
            if d > run.config.risk_zone_m:
                n_out += 1
            if outside:
                n_trig_out += 1
        distances.append(tuple(row))
        collisions.append(n_col)
        stops_out.append(n_out)
        trig_out.append(n_trig_out)
    return SweepResult(
        thresholds=tuple(thresholds),
        distances_m=tuple(distances),
        collisions=tuple(collisions),
        stops_outside_zone=tuple(stops_out),
        triggers_outside_zone=tuple(trig_out),
    )


def check_sweep_monotonicity(result: SweepResult) -> None:
    """Raise if a lower threshold ever stops later (internal invariant)."""
    order = np.argsort(result.thresholds, kind="stable")
    n_runs = len(result.distances_m[0])
    for j in range(n_runs):
        prev = math.inf
        for i in order:
            d = result.distances_m[i][j]
            if d > prev + 1e-12:
                raise AnalysisError(
                    f"sweep monotonicity violated for run {j}: "
                    f"distance {d} after {prev} at threshold {result.thresholds[i]}"
                )
            prev = d
    prev_out = math.inf
    for i in order:
        if result.triggers_outside_zone[i] > prev_out:
            raise AnalysisError("out-of-zone trigger count increased with threshold")
        prev_out = result.triggers_outside_zone[i]


# --- report emission -----------------------------------------------------------

def write_sweep_csv(result: SweepResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "run", "projected_stopping_distance_m"])
        for i, tau in enumerate(result.thresholds):
            for j, d in enumerate(result.distances_m[i]):
                w.writerow([repr(tau), j, repr(d)])


def sweep_summary_dict(result: SweepResult) -> dict:
    return {
        "thresholds": list(result.thresholds),
        "projected_collisions": list(result.collisions),
        "stops_outside_risk_zone": list(result.stops_outside_zone),
        "triggers_outside_risk_zone": list(result.triggers_outside_zone),
        "median_distance_m": [
            float(np.median(row)) for row in result.distances_m
        ],
    }


def write_sweep_summary(result: SweepResult, path) -> None:
    with open(path, "w") as f:
        json.dump(sweep_summary_dict(result), f, indent=2, sort_keys=True)
        f.write("\n")


def timing_summary_dict(summary: TimingSummary) -> dict:
    return {
        "busiest_stage": summary.busiest_stage,
        "stages": {
            name: {
                "n": len(st.samples_s),
                "min_s": st.min_s,
                "median_s": st.median_s,
                "p95_s": st.p95_s,
                "max_s": st.max_s,
            }
            for name, st in sorted(summary.stages.items())
        },
    }


# --- minimal SVG emission (deterministic, no plotting dependency) ---------------

def _svg_header(w: int, h: int) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
    ]


def write_score_distance_svg(runs: list[RunLog], path, threshold: float | None = None) -> None:
    """Per-run score-vs-capture-position polylines; red marks collision runs."""
    width, height = 640, 400
    pad = 40
    xs_max = max(run.config.obstacle_distance_m for run in runs)
    s_max = max(max(r.score for r in run.scores) for run in runs if run.scores)
    s_max = max(s_max, threshold or 0) * 1.05

    def sx(x):
        return pad + (width - 2 * pad) * x / xs_max

    def sy(s):
        return height - pad - (height - 2 * pad) * s / s_max

    parts = _svg_header(width, height)
    cfg = runs[0].config
    risk_x = sx(cfg.obstacle_distance_m - cfg.risk_zone_m)
    parts.append(
        f'<line x1="{sx(xs_max):.2f}" y1="{pad}" x2="{sx(xs_max):.2f}" '
        f'y2="{height - pad}" stroke="black" stroke-width="2"/>'
    )
    parts.append(
        f'<line x1="{risk_x:.2f}" y1="{pad}" x2="{risk_x:.2f}" '
        f'y2="{height - pad}" stroke="magenta" stroke-width="1"/>'
    )
    if threshold is not None:
        parts.append(
            f'<line x1="{pad}" y1="{sy(threshold):.2f}" x2="{width - pad}" '
            f'y2="{sy(threshold):.2f}" stroke="green" stroke-width="1"/>'
        )
    for run in runs:
        pts = " ".join(
            f"{sx(r.capture_x_m):.2f},{sy(r.score):.2f}"
            for r in sorted(run.scores, key=lambda r: r.capture_ns)
        )
        color = "red" if run.collision else "blue"
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1"/>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def write_sweep_boxes_svg(result: SweepResult, path, risk_zone_m: float | None = None) -> None:
    """Quartile boxes of projected stopping distance per threshold."""
    width, height = 640, 400
    pad = 40
    n = len(result.thresholds)
    d_max = max(max(row) for row in result.distances_m) * 1.1 or 1.0
    slot = (width - 2 * pad) / max(n, 1)

    def sy(d):
        return height - pad - (height - 2 * pad) * d / d_max

    parts = _svg_header(width, height)
    if risk_zone_m is not None and risk_zone_m <= d_max:
        parts.append(
            f'<line x1="{pad}" y1="{sy(risk_zone_m):.2f}" x2="{width - pad}" '
            f'y2="{sy(risk_zone_m):.2f}" stroke="magenta" stroke-width="1"/>'
        )
    for i, tau in enumerate(result.thresholds):
        vals = np.array(result.distances_m[i])
        q1, q2, q3 = (float(np.percentile(vals, q)) for q in (25, 50, 75))
        lo, hi = float(vals.min()), float(vals.max())
        cx = pad + slot * (i + 0.5)
        bw = slot * 0.3
        parts.append(
            f'<line x1="{cx:.2f}" y1="{sy(lo):.2f}" x2="{cx:.2f}" y2="{sy(hi):.2f}" '
            f'stroke="black" stroke-width="1"/>'
        )
        parts.append(
            f'<rect x="{cx - bw:.2f}" y="{sy(q3):.2f}" width="{2 * bw:.2f}" '
            f'height="{sy(q1) - sy(q3):.2f}" fill="lightsteelblue" stroke="black"/>'
        )
        parts.append(
            f'<line x1="{cx - bw:.2f}" y1="{sy(q2):.2f}" x2="{cx + bw:.2f}" '
            f'y2="{sy(q2):.2f}" stroke="black" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{cx:.2f}" y="{height - pad + 14}" font-size="10" '
            f'text-anchor="middle">{tau:.3g}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")

"""Analytics tests: velocity estimation, order-statistic stopping CIs, timing
summaries, and the threshold-sweep projection."""

import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from oodsim.analysis import (
    AnalysisError,
    check_sweep_monotonicity,
    median_ci_indices,
    project_run,
    stopping_stats,
    threshold_sweep,
    timing_report,
    velocity_estimate,
    write_score_distance_svg,
    write_sweep_boxes_svg,
    write_sweep_csv,
    write_sweep_summary,
)
from oodsim.bus import TraceLog
from oodsim.config import ExecTimeModel, ScenarioConfig
from oodsim.sim import RunLog, ScoreRecord, run_scenario


def make_run(
    distances=None,
    collision=False,
    stopping=0.2,
    scores=(),
    trace=None,
    t_first_motion=200_000_000,
    t_estop=2_000_000_000,
    x_at_estop=0.36,
    x_final=0.36,
    t_end=2_100_000_000,
    v_est=None,
    config=None,
):
    return RunLog(
        config=config or ScenarioConfig(),
        trace=trace or TraceLog(),
        scores=list(scores),
        stopping_distance_m=stopping,
        collision=collision,
        velocity_estimate_mps=v_est,
        frames_scored=len(scores),
        t_first_motion_ns=t_first_motion,
        t_estop_ns=t_estop,
        x_at_estop_m=x_at_estop,
        x_final_m=x_final,
        t_end_ns=t_end,
        outcome="collision" if collision else "stopped",
    )


# --- velocity estimate -----------------------------------------------------------

def test_velocity_estimate_simple():
    run = make_run(t_first_motion=0, t_estop=2_500_000_000, x_at_estop=0.5)
    assert velocity_estimate(run) == pytest.approx(0.2)


def test_velocity_estimate_no_motion_errors():
    run = make_run(t_first_motion=None)
    with pytest.raises(AnalysisError):
        velocity_estimate(run)


def test_velocity_estimate_piecewise_integral_oracle():
    rng = np.random.default_rng(51)
    speeds = rng.uniform(0.05, 0.4, size=10)
    dts = rng.uniform(0.1, 0.8, size=10)
    travelled = float(sum(v * dt for v, dt in zip(speeds, dts)))
    span = float(dts.sum())
    run = make_run(
        t_first_motion=0,
        t_estop=round(span * 1e9),
        x_at_estop=travelled,
    )
    assert velocity_estimate(run) == pytest.approx(travelled / span, abs=1e-9)


def test_velocity_estimate_uses_end_time_without_estop():
    run = make_run(t_first_motion=0, t_estop=None, x_at_estop=None,
                   x_final=0.7, t_end=3_500_000_000, collision=True, stopping=0.0)
    assert velocity_estimate(run) == pytest.approx(0.2)


# --- stopping stats ------------------------------------------------------------------

def test_stopping_stats_median_of_three():
    runs = [make_run(stopping=d) for d in (0.10, 0.145, 0.20)]
    stats = stopping_stats(runs)
    assert stats.median_m == pytest.approx(0.145)


def test_stopping_stats_success_rate_5_of_40():
    runs = [make_run(stopping=0.1) for _ in range(35)]
    runs += [make_run(stopping=0.0, collision=True) for _ in range(5)]
    assert stopping_stats(runs).success_rate == pytest.approx(0.875)


def test_stopping_stats_singleton_degenerate_ci():
    stats = stopping_stats([make_run(stopping=0.145)])
    assert stats.median_m == stats.ci95_low_m == stats.ci95_high_m == 0.145


def test_median_ci_matches_exhaustive_order_statistic_oracle():
    rng = np.random.default_rng(52)
    n = 101
    samples = sorted(rng.normal(0.15, 0.05, size=n).tolist())
    l, u = median_ci_indices(n)

    # oracle: exhaustive scan of the binomial CDF with exact rationals
    def cdf(k):
        return Fraction(sum(math.comb(n, i) for i in range(k + 1)), 2**n)

    best = 0
    for i in range(n):
        if cdf(i) <= Fraction(1, 40):
            best = i + 1
        else:
            break
    assert l == max(1, best)
    assert u == n - l + 1
    runs = [make_run(stopping=s) for s in samples]
    stats = stopping_stats(runs)
    assert stats.ci95_low_m == samples[l - 1]
    assert stats.ci95_high_m == samples[u - 1]


def test_stopping_stats_empty_errors():
    with pytest.raises(AnalysisError):
        stopping_stats([])


# --- timing report --------------------------------------------------------------------

def full_trace(seq, capture, d_ingest, d_detect, d_estop, d_motor):
    t = TraceLog()
    t.record_hop(seq, "camera", "capture", capture)
    t.record_hop(seq, "camera", "ingest", capture + d_ingest)
    t.record_hop(seq, "ood", "detect_done", capture + d_ingest + d_detect)
    t.record_hop(seq, "estop", "estop_sent", capture + d_ingest + d_detect + d_estop)
    t.record_hop(
        seq, "wheels", "motor_zeroed", capture + d_ingest + d_detect + d_estop + d_motor
    )
    return t


def test_timing_report_constant_hops_exact():
    runs = [
        make_run(trace=full_trace(i, i * 10**9, 15_000_000, 300_000_000, 0, 5_000_000))
        for i in range(1, 6)
    ]
    summary = timing_report(runs)
    assert summary.stages["capture_to_ingest"].median_s == pytest.approx(0.015)
    assert summary.stages["ingest_to_detect"].median_s == pytest.approx(0.3)
    assert summary.stages["detect_to_estop"].median_s == 0.0
    assert summary.stages["estop_to_motor"].median_s == pytest.approx(0.005)
    assert summary.stages["end_to_end"].median_s == pytest.approx(0.32)
    assert summary.busiest_stage == "ingest_to_detect"


def test_timing_report_table1_multiset_reproduced():
    cfg = replace(
        ScenarioConfig(), exec_time=ExecTimeModel(kind="empirical", samples_s=(1.328, 1.202))
    )
    run = run_scenario(cfg)
    summary = timing_report([run])
    samples = sorted(summary.stages["ingest_to_detect"].samples_s)
    n = len(samples)
    want = sorted((1.328 if i % 2 == 0 else 1.202) for i in range(n))
    assert samples == want


def test_timing_report_end_to_end_dominates_stages():
    runs = [
        make_run(trace=full_trace(i, 0, 10_000_000, 400_000_000, 1_000_000, 5_000_000))
        for i in range(1, 4)
    ]
    summary = timing_report(runs)
    e2e = summary.stages["end_to_end"].median_s
    for name in ("capture_to_ingest", "ingest_to_detect", "detect_to_estop", "estop_to_motor"):
        assert e2e >= summary.stages[name].median_s


def test_timing_report_missing_stage_errors():
    t = TraceLog()
    t.record_hop(1, "camera", "capture", 0)
    t.record_hop(1, "camera", "ingest", 10)
    with pytest.raises(AnalysisError, match="missing"):
        timing_report([make_run(trace=t)])


def test_timing_summary_invariant_order():
    runs = [
        make_run(trace=full_trace(i, 0, d, 100 * d, 0, d)) for i, d in ((1, 10**7), (2, 3 * 10**7), (3, 2 * 10**7))
    ]
    summary = timing_report(runs)
    for st in summary.stages.values():
        assert st.min_s <= st.median_s <= st.p95_s <= st.max_s


# --- threshold sweep --------------------------------------------------------------------

def sweep_run(scores_and_x, v=0.2, latency_ns=500_000_000, threshold=None):
    cfg = ScenarioConfig()
    if threshold is not None:
        from oodsim.config import DetectorSettings

        cfg = replace(
            cfg, detector=DetectorSettings(scorer="oracle", threshold=threshold, subset=(0,), latent_dim=1)
        )
    records = [
        ScoreRecord(
            seq=i + 1,
            capture_ns=i * 10**9,
            capture_x_m=x,
            score=s,
            flagged=False,
            stop_latency_ns=latency_ns,
        )
        for i, (s, x) in enumerate(scores_and_x)
    ]
    return make_run(scores=records, v_est=v, config=cfg)


def test_sweep_zero_threshold_triggers_first_frame():
    run = sweep_run([(1.0, 0.0), (1.2, 0.2), (2.0, 0.4)])
    d, outside = project_run(run, 0.0)
    # first frame triggers: pos = 0 + 0.2 * 0.5 = 0.1
    assert d == pytest.approx(0.70 - 0.1)
    assert outside  # captured at x=0: obstacle 0.7 m away, beyond the 0.6 zone


def test_sweep_threshold_above_all_projects_collision():
    run = sweep_run([(1.0, 0.0), (1.2, 0.2)])
    d, outside = project_run(run, 99.0)
    assert d == 0.0 and not outside


def test_sweep_projection_clamps_at_obstacle():
    run = sweep_run([(2.0, 0.65)], latency_ns=2_000_000_000)  # 0.65 + 0.4 > 0.7
    d, _ = project_run(run, 1.0)
    assert d == 0.0


def test_sweep_monotone_and_counts():
    runs = [
        sweep_run([(1.0, 0.0), (1.3, 0.25), (1.9, 0.5)]),
        sweep_run([(1.1, 0.05), (1.4, 0.3), (1.7, 0.55)]),
    ]
    taus = [0.0, 1.05, 1.35, 1.8, 5.0]
    result = threshold_sweep(runs, taus)
    check_sweep_monotonicity(result)
    for j in range(2):
        col = [result.distances_m[i][j] for i in range(len(taus))]
        assert all(b <= a + 1e-12 for a, b in zip(col, col[1:]))
    assert result.collisions[-1] == 2  # nothing exceeds tau=5
    assert list(result.triggers_outside_zone) == sorted(
        result.triggers_outside_zone, reverse=True
    )


def test_sweep_self_consistency_against_actual_run():
    cfg = replace(ScenarioConfig(), exec_time=ExecTimeModel(kind="constant", t_s=0.45))
    run = run_scenario(cfg)
    assert run.outcome == "stopped"
    tau = run.config.detector.threshold
    d, _ = project_run(run, tau)
    v_est = run.velocity_estimate_mps
    camera_period = 1.0 / run.config.camera_hz
    assert abs(d - run.stopping_distance_m) <= camera_period * v_est + 1e-9


def test_sweep_errors():
    with pytest.raises(AnalysisError):
        threshold_sweep([], [1.0])
    run = sweep_run([(1.0, 0.0)])
    with pytest.raises(AnalysisError):
        threshold_sweep([run], [])
    with pytest.raises(AnalysisError):
        threshold_sweep([make_run(scores=[])], [1.0])


def test_sweep_monotonicity_checker_catches_violation():
    from oodsim.analysis import SweepResult

    bad = SweepResult(
        thresholds=(0.0, 1.0),
        distances_m=((0.1, 0.2), (0.3, 0.1)),  # run 0 stops farther at higher tau
        collisions=(0, 0),
        stops_outside_zone=(0, 0),
        triggers_outside_zone=(0, 0),
    )
    with pytest.raises(AnalysisError):
        check_sweep_monotonicity(bad)


# --- emission ---------------------------------------------------------------------------

def test_report_files_deterministic(tmp_path):
    runs = [
        sweep_run([(1.0, 0.0), (1.5, 0.3)]),
        sweep_run([(1.1, 0.1), (1.4, 0.35)]),
    ]
    result = threshold_sweep(runs, [0.5, 1.2, 2.0])
    for name, writer in (
        ("sweep.csv", lambda p: write_sweep_csv(result, p)),
        ("sweep.json", lambda p: write_sweep_summary(result, p)),
        ("boxes.svg", lambda p: write_sweep_boxes_svg(result, p, 0.6)),
        ("scores.svg", lambda p: write_score_distance_svg(runs, p, 1.2)),
    ):
        a, b = tmp_path / ("a_" + name), tmp_path / ("b_" + name)
        writer(a)
        writer(b)
        assert a.read_bytes() == b.read_bytes()
    grid = (tmp_path / "a_sweep.csv").read_text().strip().splitlines()
    assert len(grid) == 1 + 3 * 2  # header + thresholds x runs

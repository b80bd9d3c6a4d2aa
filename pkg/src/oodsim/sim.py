"""Closed-loop braking scenario engine under a virtual or wall clock.

Virtual mode is a single-threaded discrete-event loop: the camera publishes at
its frame rate onto a conflating topic, the lane follower steers at its own
rate, the detector takes the newest frame, stays busy for an injected execution
time, and publishes an emergency stop when a score crosses the threshold. The
vehicle is a 1-D constant-velocity plant; braking zeroes velocity instantly
plus a configurable coast distance. Identical config and seed replay the run
byte for byte.

Wall mode runs the same nodes as real threads against the monotonic clock; it
exists for live demos and makes no determinism promises.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bus import LATEST, Bus, TraceLog, queue_policy
from .clock import VirtualClock, WallClock, s_to_ns
from .config import ConfigError, ExecSampler, ScenarioConfig, load_config, save_config
from .control import EStopLatch, PidState, pid_step, wheel_velocities
from .detector import DetectorConfig, OODResult, VaeScorer, ood_score
from .nn import load_weights
from .ppm import read_image, write_image
from .render import SceneParams, obstacle_pixel_fraction, render_frame
from .vision import LaneFollower, preprocess_color

log = logging.getLogger("oodsim.sim")


class SimError(Exception):
    pass


@dataclass
class Frame:
    """Camera frame: sequence number, capture time, and lazily rendered pixels."""

    seq: int
    t_ns: int
    x: float  # vehicle position at capture, for ground-truth bookkeeping
    _render: object = field(repr=False)
    _image: np.ndarray | None = field(default=None, repr=False)

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            self._image = self._render()
        return self._image


@dataclass(frozen=True)
class VehicleState:
    """1-D track state: position from start, forward velocity, stop latch view."""

    x: float = 0.0
    v: float = 0.0
    stopped: bool = False


def step_kinematics(state: VehicleState, cmd, dt: float) -> VehicleState:
    """Advance the straight-track plant: speed is the wheel mean, x += speed*dt."""
    if dt <= 0:
        raise SimError(f"dt must be > 0, got {dt}")
    speed = cmd.forward_speed
    if speed < 0:
        raise SimError("vehicle does not reverse")
    return VehicleState(x=state.x + speed * dt, v=speed, stopped=state.stopped)


class OracleScorer:
    """Deterministic stand-in scorer: base score plus gain times obstacle pixel fraction.

    Lets the closed loop run without trained weights. Presents itself as a
    one-dimensional detector (subset {0}) so OODResult invariants hold.
    """

    def __init__(self, scene: SceneParams, s_base: float, s_gain: float, threshold: float):
        if s_base < 0:
            raise SimError("oracle s_base must be >= 0")
        self.scene = scene
        self.s_base = s_base
        self.s_gain = s_gain
        self.config = DetectorConfig(subset=(0,), threshold=threshold, latent_dim=1)

    def score_at(self, vehicle_x: float) -> float:
        return self.s_base + self.s_gain * obstacle_pixel_fraction(self.scene, vehicle_x)

    def threshold_for_distance(self, distance_m: float) -> float:
        """Score of a frame captured with the obstacle `distance_m` away."""
        if self.scene.obstacle_distance_m is None:
            return self.s_base
        return self.score_at(self.scene.obstacle_distance_m - distance_m)

    def result_for(self, frame: Frame, ingest_ns: int, complete_ns: int) -> OODResult:
        score = self.score_at(frame.x)
        kl = np.array([score], dtype=np.float64)
        return OODResult(
            seq=frame.seq,
            kl=kl,
            score=ood_score(kl, self.config.subset),
            flagged=score > self.config.threshold,
            ingest_ns=ingest_ns,
            complete_ns=complete_ns,
        )

    def score_frame(self, frame: Frame, clock) -> OODResult:
        t = clock.now_ns()
        return self.result_for(frame, t, t)


def oracle_threshold(config: ScenarioConfig) -> float:
    """Default oracle threshold: the score at the configured flag distance."""
    scene = config.scene()
    gain = scene.obstacle.oracle_gain if scene.obstacle else 1.0
    scorer = OracleScorer(scene, config.detector.s_base, gain, threshold=0.0)
    return scorer.threshold_for_distance(config.detector.flag_distance_m)


def build_scorer(config: ScenarioConfig):
    det = config.detector
    if det.scorer == "oracle":
        scene = config.scene()
        gain = scene.obstacle.oracle_gain if scene.obstacle else 1.0
        threshold = det.threshold if det.threshold is not None else oracle_threshold(config)
        return OracleScorer(scene, det.s_base, gain, threshold)
    if det.weights_path is None:
        raise ConfigError("vae scorer requires a weights path")
    if det.subset is None or det.threshold is None:
        raise ConfigError("vae scorer requires a calibrated subset and threshold")
    model = load_weights(det.weights_path)

    def prep(image: np.ndarray) -> np.ndarray:
        view = preprocess_color(image)
        return (view.astype(np.float32) / 255.0).transpose(2, 0, 1)

    return VaeScorer(
        model,
        DetectorConfig(subset=det.subset, threshold=det.threshold, latent_dim=det.latent_dim),
        preprocess=prep,
    )


@dataclass(frozen=True)
class ScoreRecord:
    """One completed detector execution, with everything the sweep needs."""

    seq: int
    capture_ns: int
    capture_x_m: float
    score: float
    flagged: bool
    stop_latency_ns: int  # capture -> would-be motor stop for this frame


@dataclass
class RunLog:
    config: ScenarioConfig
    trace: TraceLog
    scores: list[ScoreRecord]
    stopping_distance_m: float | None
    collision: bool
    velocity_estimate_mps: float | None
    frames_scored: int
    t_first_motion_ns: int | None
    t_estop_ns: int | None
    x_at_estop_m: float | None
    x_final_m: float
    t_end_ns: int
    outcome: str  # stopped | collision | timeout


class _Vehicle:
    """Piecewise-constant-velocity integrator with exact event times."""

    def __init__(self):
        self.x = 0.0
        self.v = 0.0
        self.t_last_ns = 0
        self.stopped = False

    def advance(self, t_ns: int) -> None:
        if t_ns < self.t_last_ns:
            raise SimError("vehicle time went backwards")
        if self.v > 0 and not self.stopped:
            self.x += self.v * (t_ns - self.t_last_ns) / 1e9
        self.t_last_ns = t_ns

    def set_speed(self, t_ns: int, v: float) -> None:
        self.advance(t_ns)
        self.v = 0.0 if self.stopped else v


class _VirtualRun:
    def __init__(self, config: ScenarioConfig, scorer=None):
        self.cfg = config
        self.clock = VirtualClock()
        self.bus = Bus(self.clock)
        self.trace = TraceLog()
        self.scene = config.scene()
        self.scorer = scorer if scorer is not None else build_scorer(config)
        self.sampler: ExecSampler = config.exec_time.sampler(config.seed)
        self.follower = LaneFollower(config.vision)
        self.latch = EStopLatch()
        self.vehicle = _Vehicle()
        self.pid = PidState(config.control.gains)

        cam = self.bus.create_topic("camera", LATEST)
        steer_topic = self.bus.create_topic("steering", LATEST)
        self.bus.create_topic("ood", queue_policy(8))
        self.bus.create_topic("estop", queue_policy(8))
        self.lane_sub = cam.subscribe()
        self.det_sub = cam.subscribe()
        self.steer_sub = steer_topic.subscribe()
        self.estop_sub = self.bus.topic("estop").subscribe()

        self.cam_period = s_to_ns(1.0 / config.camera_hz)
        self.lane_period = s_to_ns(1.0 / config.lane_hz)
        self.hop_ci = s_to_ns(config.hops.capture_ingest_s)
        self.hop_em = s_to_ns(config.hops.estop_motor_s)

        self.frame_count = 0
        self.det_busy = False
        self.estop_fired = False
        self.ended = False
        self.outcome = "timeout"
        self.speed_gen = 0
        self.last_cmd_ns: int | None = None
        self.t_first_motion: int | None = None
        self.t_estop: int | None = None
        self.x_at_estop: float | None = None
        self.t_end: int | None = None
        self.scores: list[ScoreRecord] = []
        self._ingest_ns: dict[int, int] = {}

    # --- node callbacks -----------------------------------------------------

    def _camera_tick(self, t: int) -> None:
        if self.ended:
            return
        self.vehicle.advance(t)
        self.frame_count += 1
        seq = self.frame_count
        x = self.vehicle.x
        seed = self.cfg.seed
        scene = self.scene
        frame = Frame(seq, t, x, lambda: render_frame(scene, x, seed, seq))
        self.trace.record_hop(seq, "camera", "capture", t)
        self.clock.schedule(t + self.hop_ci, lambda tt, fr=frame: self._deliver(tt, fr))
        self.clock.schedule(t + self.cam_period, self._camera_tick)

    def _deliver(self, t: int, frame: Frame) -> None:
        env_seq = self.bus.publish("camera", frame, capture_ns=frame.t_ns)
        if env_seq != frame.seq:
            raise SimError(f"camera seq drift: topic {env_seq} vs frame {frame.seq}")
        if not self.det_busy:
            self._det_try_start(t)

    def _lane_tick(self, t: int) -> None:
        if self.ended:
            return
        env = self.lane_sub.take_latest()
        if env is not None:
            estimate = self.follower.process(env.payload.image)
            self.bus.publish("steering", estimate, capture_ns=env.capture_ns)
            steer_env = self.steer_sub.take_latest()
            if steer_env is not None:
                self._motor_on_steer(t, steer_env.payload.angle_deg)
        self.clock.schedule(t + self.lane_period, self._lane_tick)

    def _motor_on_steer(self, t: int, angle_deg: float) -> None:
        if self.ended:
            return
        dt = (t - self.last_cmd_ns) / 1e9 if self.last_cmd_ns is not None else 1.0 / self.cfg.lane_hz
        self.last_cmd_ns = t
        if dt <= 0:
            dt = 1.0 / self.cfg.lane_hz
        u, self.pid = pid_step(self.pid, angle_deg, dt)
        cmd = wheel_velocities(
            self.cfg.v_nominal, u, self.cfg.control.steer_gain, t,
            self.cfg.control.v_max, self.latch,
        )
        self._apply_speed(t, cmd.forward_speed)

    def _apply_speed(self, t: int, speed: float) -> None:
        if self.vehicle.stopped:
            return
        old = self.vehicle.v
        self.vehicle.set_speed(t, speed)
        if speed > 0 and self.t_first_motion is None:
            self.t_first_motion = t
        if speed != old:
            self._schedule_collision(t)

    def _schedule_collision(self, t: int) -> None:
        self.speed_gen += 1
        gen = self.speed_gen
        if self.scene.obstacle_distance_m is None or self.vehicle.v <= 0:
            return
        remaining = self.cfg.obstacle_distance_m - self.vehicle.x
        if remaining <= 0:
            self._collide(t)
            return
        t_col = t + max(1, math.ceil(remaining / self.vehicle.v * 1e9))
        self.clock.schedule(t_col, lambda tt, g=gen: self._collision_event(tt, g))

    def _collision_event(self, t: int, gen: int) -> None:
        if gen != self.speed_gen or self.ended:
            return
        self._collide(t)

    def _collide(self, t: int) -> None:
        self.vehicle.advance(t)
        self.vehicle.x = self.cfg.obstacle_distance_m
        self.vehicle.v = 0.0
        self.vehicle.stopped = True
        self.outcome = "collision"
        self._end(t)

    def _det_try_start(self, t: int) -> None:
        if self.ended or self.det_busy or self.estop_fired:
            return
        env = self.det_sub.take_latest()
        if env is None:
            return
        frame: Frame = env.payload
        self.det_busy = True
        self._ingest_ns[frame.seq] = t
        self.trace.record_hop(frame.seq, "camera", "ingest", t)
        exec_ns = s_to_ns(self.sampler.next_s())
        self.clock.schedule(t + exec_ns, lambda tt, fr=frame: self._det_complete(tt, fr))

    def _det_complete(self, t: int, frame: Frame) -> None:
        self.det_busy = False
        self.trace.record_hop(frame.seq, "ood", "detect_done", t)
        ingest = self._ingest_ns.pop(frame.seq)
        if isinstance(self.scorer, OracleScorer):
            result = self.scorer.result_for(frame, ingest, t)
        else:
            kl = self.scorer.kl_vector(frame.image)
            score = ood_score(kl, self.scorer.config.subset)
            result = OODResult(
                seq=frame.seq, kl=kl, score=score,
                flagged=score > self.scorer.config.threshold,
                ingest_ns=ingest, complete_ns=t,
            )
        self.bus.publish("ood", result, capture_ns=frame.t_ns)
        self.scores.append(
            ScoreRecord(
                seq=frame.seq,
                capture_ns=frame.t_ns,
                capture_x_m=frame.x,
                score=result.score,
                flagged=result.flagged,
                stop_latency_ns=(t - frame.t_ns) + self.hop_em,
            )
        )
        if result.flagged and not self.estop_fired:
            self.estop_fired = True
            self.trace.record_hop(frame.seq, "estop", "estop_sent", t)
            self.bus.publish("estop", result, capture_ns=frame.t_ns)
            self.clock.schedule(t + self.hop_em, lambda tt, fr=frame: self._motor_estop(tt, fr))
        if not self.ended and not self.estop_fired:
            self._det_try_start(t)

    def _motor_estop(self, t: int, frame: Frame) -> None:
        self.estop_sub.take()
        self.latch.engage(t)
        self.vehicle.advance(t)
        if not self.ended:
            self.t_estop = t
            self.x_at_estop = self.vehicle.x
            self.vehicle.v = 0.0
            new_x = self.vehicle.x + self.cfg.coast_m
            limit = self.cfg.obstacle_distance_m if self.scene.obstacle_distance_m is not None else None
            if limit is not None and new_x >= limit:
                self.vehicle.x = limit
                self.vehicle.stopped = True
                self.outcome = "collision"
                self.trace.record_hop(frame.seq, "wheels", "motor_zeroed", t)
                self._end(t)
                return
            self.vehicle.x = new_x
            self.vehicle.stopped = True
            self.outcome = "stopped"
            self.trace.record_hop(frame.seq, "wheels", "motor_zeroed", t)
            self._end(t)
        else:
            # stop command landed after the run ended (e.g. post-collision)
            self.trace.record_hop(frame.seq, "wheels", "motor_zeroed", t)

    def _timeout(self, t: int) -> None:
        if self.ended:
            return
        self.vehicle.advance(t)
        self.vehicle.v = 0.0
        self.vehicle.stopped = True
        self.outcome = "timeout"
        self._end(t)

    def _end(self, t: int) -> None:
        self.ended = True
        if self.t_end is None:
            self.t_end = t

    # --- driver ---------------------------------------------------------------

    def run(self) -> RunLog:
        self.clock.schedule(0, self._camera_tick)
        self.clock.schedule(0, self._lane_tick)
        self.clock.schedule(s_to_ns(self.cfg.max_duration_s), self._timeout)
        self.clock.run()
        if not self.ended:
            raise SimError("event loop drained without reaching an end state")
        return self._build_log()

    def _build_log(self) -> RunLog:
        d_obs = self.cfg.obstacle_distance_m if self.scene.obstacle_distance_m is not None else None
        if d_obs is not None:
            stopping = d_obs - self.vehicle.x
            collision = stopping <= 0
        else:
            stopping, collision = None, False

        v_est = None
        if self.t_first_motion is not None:
            if self.t_estop is not None:
                elapsed = (self.t_estop - self.t_first_motion) / 1e9
                travelled = self.x_at_estop
            else:
                elapsed = (self.t_end - self.t_first_motion) / 1e9
                travelled = self.vehicle.x
            if elapsed > 0 and travelled > 0:
                v_est = travelled / elapsed

        return RunLog(
            config=self.cfg,
            trace=self.trace,
            scores=self.scores,
            stopping_distance_m=stopping,
            collision=collision,
            velocity_estimate_mps=v_est,
            frames_scored=len(self.scores),
            t_first_motion_ns=self.t_first_motion,
            t_estop_ns=self.t_estop,
            x_at_estop_m=self.x_at_estop,
            x_final_m=self.vehicle.x,
            t_end_ns=self.t_end,
            outcome=self.outcome,
        )


class _WallRun:
    """Thread-per-node live run. Same pipeline, wall clock, no determinism claims."""

    def __init__(self, config: ScenarioConfig, scorer=None):
        self.cfg = config
        self.clock = WallClock()
        self.bus = Bus(self.clock)
        self.trace = TraceLog()
        self._trace_lock = threading.Lock()
        self.scene = config.scene()
        self.scorer = scorer if scorer is not None else build_scorer(config)
        self.sampler = config.exec_time.sampler(config.seed)
        self.follower = LaneFollower(config.vision)
        self.latch = EStopLatch()
        self._veh_lock = threading.Lock()
        self.vehicle = _Vehicle()
        self.pid = PidState(config.control.gains)
        self.stop_event = threading.Event()
        self.outcome = "timeout"
        self.frame_count = 0
        self.estop_fired = False
        self.t_first_motion: int | None = None
        self.t_estop: int | None = None
        self.x_at_estop: float | None = None
        self.t_end: int | None = None
        self.scores: list[ScoreRecord] = []
        self.last_cmd_ns: int | None = None

        cam = self.bus.create_topic("camera", LATEST)
        self.bus.create_topic("steering", LATEST)
        self.bus.create_topic("ood", queue_policy(8))
        self.bus.create_topic("estop", queue_policy(8))
        self.lane_sub = cam.subscribe()
        self.det_sub = cam.subscribe()
        self.steer_sub = self.bus.topic("steering").subscribe()
        self.estop_sub = self.bus.topic("estop").subscribe()

    def _record(self, seq, topic, stage, t):
        with self._trace_lock:
            self.trace.record_hop(seq, topic, stage, t)

    def _advance(self, t_ns):
        with self._veh_lock:
            self.vehicle.advance(t_ns)
            return self.vehicle.x

    def _camera_loop(self):
        period = 1.0 / self.cfg.camera_hz
        while not self.stop_event.is_set():
            t = self.clock.now_ns()
            x = self._advance(t)
            self.frame_count += 1
            seq = self.frame_count
            seed, scene = self.cfg.seed, self.scene
            frame = Frame(seq, t, x, lambda x=x, seq=seq: render_frame(scene, x, seed, seq))
            self._record(seq, "camera", "capture", t)
            self.bus.publish("camera", frame, capture_ns=t)
            time.sleep(period)

    def _lane_loop(self):
        period = 1.0 / self.cfg.lane_hz
        while not self.stop_event.is_set():
            env = self.lane_sub.take_latest()
            if env is not None:
                estimate = self.follower.process(env.payload.image)
                self.bus.publish("steering", estimate, capture_ns=env.capture_ns)
            time.sleep(period)

    def _motor_loop(self):
        while not self.stop_event.is_set():
            estop_env = self.estop_sub.take()
            if estop_env is not None and not self.latch.latched:
                t = self.clock.now_ns()
                self.latch.engage(t)
                with self._veh_lock:
                    self.vehicle.advance(t)
                    self.t_estop = t
                    self.x_at_estop = self.vehicle.x
                    self.vehicle.v = 0.0
                    self.vehicle.x = min(
                        self.vehicle.x + self.cfg.coast_m,
                        self.cfg.obstacle_distance_m
                        if self.scene.obstacle_distance_m is not None
                        else self.vehicle.x + self.cfg.coast_m,
                    )
                    self.vehicle.stopped = True
                self._record(estop_env.payload.seq, "wheels", "motor_zeroed", t)
                self.outcome = "stopped"
                self.t_end = t
                self.stop_event.set()
                return
            env = self.steer_sub.take_latest()
            if env is not None:
                t = self.clock.now_ns()
                dt = (t - self.last_cmd_ns) / 1e9 if self.last_cmd_ns else 1.0 / self.cfg.lane_hz
                self.last_cmd_ns = t
                if dt <= 0:
                    dt = 1e-3
                u, self.pid = pid_step(self.pid, env.payload.angle_deg, dt)
                cmd = wheel_velocities(
                    self.cfg.v_nominal, u, self.cfg.control.steer_gain, t,
                    self.cfg.control.v_max, self.latch,
                )
                with self._veh_lock:
                    if not self.vehicle.stopped:
                        self.vehicle.set_speed(t, cmd.forward_speed)
                        if cmd.forward_speed > 0 and self.t_first_motion is None:
                            self.t_first_motion = t
            time.sleep(0.002)

    def _detector_loop(self):
        while not self.stop_event.is_set():
            env = self.det_sub.take_latest()
            if env is None:
                time.sleep(0.001)
                continue
            frame: Frame = env.payload
            t0 = self.clock.now_ns()
            self._record(frame.seq, "camera", "ingest", t0)
            if isinstance(self.scorer, OracleScorer):
                time.sleep(self.sampler.next_s())
                t1 = self.clock.now_ns()
                result = self.scorer.result_for(frame, t0, t1)
            else:
                result = self.scorer.score_frame(frame, self.clock)
                t1 = result.complete_ns
            self._record(frame.seq, "ood", "detect_done", t1)
            self.bus.publish("ood", result, capture_ns=frame.t_ns)
            self.scores.append(
                ScoreRecord(
                    seq=frame.seq, capture_ns=frame.t_ns, capture_x_m=frame.x,
                    score=result.score, flagged=result.flagged,
                    stop_latency_ns=(t1 - frame.t_ns) + s_to_ns(self.cfg.hops.estop_motor_s),
                )
            )
            if result.flagged and not self.estop_fired:
                self.estop_fired = True
                self._record(frame.seq, "estop", "estop_sent", t1)
                self.bus.publish("estop", result, capture_ns=frame.t_ns)

    def _watchdog_loop(self):
        limit = s_to_ns(self.cfg.max_duration_s)
        while not self.stop_event.is_set():
            t = self.clock.now_ns()
            x = self._advance(t)
            if (
                self.scene.obstacle_distance_m is not None
                and x >= self.cfg.obstacle_distance_m
            ):
                with self._veh_lock:
                    self.vehicle.x = self.cfg.obstacle_distance_m
                    self.vehicle.v = 0.0
                    self.vehicle.stopped = True
                self.outcome = "collision"
                self.t_end = t
                self.stop_event.set()
                return
            if t >= limit:
                with self._veh_lock:
                    self.vehicle.v = 0.0
                    self.vehicle.stopped = True
                self.outcome = "timeout"
                self.t_end = t
                self.stop_event.set()
                return
            time.sleep(0.002)

    def run(self) -> RunLog:
        threads = [
            threading.Thread(target=fn, daemon=True, name=name)
            for name, fn in (
                ("camera", self._camera_loop),
                ("lane", self._lane_loop),
                ("motor", self._motor_loop),
                ("detector", self._detector_loop),
                ("watchdog", self._watchdog_loop),
            )
        ]
        for th in threads:
            th.start()
        self.stop_event.wait(timeout=self.cfg.max_duration_s + 5.0)
        self.stop_event.set()
        for th in threads:
            th.join(timeout=5.0)
        if self.t_end is None:
            self.t_end = self.clock.now_ns()

        d_obs = self.cfg.obstacle_distance_m if self.scene.obstacle_distance_m is not None else None
        stopping = d_obs - self.vehicle.x if d_obs is not None else None
        v_est = None
        if self.t_first_motion is not None:
            t_ref = self.t_estop if self.t_estop is not None else self.t_end
            travelled = self.x_at_estop if self.x_at_estop is not None else self.vehicle.x
            elapsed = (t_ref - self.t_first_motion) / 1e9
            if elapsed > 0 and travelled > 0:
                v_est = travelled / elapsed
        return RunLog(
            config=self.cfg,
            trace=self.trace,
            scores=self.scores,
            stopping_distance_m=stopping,
            collision=stopping is not None and stopping <= 0,
            velocity_estimate_mps=v_est,
            frames_scored=len(self.scores),
            t_first_motion_ns=self.t_first_motion,
            t_estop_ns=self.t_estop,
            x_at_estop_m=self.x_at_estop,
            x_final_m=self.vehicle.x,
            t_end_ns=self.t_end,
            outcome=self.outcome,
        )


def resolve_config(config: ScenarioConfig) -> ScenarioConfig:
    """Pin derived detector settings (oracle threshold) into the config snapshot."""
    det = config.detector
    if det.scorer == "oracle" and det.threshold is None:
        det = replace(det, threshold=oracle_threshold(config), subset=(0,), latent_dim=1)
        return replace(config, detector=det)
    return config


def run_scenario(config: ScenarioConfig, scorer=None) -> RunLog:
    """Execute one scenario under the configured clock and return its RunLog."""
    if scorer is None:
        config = resolve_config(config)
    if config.clock == "virtual":
        return _VirtualRun(config, scorer).run()
    return _WallRun(config, scorer).run()


# --- RunLog persistence -------------------------------------------------------

SCORES_HEADER = ["seq", "capture_ns", "capture_x_m", "score", "flagged", "stop_latency_ns"]


def write_run_dir(run: RunLog, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run.trace.write_csv(out / "events.csv")
    with open(out / "scores.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SCORES_HEADER)
        for s in run.scores:
            w.writerow(
                [s.seq, s.capture_ns, repr(s.capture_x_m), repr(s.score),
                 int(s.flagged), s.stop_latency_ns]
            )
    save_config(run.config, out / "config.ini")
    with open(out / "summary.json", "w") as f:
        json.dump(summary_dict(run), f, indent=2, sort_keys=True)
        f.write("\n")


def summary_dict(run: RunLog) -> dict:
    return {
        "seed": run.config.seed,
        "obstacle_type": run.config.obstacle_type,
        "outcome": run.outcome,
        "stopping_distance_m": run.stopping_distance_m,
        "collision": run.collision,
        "velocity_estimate_mps": run.velocity_estimate_mps,
        "frames_scored": run.frames_scored,
        "t_first_motion_ns": run.t_first_motion_ns,
        "t_estop_ns": run.t_estop_ns,
        "x_at_estop_m": run.x_at_estop_m,
        "x_final_m": run.x_final_m,
        "t_end_ns": run.t_end_ns,
    }


def read_run_dir(run_dir) -> RunLog:
    run_dir = Path(run_dir)
    config = load_config(run_dir / "config.ini")
    trace = TraceLog.read_csv(run_dir / "events.csv")
    scores = []
    with open(run_dir / "scores.csv", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != SCORES_HEADER:
            raise SimError(f"bad scores header in {run_dir}: {header}")
        for row in reader:
            scores.append(
                ScoreRecord(
                    seq=int(row[0]), capture_ns=int(row[1]), capture_x_m=float(row[2]),
                    score=float(row[3]), flagged=bool(int(row[4])),
                    stop_latency_ns=int(row[5]),
                )
            )
    with open(run_dir / "summary.json") as f:
        summary = json.load(f)
    return RunLog(
        config=config,
        trace=trace,
        scores=scores,
        stopping_distance_m=summary["stopping_distance_m"],
        collision=summary["collision"],
        velocity_estimate_mps=summary["velocity_estimate_mps"],
        frames_scored=summary["frames_scored"],
        t_first_motion_ns=summary["t_first_motion_ns"],
        t_estop_ns=summary["t_estop_ns"],
        x_at_estop_m=summary["x_at_estop_m"],
        x_final_m=summary["x_final_m"],
        t_end_ns=summary["t_end_ns"],
        outcome=summary["outcome"],
    )


# --- dataset rendering ---------------------------------------------------------

def render_dataset(
    out_dir,
    n_clear: int,
    n_obstacle: int,
    seed: int,
    config: ScenarioConfig | None = None,
    distances_m: list[float] | None = None,
) -> Path:
    """Write numbered PPM frames plus index.csv; clear lanes first, then obstacles."""
    cfg = config if config is not None else ScenarioConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clear_scene = replace(cfg.scene(), obstacle=None, obstacle_distance_m=None)
    obstacle_scene = cfg.scene()
    if n_obstacle > 0 and obstacle_scene.obstacle is None:
        raise ConfigError("config has no obstacle type; cannot render obstacle frames")
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 0xDA7A])
    rows = []
    idx = 0
    for _ in range(n_clear):
        name = f"frame_{idx:05d}.ppm"
        write_image(out / name, render_frame(clear_scene, 0.0, seed, idx))
        rows.append([name, idx, 0, ""])
        idx += 1
    for j in range(n_obstacle):
        if distances_m is not None:
            dist = distances_m[j % len(distances_m)]
        else:
            dist = float(rng.uniform(0.12, cfg.obstacle_distance_m))
        x = cfg.obstacle_distance_m - dist
        name = f"frame_{idx:05d}.ppm"
        write_image(out / name, render_frame(obstacle_scene, x, seed, idx))
        rows.append([name, idx, 1, repr(dist)])
        idx += 1
    with open(out / "index.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["filename", "seq", "obstacle", "distance_m"])
        w.writerows(rows)
    return out


def load_dataset_frames(dataset_dir, only_clear: bool = False) -> list[Frame]:
    """Load a rendered dataset back into Frame objects (capture time = index)."""
    dataset_dir = Path(dataset_dir)
    index = dataset_dir / "index.csv"
    frames = []
    if index.exists():
        with open(index, newline="") as f:
            reader = csv.reader(f)
            next(reader, None)
            for row in reader:
                if only_clear and int(row[2]) != 0:
                    continue
                path = dataset_dir / row[0]
                seq = int(row[1])
                frames.append(Frame(seq, seq, 0.0, lambda p=path: read_image(p)))
    else:
        for i, path in enumerate(sorted(dataset_dir.glob("*.ppm"))):
            frames.append(Frame(i, i, 0.0, lambda p=path: read_image(p)))
    if not frames:
        raise SimError(f"no frames found in {dataset_dir}")
    return frames

"""Scenario configuration: dataclasses plus the sectioned key=value config file.

The file format is INI: one section per subsystem, all keys optional, defaults
baked into the dataclasses. Detector settings (subset, threshold, latent dim)
live in the same file so one snapshot fully describes a run.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .control import PidGains
from .render import OBSTACLES_BY_NAME, ObstacleSpec, SceneParams
from .vision import VisionParams

DEFAULT_SEED = 7  # fixed documented seed: identical runs reproduce byte-identically


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ExecTimeModel:
    """Detector execution-time model: constant, log-normal, or a cycling sample list."""

    kind: str = "lognormal"
    t_s: float = 0.3  # constant
    median_s: float = 0.542  # lognormal
    sigma: float = 0.35  # lognormal
    samples_s: tuple[float, ...] = ()  # empirical, cycled in order

    def __post_init__(self):
        if self.kind not in ("constant", "lognormal", "empirical"):
            raise ConfigError(f"unknown exec-time kind {self.kind!r}")
        if self.kind == "constant" and self.t_s <= 0:
            raise ConfigError("constant exec time must be > 0")
        if self.kind == "lognormal" and (self.median_s <= 0 or self.sigma < 0):
            raise ConfigError("lognormal needs median > 0 and sigma >= 0")
        if self.kind == "empirical":
            if not self.samples_s:
                raise ConfigError("empirical exec model needs samples")
            if any(s <= 0 for s in self.samples_s):
                raise ConfigError("exec-time samples must be > 0")

    def sampler(self, seed: int) -> "ExecSampler":
        return ExecSampler(self, seed)


class ExecSampler:
    """Seeded stateful sampler; every draw is strictly positive."""

    def __init__(self, model: ExecTimeModel, seed: int):
        self._model = model
        self._rng = np.random.default_rng([seed & 0x7FFFFFFF, 0xE5EC])
        self._i = 0

    def next_s(self) -> float:
        m = self._model
        if m.kind == "constant":
            return m.t_s
        if m.kind == "empirical":
            val = m.samples_s[self._i % len(m.samples_s)]
            self._i += 1
            return val
        val = math.exp(self._rng.normal(math.log(m.median_s), m.sigma))
        return val


def sample_exec_time(sampler: ExecSampler) -> float:
    return sampler.next_s()


@dataclass(frozen=True)
class DetectorSettings:
    scorer: str = "oracle"  # oracle | vae
    quantile: float = 0.80
    k: int = 5  # detector dims picked by select_detectors
    latent_dim: int = 30
    threshold: float | None = None  # None: derive (oracle: from flag_distance_m)
    subset: tuple[int, ...] | None = None
    weights_path: str | None = None
    flag_distance_m: float = 0.45  # oracle threshold anchor: score at this distance
    s_base: float = 1.0  # oracle score for an empty scene

    def __post_init__(self):
        if self.scorer not in ("oracle", "vae"):
            raise ConfigError(f"unknown scorer {self.scorer!r}")
        if not (0 < self.quantile <= 1):
            raise ConfigError(f"quantile must be in (0,1], got {self.quantile}")


@dataclass(frozen=True)
class ControlSettings:
    gains: PidGains = field(default_factory=PidGains)
    steer_gain: float = 0.002  # m/s of wheel split per degree of PID output
    v_max: float = 1.0


@dataclass(frozen=True)
class HopSettings:
    """Constant transport latencies between nodes (injectable)."""

    capture_ingest_s: float = 0.015
    estop_motor_s: float = 0.005

    def __post_init__(self):
        if self.capture_ingest_s < 0 or self.estop_motor_s < 0:
            raise ConfigError("hop latencies must be >= 0")


@dataclass(frozen=True)
class ScenarioConfig:
    obstacle_distance_m: float = 0.70
    risk_zone_m: float = 0.60
    v_nominal: float = 0.2
    camera_hz: float = 30.0
    lane_hz: float = 5.0
    coast_m: float = 0.0
    max_duration_s: float = 30.0
    clock: str = "virtual"  # virtual | wall
    seed: int = DEFAULT_SEED
    obstacle_type: str | None = "box_small"  # None: empty-lane run
    exec_time: ExecTimeModel = field(default_factory=ExecTimeModel)
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    control: ControlSettings = field(default_factory=ControlSettings)
    vision: VisionParams = field(default_factory=VisionParams)
    hops: HopSettings = field(default_factory=HopSettings)
    jitter_px: float = 6.0
    noise_amp: int = 6

    def __post_init__(self):
        if self.obstacle_type is not None:
            if not (0 < self.risk_zone_m < self.obstacle_distance_m):
                raise ConfigError(
                    f"need 0 < risk_zone ({self.risk_zone_m}) < obstacle distance "
                    f"({self.obstacle_distance_m})"
                )
        if self.camera_hz <= 0 or self.lane_hz <= 0:
            raise ConfigError("node rates must be > 0")
        if self.clock not in ("virtual", "wall"):
            raise ConfigError(f"unknown clock {self.clock!r}")
        if self.v_nominal < 0 or self.coast_m < 0:
            raise ConfigError("v_nominal and coast must be >= 0")
        if self.obstacle_type is not None and self.obstacle_type not in OBSTACLES_BY_NAME:
            raise ConfigError(f"unknown obstacle type {self.obstacle_type!r}")

    def scene(self) -> SceneParams:
        obstacle: ObstacleSpec | None = None
        distance = None
        if self.obstacle_type is not None:
            obstacle = OBSTACLES_BY_NAME[self.obstacle_type]
            distance = self.obstacle_distance_m
        return SceneParams(
            obstacle=obstacle,
            obstacle_distance_m=distance,
            jitter_px=self.jitter_px,
            noise_amp=self.noise_amp,
        )

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=seed)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_config(config: ScenarioConfig, path) -> None:
    cp = configparser.ConfigParser()
    cp["scenario"] = {
        "obstacle_distance_m": _fmt(config.obstacle_distance_m),
        "risk_zone_m": _fmt(config.risk_zone_m),
        "v_nominal_mps": _fmt(config.v_nominal),
        "camera_hz": _fmt(config.camera_hz),
        "lane_hz": _fmt(config.lane_hz),
        "coast_m": _fmt(config.coast_m),
        "max_duration_s": _fmt(config.max_duration_s),
        "clock": config.clock,
        "seed": _fmt(config.seed),
        "obstacle_type": config.obstacle_type or "none",
    }
    exec_section = {"kind": config.exec_time.kind}
    if config.exec_time.kind == "constant":
        exec_section["t_s"] = _fmt(config.exec_time.t_s)
    elif config.exec_time.kind == "lognormal":
        exec_section["median_s"] = _fmt(config.exec_time.median_s)
        exec_section["sigma"] = _fmt(config.exec_time.sigma)
    else:
        exec_section["samples_s"] = ",".join(repr(s) for s in config.exec_time.samples_s)
    cp["exec_time"] = exec_section
    det = {
        "scorer": config.detector.scorer,
        "quantile": _fmt(config.detector.quantile),
        "k": _fmt(config.detector.k),
        "latent_dim": _fmt(config.detector.latent_dim),
        "flag_distance_m": _fmt(config.detector.flag_distance_m),
        "s_base": _fmt(config.detector.s_base),
    }
    if config.detector.threshold is not None:
        det["threshold"] = _fmt(config.detector.threshold)
    if config.detector.subset is not None:
        det["subset"] = ",".join(str(i) for i in config.detector.subset)
    if config.detector.weights_path is not None:
        det["weights"] = config.detector.weights_path
    cp["detector"] = det
    cp["control"] = {
        "kp": _fmt(config.control.gains.kp),
        "ki": _fmt(config.control.gains.ki),
        "kd": _fmt(config.control.gains.kd),
        "u_max": _fmt(config.control.gains.u_max),
        "i_max": _fmt(config.control.gains.i_max),
        "steer_gain": _fmt(config.control.steer_gain),
        "v_max": _fmt(config.control.v_max),
    }
    v = config.vision
    cp["vision"] = {
        "mask_lo": _fmt(v.mask_lo),
        "canny_low": _fmt(v.canny_low),
        "canny_high": _fmt(v.canny_high),
        "hough_rho_res": _fmt(v.hough_rho_res),
        "hough_theta_res": _fmt(v.hough_theta_res),
        "hough_votes": _fmt(v.hough_votes),
        "hough_min_len": _fmt(v.hough_min_len),
        "hough_max_gap": _fmt(v.hough_max_gap),
        "slope_min": _fmt(v.slope_min),
        "smooth_n": _fmt(v.smooth_n),
        "lane_width_px": _fmt(v.lane_width_px),
    }
    cp["hops"] = {
        "capture_ingest_s": _fmt(config.hops.capture_ingest_s),
        "estop_motor_s": _fmt(config.hops.estop_motor_s),
    }
    cp["scene"] = {
        "jitter_px": _fmt(config.jitter_px),
        "noise_amp": _fmt(config.noise_amp),
    }
    with open(path, "w") as f:
        cp.write(f)


def load_config(path) -> ScenarioConfig:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    try:
        return _from_parser(cp)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"bad config {path}: {e}") from None


def _from_parser(cp: configparser.ConfigParser) -> ScenarioConfig:
    base = ScenarioConfig()
    s = cp["scenario"] if cp.has_section("scenario") else {}

    def get(section, key, default, cast):
        if not cp.has_section(section) or key not in cp[section]:
            return default
        return cast(cp[section][key])

    obstacle_type = get("scenario", "obstacle_type", base.obstacle_type, str)
    if obstacle_type == "none":
        obstacle_type = None

    exec_kind = get("exec_time", "kind", base.exec_time.kind, str)
    exec_time = ExecTimeModel(
        kind=exec_kind,
        t_s=get("exec_time", "t_s", base.exec_time.t_s, float),
        median_s=get("exec_time", "median_s", base.exec_time.median_s, float),
        sigma=get("exec_time", "sigma", base.exec_time.sigma, float),
        samples_s=tuple(
            float(x)
            for x in get("exec_time", "samples_s", "", str).split(",")
            if x.strip()
        )
        or base.exec_time.samples_s,
    )

    subset_raw = get("detector", "subset", "", str)
    subset = tuple(int(x) for x in subset_raw.split(",") if x.strip()) or None
    threshold_raw = get("detector", "threshold", "", str)
    detector = DetectorSettings(
        scorer=get("detector", "scorer", base.detector.scorer, str),
        quantile=get("detector", "quantile", base.detector.quantile, float),
        k=get("detector", "k", base.detector.k, int),
        latent_dim=get("detector", "latent_dim", base.detector.latent_dim, int),
        threshold=float(threshold_raw) if threshold_raw else None,
        subset=subset,
        weights_path=get("detector", "weights", "", str) or None,
        flag_distance_m=get("detector", "flag_distance_m", base.detector.flag_distance_m, float),
        s_base=get("detector", "s_base", base.detector.s_base, float),
    )

    control = ControlSettings(
        gains=PidGains(
            kp=get("control", "kp", base.control.gains.kp, float),
            ki=get("control", "ki", base.control.gains.ki, float),
            kd=get("control", "kd", base.control.gains.kd, float),
            u_max=get("control", "u_max", base.control.gains.u_max, float),
            i_max=get("control", "i_max", base.control.gains.i_max, float),
        ),
        steer_gain=get("control", "steer_gain", base.control.steer_gain, float),
        v_max=get("control", "v_max", base.control.v_max, float),
    )

    vision = VisionParams(
        mask_lo=get("vision", "mask_lo", base.vision.mask_lo, int),
        canny_low=get("vision", "canny_low", base.vision.canny_low, float),
        canny_high=get("vision", "canny_high", base.vision.canny_high, float),
        hough_rho_res=get("vision", "hough_rho_res", base.vision.hough_rho_res, float),
        hough_theta_res=get("vision", "hough_theta_res", base.vision.hough_theta_res, float),
        hough_votes=get("vision", "hough_votes", base.vision.hough_votes, int),
        hough_min_len=get("vision", "hough_min_len", base.vision.hough_min_len, float),
        hough_max_gap=get("vision", "hough_max_gap", base.vision.hough_max_gap, float),
        slope_min=get("vision", "slope_min", base.vision.slope_min, float),
        smooth_n=get("vision", "smooth_n", base.vision.smooth_n, int),
        lane_width_px=get("vision", "lane_width_px", base.vision.lane_width_px, float),
    )

    hops = HopSettings(
        capture_ingest_s=get("hops", "capture_ingest_s", base.hops.capture_ingest_s, float),
        estop_motor_s=get("hops", "estop_motor_s", base.hops.estop_motor_s, float),
    )

    return ScenarioConfig(
        obstacle_distance_m=get("scenario", "obstacle_distance_m", base.obstacle_distance_m, float),
        risk_zone_m=get("scenario", "risk_zone_m", base.risk_zone_m, float),
        v_nominal=get("scenario", "v_nominal_mps", base.v_nominal, float),
        camera_hz=get("scenario", "camera_hz", base.camera_hz, float),
        lane_hz=get("scenario", "lane_hz", base.lane_hz, float),
        coast_m=get("scenario", "coast_m", base.coast_m, float),
        max_duration_s=get("scenario", "max_duration_s", base.max_duration_s, float),
        clock=get("scenario", "clock", base.clock, str),
        seed=get("scenario", "seed", base.seed, int),
        obstacle_type=obstacle_type,
        exec_time=exec_time,
        detector=detector,
        control=control,
        vision=vision,
        hops=hops,
        jitter_px=get("scene", "jitter_px", base.jitter_px, float),
        noise_amp=get("scene", "noise_amp", base.noise_amp, int),
    )

"""Synthetic camera frames: straight two-lane road, optional obstacle, seeded noise.

Rendering is a pure function of (scene, vehicle position, frame seq, seed), so
frames are bit-identical across runs regardless of evaluation order. The
obstacle's on-screen size scales projectively with its remaining distance, and
the same clipped-rectangle geometry backs both the renderer and the oracle
scorer's pixel fraction, keeping them consistent by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FRAME_W, FRAME_H = 640, 480
HORIZON = FRAME_H // 2
ROW_GAIN = 28.0  # px*m: screen drop of the obstacle base below the horizon


class RenderError(Exception):
    pass


@dataclass(frozen=True)
class ObstacleSpec:
    """Obstacle on-screen size scales as gain/distance (projective).

    height_gain exceeds ROW_GAIN for every type, i.e. the obstacle is taller
    than the camera, so its top edge rises while its base sinks as it nears:
    the projected area grows strictly monotonically over the whole approach.
    """

    name: str
    width_gain: float  # px*m: on-screen width = width_gain / distance
    height_gain: float  # px*m: on-screen height = height_gain / distance
    color: tuple[int, int, int]
    oracle_gain: float  # score units per unit pixel fraction


OBSTACLE_TYPES = (
    ObstacleSpec("box_small", 30.0, 34.0, (200, 80, 50), 8.0),
    ObstacleSpec("box_wide", 48.0, 36.0, (90, 140, 190), 9.0),
    ObstacleSpec("cone_tall", 22.0, 44.0, (230, 140, 40), 8.5),
    ObstacleSpec("crate_large", 55.0, 48.0, (150, 120, 90), 10.0),
)

OBSTACLES_BY_NAME = {o.name: o for o in OBSTACLE_TYPES}


@dataclass(frozen=True)
class SceneParams:
    obstacle: ObstacleSpec | None = None
    obstacle_distance_m: float | None = None  # None renders an empty lane
    lane_spread_px: float = 260.0
    lane_gray: int = 235
    road_gray: int = 45
    sky_gray: int = 70
    jitter_px: float = 6.0
    noise_amp: int = 6

    def __post_init__(self):
        if self.obstacle is not None and self.obstacle_distance_m is None:
            raise RenderError("obstacle requires obstacle_distance_m")


def drift_px(scene: SceneParams, seed: int, seq: int) -> float:
    """Per-frame lateral camera sway; smooth in seq, phase set by the run seed."""
    if scene.jitter_px == 0:
        return 0.0
    phase = (seed % 997) * 0.618
    return scene.jitter_px * math.sin(0.37 * seq + phase)


def _rect_bounds(
    scene: SceneParams, vehicle_x: float, drift: float
) -> tuple[float, float, float, float] | None:
    """Continuous clipped obstacle bounds (y0, y1, x0, x1); None if absent."""
    if scene.obstacle is None or scene.obstacle_distance_m is None:
        return None
    dist = scene.obstacle_distance_m - vehicle_x
    if dist <= 0:
        raise RenderError(f"vehicle at/behind obstacle: distance {dist}")
    spec = scene.obstacle
    y_bottom = HORIZON + ROW_GAIN / dist
    x_center = (FRAME_W - 1) / 2 + drift
    y0 = max(0.0, y_bottom - spec.height_gain / dist)
    y1 = min(float(FRAME_H), y_bottom)
    x0 = max(0.0, x_center - spec.width_gain / (2 * dist))
    x1 = min(float(FRAME_W), x_center + spec.width_gain / (2 * dist))
    if y1 <= y0 or x1 <= x0:
        return None
    return y0, y1, x0, x1


def obstacle_rect(
    scene: SceneParams, vehicle_x: float, drift: float = 0.0
) -> tuple[int, int, int, int] | None:
    """Rasterized obstacle rectangle (y0, y1, x0, x1), half-open; None if absent."""
    bounds = _rect_bounds(scene, vehicle_x, drift)
    if bounds is None:
        return None
    y0f, y1f, x0f, x1f = bounds
    y0, y1 = int(round(y0f)), int(round(y1f))
    x0, x1 = int(round(x0f)), int(round(x1f))
    if y1 <= y0 or x1 <= x0:
        return None
    return y0, y1, x0, x1


def obstacle_pixel_fraction(scene: SceneParams, vehicle_x: float) -> float:
    """Fraction of the frame covered by the obstacle's projected rectangle.

    Continuous (sub-pixel) area of the centered geometry, so the value is
    strictly increasing as the obstacle nears; the renderer rasterizes the
    same bounds to whole pixels.
    """
    bounds = _rect_bounds(scene, vehicle_x, drift=0.0)
    if bounds is None:
        return 0.0
    y0, y1, x0, x1 = bounds
    return (y1 - y0) * (x1 - x0) / (FRAME_W * FRAME_H)


def obstacle_mask(scene: SceneParams, vehicle_x: float, seed: int, seq: int) -> np.ndarray:
    """Ground-truth boolean mask of obstacle pixels in the rendered frame."""
    mask = np.zeros((FRAME_H, FRAME_W), dtype=bool)
    rect = obstacle_rect(scene, vehicle_x, drift_px(scene, seed, seq))
    if rect is not None:
        y0, y1, x0, x1 = rect
        mask[y0:y1, x0:x1] = True
    return mask


def render_frame(scene: SceneParams, vehicle_x: float, seed: int, seq: int) -> np.ndarray:
    """Render one 640x480 RGB frame at the given vehicle position."""
    drift = drift_px(scene, seed, seq)
    img = np.empty((FRAME_H, FRAME_W, 3), dtype=np.float64)
    img[:HORIZON] = scene.sky_gray
    img[HORIZON:] = scene.road_gray

    vp_x = (FRAME_W - 1) / 2 + drift
    rows = np.arange(HORIZON + 6, FRAME_H)
    t = (rows - HORIZON) / (FRAME_H - HORIZON)
    half_w = 1.5 + 5.0 * t
    for side in (-1.0, 1.0):
        centers = vp_x + side * scene.lane_spread_px * t
        x_lo = np.maximum(0, np.ceil(centers - half_w)).astype(int)
        x_hi = np.minimum(FRAME_W, np.floor(centers + half_w) + 1).astype(int)
        for y, lo, hi in zip(rows, x_lo, x_hi):
            if hi > lo:
                img[y, lo:hi] = scene.lane_gray

    rect = obstacle_rect(scene, vehicle_x, drift)
    if rect is not None:
        y0, y1, x0, x1 = rect
        img[y0:y1, x0:x1] = scene.obstacle.color

    if scene.noise_amp > 0:
        rng = np.random.default_rng([seed & 0x7FFFFFFF, seq])
        noise = rng.integers(
            -scene.noise_amp, scene.noise_amp + 1, size=img.shape
        ).astype(np.float64)
        img += noise
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)

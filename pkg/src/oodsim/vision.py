"""Classical lane-following vision: resize/crop, white mask, Canny, Hough, steering.

The pipeline is deterministic end to end. Steering sign convention: positive
angle steers right. The steering axis is the pixel-center column (w-1)/2 so
that horizontally mirroring a frame negates the angle exactly.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np


class VisionError(Exception):
    pass


FRAME_W, FRAME_H = 640, 480
VIEW_W, VIEW_H = 128, 48  # lower half of the 128x96 resize

REC601 = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class LineSegment:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def slope(self) -> float:
        """dy/dx in image coordinates (y down); math.inf for vertical."""
        dx = self.x2 - self.x1
        if dx == 0:
            return math.inf
        return (self.y2 - self.y1) / dx

    @property
    def length(self) -> float:
        return math.hypot(self.x2 - self.x1, self.y2 - self.y1)

    @property
    def midpoint_x(self) -> float:
        return 0.5 * (self.x1 + self.x2)


@dataclass(frozen=True)
class Lane:
    """Fitted lane line y = slope*x + intercept, or x = intercept when vertical."""

    slope: float
    intercept: float

    @property
    def vertical(self) -> bool:
        return math.isinf(self.slope)

    def x_at(self, y: float) -> float:
        if self.vertical:
            return self.intercept
        return (y - self.intercept) / self.slope


@dataclass(frozen=True)
class SteeringEstimate:
    angle_deg: float  # positive steers right, within [-90, 90]
    confidence: str  # both | left_only | right_only | none


@dataclass(frozen=True)
class VisionParams:
    mask_lo: int = 200
    canny_low: float = 50.0
    canny_high: float = 150.0
    hough_rho_res: float = 1.0
    hough_theta_res: float = 1.0  # degrees
    hough_votes: int = 15
    hough_min_len: float = 10.0
    hough_max_gap: float = 4.0
    slope_min: float = 0.3
    smooth_n: int = 5
    lane_width_px: float = 60.0


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize; returns float64."""
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape[:2]
    sy, sx = in_h / out_h, in_w / out_w
    src_y = np.clip((np.arange(out_h) + 0.5) * sy - 0.5, 0, in_h - 1)
    src_x = np.clip((np.arange(out_w) + 0.5) * sx - 0.5, 0, in_w - 1)
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (src_y - y0)[:, None]
    wx = (src_x - x0)[None, :]
    if img.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def grayscale(img: np.ndarray) -> np.ndarray:
    """Rec.601 luma; accepts float or uint8 (H,W,3), returns float64 (H,W)."""
    img = np.asarray(img, dtype=np.float64)
    r, g, b = REC601
    return r * img[..., 0] + g * img[..., 1] + b * img[..., 2]


def preprocess(frame: np.ndarray) -> np.ndarray:
    """640x480 RGB -> 128x48 uint8 grayscale (lower half of the 128x96 resize)."""
    if frame.shape != (FRAME_H, FRAME_W, 3):
        raise VisionError(f"expected {FRAME_H}x{FRAME_W}x3 frame, got {frame.shape}")
    small = resize_bilinear(frame, 96, 128)
    gray = grayscale(small)[48:96]
    return np.clip(np.rint(gray), 0, 255).astype(np.uint8)


def preprocess_color(frame: np.ndarray) -> np.ndarray:
    """Same resize/crop as preprocess but keeping color: 48x128x3 uint8."""
    if frame.shape != (FRAME_H, FRAME_W, 3):
        raise VisionError(f"expected {FRAME_H}x{FRAME_W}x3 frame, got {frame.shape}")
    small = resize_bilinear(frame, 96, 128)[48:96]
    return np.clip(np.rint(small), 0, 255).astype(np.uint8)


def white_mask(img: np.ndarray, lo: int) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise VisionError("white_mask expects a grayscale image")
    return np.where(img >= lo, 255, 0).astype(np.uint8)


# --- Canny ------------------------------------------------------------------

def gaussian_kernel5(sigma: float = 1.4) -> np.ndarray:
    ax = np.arange(5, dtype=np.float64) - 2
    xx, yy = np.meshgrid(ax, ax)
    k = np.exp(-(xx * xx + yy * yy) / (2 * sigma * sigma))
    return k / k.sum()


SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float64)


def _conv_same(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size cross-correlation with edge-replicated borders.

    Accumulates taps in row-major kernel order with separate multiply and add,
    so results are bit-identical to a scalar loop using the same order.
    """
    kh, kw = kernel.shape
    py, px = kh // 2, kw // 2
    padded = np.pad(img, ((py, py), (px, px)), mode="edge")
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            out += kernel[ky, kx] * padded[ky : ky + h, kx : kx + w]
    return out


def _direction_bins(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Quantize gradient direction to {0:horiz, 1:45deg, 2:vert, 3:135deg}."""
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    bins = np.zeros(ang.shape, dtype=np.int8)
    bins[(ang >= 22.5) & (ang < 67.5)] = 1
    bins[(ang >= 67.5) & (ang < 112.5)] = 2
    bins[(ang >= 112.5) & (ang < 157.5)] = 3
    return bins


def canny(img: np.ndarray, low: float, high: float) -> np.ndarray:
    """Gaussian 5x5 (sigma 1.4) -> Sobel -> 4-direction NMS -> hysteresis.

    Returns a 0/255 uint8 edge map. NMS keeps a pixel when its magnitude is >=
    both neighbors along the quantized gradient direction; the 1-pixel image
    border is suppressed. Hysteresis uses 8-connectivity from strong pixels
    (magnitude >= high) through weak ones (>= low).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise VisionError("canny expects a grayscale image")
    if img.shape[0] < 5 or img.shape[1] < 5:
        raise VisionError(f"image {img.shape} smaller than the 5x5 blur kernel")
    if not (0 <= low <= high):
        raise VisionError(f"need 0 <= low <= high, got {low}, {high}")

    blurred = _conv_same(img, gaussian_kernel5())
    gx = _conv_same(blurred, SOBEL_X)
    gy = _conv_same(blurred, SOBEL_Y)
    mag = np.hypot(gx, gy)
    bins = _direction_bins(gx, gy)

    padded = np.pad(mag, 1, mode="constant")
    shifted = {
        (dy, dx): padded[1 + dy : 1 + dy + mag.shape[0], 1 + dx : 1 + dx + mag.shape[1]]
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
        if (dy, dx) != (0, 0)
    }
    neighbor_pairs = {
        0: ((0, -1), (0, 1)),
        1: ((-1, -1), (1, 1)),
        2: ((-1, 0), (1, 0)),
        3: ((1, -1), (-1, 1)),
    }
    keep = np.zeros(mag.shape, dtype=bool)
    for b, (n1, n2) in neighbor_pairs.items():
        sel = bins == b
        keep |= sel & (mag >= shifted[n1]) & (mag >= shifted[n2])
    keep[0, :] = keep[-1, :] = False
    keep[:, 0] = keep[:, -1] = False
    nms = np.where(keep, mag, 0.0)

    strong = nms >= high
    weak = (nms >= low) & ~strong

    edges = strong.copy()
    stack = [tuple(p) for p in np.argwhere(strong)]
    h, w = mag.shape
    while stack:
        y, x = stack.pop()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and weak[ny, nx] and not edges[ny, nx]:
                    edges[ny, nx] = True
                    stack.append((ny, nx))
    return np.where(edges, 255, 0).astype(np.uint8)


# --- Hough ------------------------------------------------------------------

def hough_accumulator(edges: np.ndarray, rho_res: float, theta_res_deg: float):
    """Standard (rho, theta) vote accumulator over all edge pixels.

    rho is measured from the image's horizontal pixel-center axis (x - (w-1)/2),
    which makes the accumulator exactly symmetric under horizontal mirroring
    (round-half-even binning is negation-symmetric about an integer center).
    Returns (acc[n_rho, n_theta], rho_max, thetas_deg, per-pixel rho bins,
    edge xs, edge ys). Bin index = round((rho + rho_max)/rho_res).
    """
    if rho_res <= 0 or theta_res_deg <= 0:
        raise VisionError("hough resolutions must be positive")
    edges = np.asarray(edges)
    ys, xs = np.nonzero(edges)
    thetas_deg = np.arange(0.0, 180.0, theta_res_deg)
    thetas = np.deg2rad(thetas_deg)
    cos_t, sin_t = np.cos(thetas), np.sin(thetas)
    h, w = edges.shape
    rho_max = float(np.ceil(np.hypot(w, h)))
    n_rho = int(round(2 * rho_max / rho_res)) + 1
    acc = np.zeros((n_rho, len(thetas)), dtype=np.int64)
    if len(xs) == 0:
        bins = np.zeros((0, len(thetas)), dtype=np.int64)
        return acc, rho_max, thetas_deg, bins, xs, ys
    xc = xs - (w - 1) / 2
    rho = xc[:, None] * cos_t[None, :] + ys[:, None] * sin_t[None, :]
    bins = np.round((rho + rho_max) / rho_res).astype(np.int64)
    for j in range(len(thetas)):
        acc[:, j] = np.bincount(bins[:, j], minlength=n_rho)
    return acc, rho_max, thetas_deg, bins, xs, ys


def hough_peaks(edges: np.ndarray, rho_res: float, theta_res_deg: float, votes: int):
    """Accumulator cells with at least `votes` supporters.

    Returns a list of (rho, theta_deg, vote_count) sorted by (theta, rho).
    """
    if votes < 1:
        raise VisionError("vote threshold must be >= 1")
    acc, rho_max, thetas_deg, _, _, _ = hough_accumulator(edges, rho_res, theta_res_deg)
    out = []
    rows, cols = np.nonzero(acc >= votes)
    for r, c in sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: (rc[1], rc[0])):
        rho = r * rho_res - rho_max
        out.append((rho, float(thetas_deg[c]), int(acc[r, c])))
    return out


def hough_lines(
    edges: np.ndarray,
    rho_res: float = 1.0,
    theta_res_deg: float = 1.0,
    votes: int = 15,
    min_len: float = 10.0,
    max_gap: float = 4.0,
) -> list[LineSegment]:
    """Convert accumulator peaks to segments by scanning supporting pixels.

    Supporters of a peak are the edge pixels whose rho bin at that theta equals
    the peak bin; they are ordered along the line and split where consecutive
    pixels are more than max_gap apart. Runs shorter than min_len are dropped.
    """
    if votes < 1:
        raise VisionError("vote threshold must be >= 1")
    acc, rho_max, thetas_deg, bins, xs, ys = hough_accumulator(edges, rho_res, theta_res_deg)
    if len(xs) == 0:
        return []
    thetas = np.deg2rad(thetas_deg)
    segments: list[LineSegment] = []
    half_w = (edges.shape[1] - 1) / 2
    rows, cols = np.nonzero(acc >= votes)
    for r, c in sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: (rc[1], rc[0])):
        support = bins[:, c] == r
        sx, sy = xs[support], ys[support]
        # position along the line direction (-sin t, cos t)
        t = -(sx - half_w) * np.sin(thetas[c]) + sy * np.cos(thetas[c])
        order = np.lexsort((sx, sy, t))
        sx, sy, t = sx[order], sy[order], t[order]
        start = 0
        for i in range(1, len(t) + 1):
            if i == len(t) or t[i] - t[i - 1] > max_gap:
                if t[i - 1] - t[start] >= min_len:
                    segments.append(
                        LineSegment(
                            float(sx[start]), float(sy[start]),
                            float(sx[i - 1]), float(sy[i - 1]),
                        )
                    )
                start = i
    return segments


# --- lane grouping and steering ----------------------------------------------

def group_lanes(
    segments: list[LineSegment], img_width: int, slope_min: float = 0.3
) -> tuple[Lane | None, Lane | None]:
    """Split segments into left/right lanes by slope sign and average them.

    Image coordinates put y down, so the left lane has negative slope. Segments
    with |slope| <= slope_min are discarded as near-horizontal; vertical ones
    pick a side by x midpoint. Each side's fitted line is the length-weighted
    average of candidate slopes and intercepts (vertical candidates average in
    x when a side has no finite-slope segments).
    """
    buckets = {"left": [], "right": []}
    for seg in segments:
        s = seg.slope
        if math.isinf(s):
            side = "left" if seg.midpoint_x < img_width / 2 else "right"
        elif s < -slope_min:
            side = "left"
        elif s > slope_min:
            side = "right"
        else:
            continue
        buckets[side].append(seg)

    def fit(side_segments: list[LineSegment]) -> Lane | None:
        if not side_segments:
            return None
        finite = [s for s in side_segments if not math.isinf(s.slope)]
        if finite:
            wsum = sum(s.length for s in finite)
            slope = sum(s.slope * s.length for s in finite) / wsum
            intercept = sum((s.y1 - s.slope * s.x1) * s.length for s in finite) / wsum
            return Lane(slope, intercept)
        wsum = sum(s.length for s in side_segments)
        x = sum(s.midpoint_x * s.length for s in side_segments) / wsum
        return Lane(math.inf, x)

    return fit(buckets["left"]), fit(buckets["right"])


def steering_angle(
    left: Lane | None,
    right: Lane | None,
    img_width: int,
    img_height: int = VIEW_H,
    lane_width_px: float = 60.0,
) -> SteeringEstimate:
    """Aim at the lane midpoint on the look-ahead row (top row of the crop).

    The look-ahead distance is the cropped image height in pixels. A single
    detected lane is offset by half the nominal lane width; no lanes gives a
    straight-ahead zero with confidence "none".
    """
    center = (img_width - 1) / 2
    if left is not None and right is not None:
        x_mid = 0.5 * (left.x_at(0.0) + right.x_at(0.0))
        confidence = "both"
    elif left is not None:
        x_mid = left.x_at(0.0) + lane_width_px / 2
        confidence = "left_only"
    elif right is not None:
        x_mid = right.x_at(0.0) - lane_width_px / 2
        confidence = "right_only"
    else:
        return SteeringEstimate(0.0, "none")
    angle = math.degrees(math.atan2(x_mid - center, img_height))
    return SteeringEstimate(angle, confidence)


class AngleSmoother:
    """Running mean over the last n angles; cold start averages what exists."""

    def __init__(self, n: int = 5):
        if n < 1:
            raise VisionError("smoothing window must be >= 1")
        self._buf = deque(maxlen=n)

    def update(self, angle: float) -> float:
        self._buf.append(angle)
        return sum(self._buf) / len(self._buf)


@dataclass
class LaneDebug:
    gray: np.ndarray
    mask: np.ndarray
    edges: np.ndarray
    segments: list[LineSegment]
    left: Lane | None
    right: Lane | None
    raw: SteeringEstimate


class LaneFollower:
    """Full per-frame pipeline with angle smoothing. One instance per stream."""

    def __init__(self, params: VisionParams = VisionParams()):
        self.params = params
        self._smoother = AngleSmoother(params.smooth_n)
        self.last_debug: LaneDebug | None = None

    def process(self, frame: np.ndarray, keep_debug: bool = False) -> SteeringEstimate:
        p = self.params
        gray = preprocess(frame)
        mask = white_mask(gray, p.mask_lo)
        edges = canny(mask, p.canny_low, p.canny_high)
        segments = hough_lines(
            edges, p.hough_rho_res, p.hough_theta_res, p.hough_votes,
            p.hough_min_len, p.hough_max_gap,
        )
        left, right = group_lanes(segments, gray.shape[1], p.slope_min)
        raw = steering_angle(left, right, gray.shape[1], gray.shape[0], p.lane_width_px)
        smoothed = self._smoother.update(raw.angle_deg)
        if keep_debug:
            self.last_debug = LaneDebug(gray, mask, edges, segments, left, right, raw)
        return SteeringEstimate(smoothed, raw.confidence)

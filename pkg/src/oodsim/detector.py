"""Latent-space OOD scoring: per-dimension KL divergence summed over a detector subset.

Each latent dimension carries KL(N(mu, sigma^2) || N(0, 1)) in closed form; the
score is the sum over the calibrated detector subset. The decision threshold is
a nearest-rank percentile of in-distribution scores, and flagging is strictly
greater-than, so a score exactly at the threshold stays in-distribution.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .nn import LatentStats, Model, encode


class DetectorError(Exception):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    subset: tuple[int, ...]  # ordered latent indices forming the detector
    threshold: float
    latent_dim: int

    def __post_init__(self):
        if not self.subset:
            raise DetectorError("detector subset must be non-empty")
        if any(i < 0 or i >= self.latent_dim for i in self.subset):
            raise DetectorError(
                f"subset indices {self.subset} out of range for D={self.latent_dim}"
            )
        if not (self.threshold >= 0):
            raise DetectorError(f"threshold must be >= 0, got {self.threshold}")


@dataclass(frozen=True)
class OODResult:
    seq: int
    kl: np.ndarray  # per-dimension KL vector, length D
    score: float
    flagged: bool
    ingest_ns: int
    complete_ns: int


def kl_per_dim(stats: LatentStats) -> np.ndarray:
    """Closed-form KL(N(mu_i, e^logvar_i) || N(0,1)) per latent dimension."""
    mu = np.asarray(stats.mu, dtype=np.float64)
    logvar = np.asarray(stats.logvar, dtype=np.float64)
    var = np.exp(logvar)
    if not np.isfinite(var).all():
        bad = int(np.flatnonzero(~np.isfinite(var))[0])
        raise DetectorError(f"exp(logvar) overflowed at dimension {bad}")
    kl = 0.5 * (mu * mu + var - logvar - 1.0)
    # non-negative analytically; clip stray -0.0/rounding dust
    return np.maximum(kl, 0.0)


def ood_score(kl: np.ndarray, subset) -> float:
    subset = list(subset)
    if not subset:
        raise DetectorError("empty detector subset")
    if any(i < 0 or i >= len(kl) for i in subset):
        raise DetectorError(f"subset {subset} out of range for {len(kl)} dims")
    return float(np.sum(np.asarray(kl, dtype=np.float64)[subset]))


def select_detectors(calibration_kl: np.ndarray, k: int) -> tuple[int, ...]:
    """Pick the k latent dims with highest mean KL over the calibration set.

    Ties break toward the lower index; the result is sorted ascending.
    """
    kl = np.asarray(calibration_kl, dtype=np.float64)
    if kl.ndim != 2 or kl.shape[0] < 1:
        raise DetectorError(f"calibration KL must be a non-empty NxD matrix, got {kl.shape}")
    d = kl.shape[1]
    if not (1 <= k <= d):
        raise DetectorError(f"k={k} out of range [1, {d}]")
    means = kl.mean(axis=0)
    order = np.argsort(-means, kind="stable")  # stable keeps lower index first on ties
    return tuple(sorted(int(i) for i in order[:k]))


def nearest_rank(n: int, quantile: float) -> int:
    """1-based nearest-rank index ceil(q*n), guarding float dust in q*n.

    0.8 * 5 evaluates to 4.000000000000001 in binary floating point; without
    the guard ceil would land one rank too high whenever q*n is integral.
    """
    if n < 1:
        raise DetectorError("need at least one sample")
    if not (0 < quantile <= 1):
        raise DetectorError(f"quantile must be in (0, 1], got {quantile}")
    return max(1, math.ceil(quantile * n - 1e-9))


def calibrate_threshold(scores, quantile: float) -> float:
    """Nearest-rank percentile: the ceil(q*N)-th smallest score (1-based)."""
    scores = list(scores)
    if not scores:
        raise DetectorError("cannot calibrate on empty scores")
    ordered = sorted(scores)
    return float(ordered[nearest_rank(len(ordered), quantile) - 1])


def classify(score: float, config: DetectorConfig) -> str:
    """'ood' iff the score strictly exceeds the threshold, else 'in_distribution'."""
    if not math.isfinite(score):
        raise DetectorError(f"non-finite score {score}")
    return "ood" if score > config.threshold else "in_distribution"


class VaeScorer:
    """Scores frames by encoding them and summing subset KL. Immutable, thread-safe."""

    def __init__(self, model: Model, config: DetectorConfig, preprocess=None):
        if config.latent_dim != model.latent_dim:
            raise DetectorError(
                f"detector D={config.latent_dim} != model D={model.latent_dim}"
            )
        self.model = model
        self.config = config
        self._preprocess = preprocess

    def latent_stats(self, image: np.ndarray) -> LatentStats:
        if self._preprocess is not None:
            image = self._preprocess(image)
        return encode(self.model, image)

    def kl_vector(self, image: np.ndarray) -> np.ndarray:
        return kl_per_dim(self.latent_stats(image))

    def score_frame(self, frame, clock) -> OODResult:
        ingest = clock.now_ns()
        kl = self.kl_vector(frame.image)
        score = ood_score(kl, self.config.subset)
        return OODResult(
            seq=frame.seq,
            kl=kl,
            score=score,
            flagged=score > self.config.threshold,
            ingest_ns=ingest,
            complete_ns=clock.now_ns(),
        )


@dataclass
class Calibration:
    """Calibration artifacts: per-frame KL rows and derived scores."""

    kl_matrix: np.ndarray  # N x D
    subset: tuple[int, ...]
    scores: list[float] = field(default_factory=list)

    @classmethod
    def from_kl(cls, kl_matrix: np.ndarray, k: int) -> "Calibration":
        subset = select_detectors(kl_matrix, k)
        scores = [ood_score(row, subset) for row in np.asarray(kl_matrix)]
        return cls(np.asarray(kl_matrix), subset, scores)

    def detector_config(self, quantile: float) -> DetectorConfig:
        threshold = calibrate_threshold(self.scores, quantile)
        return DetectorConfig(
            subset=self.subset,
            threshold=threshold,
            latent_dim=self.kl_matrix.shape[1],
        )


def write_scores_csv(path, scores, seqs=None) -> None:
    """Calibration score export: rows of (seq, score)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seq", "score"])
        for i, s in enumerate(scores):
            seq = seqs[i] if seqs is not None else i
            w.writerow([seq, repr(float(s))])


def read_scores_csv(path) -> list[tuple[int, float]]:
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["seq", "score"]:
            raise DetectorError(f"bad scores header in {path}: {header}")
        for seq, score in reader:
            out.append((int(seq), float(score)))
    return out

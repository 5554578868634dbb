"""Compressed phase signatures, loop-closure detection and a Haar sparsity diagnostic.

Signatures are ``y = C phi`` with ``C`` an ``n x (W*H)`` Gaussian matrix whose
row ``r`` is drawn from a PCG64 stream seeded with ``(seed, r)`` using numpy's
ziggurat ``standard_normal``. Rows are regenerated on demand, never stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import PhaseImage
from .errors import DimensionMismatchError


@dataclass(frozen=True)
class CompressorConfig:
    m_rows: int = 100
    seed: int = 0
    row_scale: Optional[float] = None   # None -> 1/sqrt(m_rows)

    def __post_init__(self):
        if int(self.m_rows) < 1:
            raise ValueError("m_rows must be positive")
        if self.row_scale is not None and not self.row_scale > 0:
            raise ValueError("row_scale must be positive")

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.m_rows) if self.row_scale is None else float(self.row_scale)

    def compression_ratio(self, width: int, height: int) -> float:
        return width * height / self.m_rows


def matrix_row(cfg: CompressorConfig, r: int, length: int) -> np.ndarray:
    """Row ``r`` of the sensing matrix, entries N(0, scale^2)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(cfg.seed), int(r)])))
    return rng.standard_normal(length) * cfg.scale


def _flatten(image) -> np.ndarray:
    if isinstance(image, PhaseImage):
        return image.phase.reshape(-1)        # invalid pixels are stored as 0
    a = getattr(image, "intensity", image)
    a = np.asarray(a, dtype=np.float64)
    return np.where(np.isfinite(a), a, 0.0).reshape(-1)


def compress_many(images: Sequence, cfg: CompressorConfig) -> np.ndarray:
    """Signatures for several equally sized images; each matrix row is drawn once."""
    flats = [_flatten(im) for im in images]
    if not flats:
        return np.zeros((0, cfg.m_rows))
    lengths = {f.size for f in flats}
    if len(lengths) != 1:
        raise DimensionMismatchError(f"images differ in size: {sorted(lengths)}")
    X = np.stack(flats)
    L = X.shape[1]
    out = np.empty((len(flats), cfg.m_rows))
    for r in range(cfg.m_rows):
        out[:, r] = X @ matrix_row(cfg, r, L)
    return out


def compress(image, cfg: CompressorConfig) -> np.ndarray:
    return compress_many([image], cfg)[0]


def distance(y1, y2) -> float:
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    if y1.shape != y2.shape:
        raise DimensionMismatchError(f"signature lengths differ: {y1.shape} vs {y2.shape}")
    d = y2 - y1
    return float(d @ d)


@dataclass
class LoopCandidate:
    frame_a: int
    frame_b: int
    distance: float
    accepted: bool = True
    threshold: float = float("nan")

    def __post_init__(self):
        if not self.frame_a < self.frame_b:
            raise ValueError("frame_a must precede frame_b")
        if self.distance < 0:
            raise ValueError("distance must be non-negative")

    def to_dict(self) -> dict:
        return {"frame_a": self.frame_a, "frame_b": self.frame_b, "distance": self.distance,
                "accepted": self.accepted, "threshold": self.threshold}


@dataclass
class DetectorConfig:
    min_gap: int = 5
    tau_ratio: float = 0.3
    tau: Optional[float] = None         # absolute threshold overrides the adaptive one


@dataclass
class LoopDetector:
    """All-history detector; the adaptive threshold uses every pair seen so far."""

    cfg: DetectorConfig = field(default_factory=DetectorConfig)
    history: list = field(default_factory=list)
    _pair_d: list = field(default_factory=list)

    def threshold(self) -> float:
        if self.cfg.tau is not None:
            return float(self.cfg.tau)
        if not self._pair_d:
            return float("nan")
        return self.cfg.tau_ratio * float(np.median(self._pair_d))

    def add(self, y) -> Optional[LoopCandidate]:
        """Append a signature; return the best loop candidate for it, if any."""
        y = np.asarray(y, dtype=np.float64)
        dists = [distance(h, y) for h in self.history]
        found = None
        if dists:
            found = detect(self.history, y, self.cfg, prior=self._pair_d + dists)
        self._pair_d.extend(dists)
        self.history.append(y)
        return found


def detect(history: Sequence, current, cfg: Optional[DetectorConfig] = None,
           prior: Optional[Sequence[float]] = None) -> Optional[LoopCandidate]:
    """Best earlier frame at least ``min_gap`` back whose distance is under the threshold.

    ``prior`` holds the pairwise distances the adaptive threshold is based on;
    by default these are the distances from ``current`` to every history entry.
    """
    cfg = cfg or DetectorConfig()
    if len(history) == 0:
        raise ValueError("history is empty")
    b = len(history)
    d = np.array([distance(h, current) for h in history])
    if cfg.tau is not None:
        tau = float(cfg.tau)
    else:
        pool = d if prior is None or len(prior) == 0 else np.asarray(prior, float)
        tau = cfg.tau_ratio * float(np.median(pool))
    eligible = np.arange(b) <= b - cfg.min_gap
    if not eligible.any():
        return None
    a = int(np.argmin(np.where(eligible, d, np.inf)))
    if not d[a] < tau:
        return None
    return LoopCandidate(a, b, float(d[a]), True, tau)


# -- Haar sparsity diagnostic --------------------------------------------------------

def _pad_pow2(a: np.ndarray) -> np.ndarray:
    h, w = a.shape
    H = 1 << max(0, int(np.ceil(np.log2(max(h, 1)))))
    W = 1 << max(0, int(np.ceil(np.log2(max(w, 1)))))
    out = np.zeros((H, W))
    out[:h, :w] = a
    return out


def _haar_1d(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a.copy(), axis, 0)
    n = a.shape[0]
    while n > 1:
        even, odd = a[0:n:2].copy(), a[1:n:2].copy()
        a[: n // 2] = (even + odd) / np.sqrt(2.0)
        a[n // 2: n] = (even - odd) / np.sqrt(2.0)
        n //= 2
    return np.moveaxis(a, 0, axis)


def _ihaar_1d(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a.copy(), axis, 0)
    N = a.shape[0]
    n = 2
    while n <= N:
        s, d = a[: n // 2].copy(), a[n // 2: n].copy()
        a[0:n:2] = (s + d) / np.sqrt(2.0)
        a[1:n:2] = (s - d) / np.sqrt(2.0)
        n *= 2
    return np.moveaxis(a, 0, axis)


def haar2d(image: np.ndarray) -> np.ndarray:
    """Full orthonormal 2-D Haar transform (rows then columns), zero-padded to powers of two."""
    return _haar_1d(_haar_1d(_pad_pow2(np.asarray(image, float)), 1), 0)


def ihaar2d(coeffs: np.ndarray) -> np.ndarray:
    return _ihaar_1d(_ihaar_1d(np.asarray(coeffs, float), 0), 1)


def sparsity_report(image) -> float:
    """L1 norm of the Haar coefficients of a phase or intensity image."""
    if isinstance(image, PhaseImage):
        a = image.phase
    else:
        a = np.asarray(getattr(image, "intensity", image), dtype=np.float64)
    return float(np.abs(haar2d(a)).sum())


# -- estimator wrapper ---------------------------------------------------------------

class CompressiveSignature(TransformerMixin, BaseEstimator):
    """Phase images in, ``(n_images, m_rows)`` signatures out."""

    def __init__(self, m_rows: int = 100, seed: int = 0, row_scale: Optional[float] = None):
        self.m_rows = m_rows
        self.seed = seed
        self.row_scale = row_scale

    def fit(self, X, y=None):
        images = list(X)
        if not images:
            raise ValueError("need at least one image to fix the signal length")
        self.config_ = CompressorConfig(self.m_rows, self.seed, self.row_scale)
        self.n_features_in_ = _flatten(images[0]).size
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "config_")
        images = list(X)
        for im in images:
            if _flatten(im).size != self.n_features_in_:
                raise DimensionMismatchError(
                    f"image has {_flatten(im).size} pixels, fitted on {self.n_features_in_}")
        return compress_many(images, self.config_)

"""Phase measuring profilometry: sine patterns, phase decoding, triangulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import TWO_PI, PhaseImage, PointCloud, RawImage, SensorRig
from .errors import DimensionMismatchError


@dataclass(frozen=True)
class PmpConfig:
    n_patterns: int = 4
    brightness_a: float = 0.5
    modulation_b: float = 0.4
    modulation_threshold: float = 0.02

    def __post_init__(self):
        if int(self.n_patterns) < 3:
            raise ValueError("PMP needs at least 3 phase shifts")
        if not 0.0 <= self.brightness_a <= 1.0:
            raise ValueError("brightness_a must lie in [0, 1]")
        if not 0.0 < self.modulation_b <= min(self.brightness_a, 1.0 - self.brightness_a) + 1e-15:
            raise ValueError("modulation_b must lie in (0, min(A, 1 - A)]")

    def shifts(self) -> np.ndarray:
        n = np.arange(1, self.n_patterns + 1)
        return TWO_PI * n / self.n_patterns


def pattern_value(cfg: PmpConfig, row: np.ndarray, n: int, proj_height: int) -> np.ndarray:
    """Intensity of pattern ``n`` (1-based) at continuous projector row ``row``."""
    return cfg.brightness_a + cfg.modulation_b * np.cos(
        TWO_PI * np.asarray(row) / proj_height - TWO_PI * n / cfg.n_patterns)


def generate_patterns(cfg: PmpConfig, rig: SensorRig) -> list[RawImage]:
    rows = np.arange(rig.proj_height, dtype=float)[:, None]
    out = []
    for n in range(1, cfg.n_patterns + 1):
        col = pattern_value(cfg, rows, n, rig.proj_height)
        out.append(RawImage(np.broadcast_to(col, (rig.proj_height, rig.proj_width))))
    return out


def decode_phase(images, cfg: PmpConfig) -> PhaseImage:
    """Wrapped phase from N phase-shifted captures, masked where modulation is too weak."""
    stack = np.stack([getattr(im, "intensity", im) for im in images]).astype(np.float64)
    if stack.ndim != 3:
        raise DimensionMismatchError("expected a list of equally sized 2-D images")
    n = stack.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 images to decode, got {n}")
    if n != cfg.n_patterns:
        raise ValueError(f"config expects {cfg.n_patterns} patterns, got {n}")
    theta = TWO_PI * np.arange(1, n + 1) / n
    S = np.tensordot(np.sin(theta), stack, axes=1)
    C = np.tensordot(np.cos(theta), stack, axes=1)
    phi = np.mod(np.arctan2(S, C), TWO_PI)
    phi[phi >= TWO_PI] = 0.0
    modulation = (2.0 / n) * np.hypot(S, C)
    return PhaseImage(phi, modulation >= cfg.modulation_threshold)


def phase_to_row(phi, proj_height: int):
    return np.asarray(phi) * proj_height / TWO_PI


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))


def camera_rays(rig: SensorRig, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Origin and (unnormalised) direction of camera rays, device frame."""
    d_cam = np.stack([(u - rig.cam_cx) / rig.cam_fx, (v - rig.cam_cy) / rig.cam_fy,
                      np.ones_like(u, dtype=float)], axis=-1)
    return rig.camera_center, d_cam @ rig.extrinsic_rotation


@dataclass
class TriangulationReport:
    valid_pixels: int = 0
    points: int = 0
    degenerate: int = 0
    behind: int = 0


def triangulate(phase: PhaseImage, rig: SensorRig, return_report: bool = False,
                jump_ratio: float = 0.03):
    """Intersect each valid pixel's camera ray with its projector row plane.

    A phase value fixes the projector row, so the constraint is the plane
    ``y - q z = 0`` with ``q = (row - C_y) / f_y`` through the projector centre.
    Normals come from the pixel grid and are zero where a neighbour is missing
    or the depth jumps by more than ``jump_ratio``.
    """
    if phase.shape != (rig.cam_height, rig.cam_width):
        raise DimensionMismatchError("phase image does not match the rig's camera size")
    report = TriangulationReport(valid_pixels=int(phase.valid.sum()))
    vv, uu = np.nonzero(phase.valid)
    u, v = uu.astype(float), vv.astype(float)
    q = (phase_to_row(phase.phase[vv, uu], rig.proj_height) - rig.proj_cy) / rig.proj_fy
    c, d = camera_rays(rig, u, v)
    n_dot_d = d[:, 1] - q * d[:, 2]
    n_dot_c = c[1] - q * c[2]
    scale = np.linalg.norm(d, axis=1) * np.sqrt(1.0 + q * q)
    degenerate = np.abs(n_dot_d) < 1e-12 * scale
    lam = np.where(degenerate, np.nan, -n_dot_c / np.where(degenerate, 1.0, n_dot_d))
    pts = c + lam[:, None] * d
    ok = ~degenerate & (lam > 0) & (pts[:, 2] > 0)
    report.degenerate = int(degenerate.sum())
    report.behind = int((~degenerate & ~ok).sum())

    grid = np.full((rig.cam_height, rig.cam_width, 3), np.nan)
    grid[vv[ok], uu[ok]] = pts[ok]
    normals = _grid_normals(grid, jump_ratio)[vv[ok], uu[ok]]
    cloud = PointCloud(pts[ok], np.column_stack([u[ok], v[ok]]), normals)
    report.points = len(cloud)
    return (cloud, report) if return_report else cloud


def _grid_normals(grid: np.ndarray, jump_ratio: float) -> np.ndarray:
    P = grid
    du = np.full_like(P, np.nan)
    dv = np.full_like(P, np.nan)
    du[:, 1:-1] = P[:, 2:] - P[:, :-2]
    dv[1:-1, :] = P[2:, :] - P[:-2, :]
    z = P[..., 2]
    jump = np.zeros(z.shape, dtype=bool)
    with np.errstate(invalid="ignore"):
        jump[:, 1:-1] |= np.abs(P[:, 2:, 2] - z[:, 1:-1]) > jump_ratio * z[:, 1:-1]
        jump[:, 1:-1] |= np.abs(P[:, :-2, 2] - z[:, 1:-1]) > jump_ratio * z[:, 1:-1]
        jump[1:-1, :] |= np.abs(P[2:, :, 2] - z[1:-1, :]) > jump_ratio * z[1:-1, :]
        jump[1:-1, :] |= np.abs(P[:-2, :, 2] - z[1:-1, :]) > jump_ratio * z[1:-1, :]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm
        flip = np.sum(n * P, axis=-1) > 0
    n[flip] *= -1.0
    bad = ~np.isfinite(n).all(axis=-1) | jump | (norm[..., 0] == 0)
    n[bad] = 0.0
    return n


class PmpDecoder(TransformerMixin, BaseEstimator):
    """Transformer wrapper: stacks of raw captures in, phase images out."""

    def __init__(self, n_patterns: int = 4, brightness_a: float = 0.5,
                 modulation_b: float = 0.4, modulation_threshold: float = 0.02):
        self.n_patterns = n_patterns
        self.brightness_a = brightness_a
        self.modulation_b = modulation_b
        self.modulation_threshold = modulation_threshold

    def _config(self) -> PmpConfig:
        return PmpConfig(self.n_patterns, self.brightness_a, self.modulation_b,
                         self.modulation_threshold)

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X) -> list[PhaseImage]:
        cfg = getattr(self, "config_", None) or self._config()
        return [decode_phase(stack, cfg) for stack in X]

"""Domain types shared by every stage: images, rig calibration, poses, clouds."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CalibrationError, DimensionMismatchError

TWO_PI = 2.0 * np.pi


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PhaseImage:
    """Wrapped phase per camera pixel plus a validity mask.

    ``phase[v, u]`` holds the value for pixel column ``u`` and row ``v``.
    Invalid pixels are flagged in ``valid`` and their stored phase is zeroed.
    """

    phase: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        phase = np.array(self.phase, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if phase.ndim != 2 or phase.shape != valid.shape:
            raise DimensionMismatchError(
                f"phase {phase.shape} and mask {valid.shape} must be equal 2-D shapes")
        valid &= np.isfinite(phase)
        phase[~valid] = 0.0
        bad = valid & ((phase < 0.0) | (phase >= TWO_PI))
        if bad.any():
            raise ValueError(f"{int(bad.sum())} valid phase values outside [0, 2pi)")
        object.__setattr__(self, "phase", _frozen(phase))
        object.__setattr__(self, "valid", _frozen(valid))

    @property
    def height(self) -> int:
        return self.phase.shape[0]

    @property
    def width(self) -> int:
        return self.phase.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.phase.shape

    @classmethod
    def from_nan(cls, arr: np.ndarray) -> "PhaseImage":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(np.nan_to_num(arr, nan=0.0), np.isfinite(arr))

    def to_nan(self) -> np.ndarray:
        out = self.phase.copy()
        out[~self.valid] = np.nan
        return out


@dataclass(frozen=True, eq=False)
class RawImage:
    intensity: np.ndarray

    def __post_init__(self):
        a = np.clip(np.array(self.intensity, dtype=np.float64), 0.0, 1.0)
        if a.ndim != 2:
            raise DimensionMismatchError("raw image must be 2-D")
        object.__setattr__(self, "intensity", _frozen(a))

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def width(self) -> int:
        return self.intensity.shape[1]


@dataclass(frozen=True, eq=False)
class SensorRig:
    """Camera/projector calibration.

    The device frame is the projector frame. ``extrinsic_rotation`` and
    ``extrinsic_translation`` map device coordinates into the camera frame.
    The projector only needs its row intrinsics for phase prediction;
    ``proj_fx``/``proj_cx`` bound the lit region horizontally when rendering
    and default to ``proj_fy`` and half the projector width.
    """

    cam_fx: float
    cam_fy: float
    cam_cx: float
    cam_cy: float
    cam_width: int
    cam_height: int
    proj_fy: float
    proj_cy: float
    proj_height: int
    proj_width: int
    extrinsic_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    extrinsic_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    proj_fx: Optional[float] = None
    proj_cx: Optional[float] = None

    def __post_init__(self):
        R = np.array(self.extrinsic_rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.extrinsic_translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0.0):
            raise CalibrationError("extrinsic_rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise CalibrationError("extrinsic_rotation must have determinant +1")
        for name in ("cam_fx", "cam_fy", "proj_fy"):
            if not getattr(self, name) > 0:
                raise CalibrationError(f"{name} must be positive")
        for name in ("cam_width", "cam_height", "proj_height", "proj_width"):
            if not int(getattr(self, name)) > 0:
                raise CalibrationError(f"{name} must be positive")
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.proj_fx is None:
            object.__setattr__(self, "proj_fx", float(self.proj_fy))
        if self.proj_cx is None:
            object.__setattr__(self, "proj_cx", self.proj_width / 2.0)
        if not self.proj_fx > 0:
            raise CalibrationError("proj_fx must be positive")
        object.__setattr__(self, "extrinsic_rotation", _frozen(R))
        object.__setattr__(self, "extrinsic_translation", _frozen(t))
        object.__setattr__(self, "_M", _frozen(compose_projection(self, check=False)))

    @property
    def K_cam(self) -> np.ndarray:
        return np.array([[self.cam_fx, 0.0, self.cam_cx],
                         [0.0, self.cam_fy, self.cam_cy],
                         [0.0, 0.0, 1.0]])

    @property
    def M(self) -> np.ndarray:
        """3x4 camera projection matrix acting on device-frame points."""
        return self._M

    @property
    def camera_center(self) -> np.ndarray:
        """Camera optical centre in the device frame."""
        return -self.extrinsic_rotation.T @ self.extrinsic_translation

    def to_dict(self) -> dict:
        return {
            "cam_fx": float(self.cam_fx), "cam_fy": float(self.cam_fy),
            "cam_cx": float(self.cam_cx), "cam_cy": float(self.cam_cy),
            "cam_width": self.cam_width, "cam_height": self.cam_height,
            "proj_fy": float(self.proj_fy), "proj_cy": float(self.proj_cy),
            "proj_height": self.proj_height, "proj_width": self.proj_width,
            "proj_fx": float(self.proj_fx), "proj_cx": float(self.proj_cx),
            "extrinsic_rotation": self.extrinsic_rotation.ravel().tolist(),
            "extrinsic_translation": self.extrinsic_translation.tolist(),
            "M": self.M.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorRig":
        kw = {k: d[k] for k in (
            "cam_fx", "cam_fy", "cam_cx", "cam_cy", "cam_width", "cam_height",
            "proj_fy", "proj_cy", "proj_height", "proj_width")}
        kw["extrinsic_rotation"] = np.asarray(d.get("extrinsic_rotation", np.eye(3).ravel()),
                                              dtype=float).reshape(3, 3)
        kw["extrinsic_translation"] = np.asarray(d.get("extrinsic_translation", [0, 0, 0]),
                                                 dtype=float)
        kw["proj_fx"] = d.get("proj_fx")
        kw["proj_cx"] = d.get("proj_cx")
        rig = cls(**kw)
        if "M" in d and not np.allclose(np.asarray(d["M"], float).reshape(3, 4), rig.M,
                                        atol=1e-9, rtol=1e-9):
            raise CalibrationError("stored M disagrees with intrinsics/extrinsics")
        return rig


def compose_projection(rig: SensorRig, check: bool = True) -> np.ndarray:
    """M = [K_c R_cp | K_c t_cp]."""
    R = np.asarray(rig.extrinsic_rotation, dtype=float)
    t = np.asarray(rig.extrinsic_translation, dtype=float)
    if check and (not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0.0)
                  or abs(np.linalg.det(R) - 1.0) > 1e-9):
        raise CalibrationError("extrinsic_rotation is not a proper rotation")
    K = np.array([[rig.cam_fx, 0.0, rig.cam_cx], [0.0, rig.cam_fy, rig.cam_cy], [0.0, 0.0, 1.0]])
    return np.hstack([K @ R, (K @ t)[:, None]])


def look_at_rotation(forward: np.ndarray, down_hint=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Rotation whose columns are the x/y/z axes of a frame looking along ``forward``."""
    z = np.asarray(forward, float)
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(down_hint, float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def default_rig(width: int = 640, height: int = 480, baseline: float = 0.2,
                standoff: float = 1.2, focal: float = 800.0) -> SensorRig:
    """Camera above the projector by ``baseline`` metres, toed in on a point at ``standoff``.

    Intrinsics scale with ``width`` so small test renders keep the same field of view.
    """
    s = width / 640.0
    c = np.array([0.0, -baseline, 0.0])
    R_pc = look_at_rotation(np.array([0.0, 0.0, standoff]) - c)
    R_cp = R_pc.T
    return SensorRig(
        cam_fx=focal * s, cam_fy=focal * s, cam_cx=width / 2.0, cam_cy=height / 2.0,
        cam_width=width, cam_height=height,
        proj_fy=focal * s, proj_cy=height / 2.0, proj_height=height, proj_width=width,
        extrinsic_rotation=R_cp, extrinsic_translation=-R_cp @ c,
    )


@dataclass(frozen=True)
class EulerPose:
    """Six-parameter motion: translation in metres, Z-Y-X Euler angles in radians."""

    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.alpha, self.beta, self.gamma])

    @classmethod
    def from_vector(cls, v) -> "EulerPose":
        v = np.asarray(v, dtype=float).ravel()
        if v.shape != (6,):
            raise ValueError("pose vector must have 6 entries")
        return cls(*map(float, v))

    def to_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        return euler_to_matrix(self)

    def to_homogeneous(self) -> np.ndarray:
        R, t = self.to_matrix()
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = t
        return T

    @classmethod
    def from_matrix(cls, R: np.ndarray, t=(0.0, 0.0, 0.0)) -> "EulerPose":
        return matrix_to_euler(R, t)

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("dx", "dy", "dz", "alpha", "beta", "gamma")}


def rotation_zyx(alpha, beta, gamma) -> np.ndarray:
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    return np.array([
        [cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa],
        [sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa],
        [-sb, cb * sa, cb * ca],
    ])


def euler_to_matrix(p: EulerPose) -> tuple[np.ndarray, np.ndarray]:
    """R = Rz(gamma) Ry(beta) Rx(alpha), t = (dx, dy, dz)."""
    return rotation_zyx(p.alpha, p.beta, p.gamma), np.array([p.dx, p.dy, p.dz])


def matrix_to_euler(R: np.ndarray, t=(0.0, 0.0, 0.0)) -> EulerPose:
    R = np.asarray(R, dtype=float)
    beta = np.arctan2(-R[2, 0], np.hypot(R[0, 0], R[1, 0]))
    alpha = np.arctan2(R[2, 1], R[2, 2])
    gamma = np.arctan2(R[1, 0], R[0, 0])
    t = np.asarray(t, dtype=float)
    return EulerPose(float(t[0]), float(t[1]), float(t[2]), float(alpha), float(beta), float(gamma))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points in metres. ``source_pixel`` holds the (u, v) camera pixel each point came from."""

    points: np.ndarray
    source_pixel: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))
        for name, width in (("source_pixel", 2), ("normals", 3)):
            val = getattr(self, name)
            if val is not None:
                val = np.array(val, dtype=np.float64).reshape(-1, width)
                if len(val) != len(pts):
                    raise DimensionMismatchError(f"{name} length {len(val)} != {len(pts)} points")
                object.__setattr__(self, name, _frozen(val))

    def __len__(self) -> int:
        return len(self.points)

    def in_front(self) -> bool:
        return bool((self.points[:, 2] > 0).all())

    def subset(self, idx) -> "PointCloud":
        sp = None if self.source_pixel is None else self.source_pixel[idx]
        nm = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], sp, nm)

    def subsample(self, max_points: Optional[int]) -> "PointCloud":
        """Deterministic uniform-stride subsample down to at most ``max_points``."""
        if max_points is None or len(self) <= max_points:
            return self
        idx = np.linspace(0, len(self) - 1, max_points).round().astype(int)
        return self.subset(idx)

    def transformed(self, T: np.ndarray) -> "PointCloud":
        R, t = T[:3, :3], T[:3, 3]
        nm = None if self.normals is None else self.normals @ R.T
        return PointCloud(self.points @ R.T + t, self.source_pixel, nm)


@dataclass(frozen=True)
class Roi:
    u_min: int
    u_max: int
    v_min: int
    v_max: int

    def validate(self, width: int, height: int) -> "Roi":
        if not (0 <= self.u_min < self.u_max <= width and 0 <= self.v_min < self.v_max <= height):
            raise ValueError(f"ROI {self} outside a {width}x{height} image")
        if self.area < 100:
            raise ValueError("ROI must contain at least 100 pixels")
        return self

    @property
    def area(self) -> int:
        return (self.u_max - self.u_min) * (self.v_max - self.v_min)

    def contains(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return (u >= self.u_min) & (u < self.u_max) & (v >= self.v_min) & (v < self.v_max)


@dataclass(frozen=True, eq=False)
class Frame:
    phase: PhaseImage
    cloud: PointCloud
    gt_pose: Optional[np.ndarray] = None  # 4x4 device-to-world


@dataclass(eq=False)
class Dataset:
    rig: SensorRig
    frames: list[Frame] = field(default_factory=list)

    def __post_init__(self):
        for i, fr in enumerate(self.frames):
            if fr.phase.shape != (self.rig.cam_height, self.rig.cam_width):
                raise DimensionMismatchError(
                    f"frame {i}: phase image {fr.phase.shape[::-1]} does not match rig "
                    f"{self.rig.cam_width}x{self.rig.cam_height}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def gt_poses(self) -> Optional[list[np.ndarray]]:
        if any(f.gt_pose is None for f in self.frames):
            return None
        return [f.gt_pose for f in self.frames]

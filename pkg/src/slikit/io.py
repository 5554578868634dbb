"""On-disk formats: PFM phase images, PLY clouds/meshes, TUM trajectories, g2o graphs."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.spatial.transform import Rotation

from .core import Dataset, Frame, PhaseImage, PointCloud, SensorRig
from .errors import (CalibrationError, CalibrationMissingError, DataError,
                     DimensionMismatchError, TrajectoryFormatError)

CALIB_FILE = "calib.json"
TRAJ_FILE = "gt_trajectory.tum"


# -- PFM -------------------------------------------------------------------

def write_pfm(path, image: np.ndarray) -> None:
    """Grayscale little-endian PFM. NaN marks invalid pixels."""
    a = np.asarray(image, dtype="<f4")
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(a).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise DataError(f"{path}: not a grayscale PFM (header {header!r})")
        dims = f.readline().split()
        scale = float(f.readline().strip())
        w, h = int(dims[0]), int(dims[1])
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h:
        raise DimensionMismatchError(f"{path}: expected {w * h} floats, found {data.size}")
    return np.flipud(data.reshape(h, w)).astype(np.float32)


def save_phase(path, phase: PhaseImage) -> None:
    write_pfm(path, phase.to_nan())


def load_phase(path) -> PhaseImage:
    return PhaseImage.from_nan(read_pfm(path).astype(np.float64))


# -- PLY / OBJ -------------------------------------------------------------

def write_ply_points(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    vert = np.empty(len(pts), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
    vert["x"], vert["y"], vert["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    PlyData([PlyElement.describe(vert, "vertex")], text=False, byte_order="<").write(str(path))


def read_ply_points(path) -> np.ndarray:
    v = PlyData.read(str(path))["vertex"]
    return np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)


def read_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices (n, 3) and triangle indices (m, 3) from a PLY or OBJ file."""
    path = Path(path)
    if path.suffix.lower() == ".obj":
        verts, faces = [], []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise DataError(f"{path}:{lineno}: only triangular faces are supported")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
        return np.asarray(verts, float).reshape(-1, 3), np.asarray(faces, int).reshape(-1, 3)
    ply = PlyData.read(str(path))
    v = ply["vertex"]
    verts = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
    face_el = ply["face"]
    key = "vertex_indices" if "vertex_indices" in face_el.data.dtype.names else "vertex_index"
    faces = [np.asarray(f, int) for f in face_el[key]]
    if any(len(f) != 3 for f in faces):
        raise DataError(f"{path}: only triangular faces are supported")
    return verts, np.asarray(faces, int).reshape(-1, 3)


def write_mesh_ply(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    vert = np.array([tuple(v) for v in vertices], dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
    face = np.empty(len(faces), dtype=[("vertex_indices", "i4", (3,))])
    face["vertex_indices"] = faces
    PlyData([PlyElement.describe(vert, "vertex"), PlyElement.describe(face, "face")],
            text=True).write(str(path))


# -- TUM trajectories --------------------------------------------------------

def write_tum(path, poses: Iterable[np.ndarray], stamps: Optional[Iterable[float]] = None) -> None:
    poses = list(poses)
    stamps = list(range(len(poses))) if stamps is None else list(stamps)
    lines = []
    for ts, T in zip(stamps, poses):
        q = Rotation.from_matrix(T[:3, :3]).as_quat()  # x, y, z, w
        vals = [*T[:3, 3], *q]
        lines.append(f"{ts:g} " + " ".join(repr(float(x)) for x in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path) -> tuple[list[float], list[np.ndarray]]:
    stamps, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise TrajectoryFormatError(
                f"{path}:{lineno}: expected 8 fields 'timestamp tx ty tz qx qy qz qw', got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise TrajectoryFormatError(f"{path}:{lineno}: {exc}") from None
        q = np.asarray(vals[4:8])
        if not np.isfinite(q).all() or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise TrajectoryFormatError(f"{path}:{lineno}: quaternion is not unit length")
        T = np.eye(4)
        T[:3, :3] = Rotation.from_quat(q).as_matrix()
        T[:3, 3] = vals[1:4]
        stamps.append(vals[0])
        poses.append(T)
    return stamps, poses


# -- calibration + dataset directory -----------------------------------------

def save_rig(path, rig: SensorRig) -> None:
    Path(path).write_text(json.dumps(rig.to_dict(), indent=2))


def load_rig(path) -> SensorRig:
    path = Path(path)
    if not path.exists():
        raise CalibrationMissingError(f"calibration file not found: {path}")
    try:
        d = json.loads(path.read_text())
        return SensorRig.from_dict(d)
    except json.JSONDecodeError as exc:
        raise CalibrationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    except KeyError as exc:
        raise CalibrationError(f"{path}: missing field {exc.args[0]!r}") from None


def save_dataset(ds: Dataset, path) -> Path:
    root = Path(path)
    try:
        (root / "frames").mkdir(parents=True, exist_ok=True)
        save_rig(root / CALIB_FILE, ds.rig)
        for i, fr in enumerate(ds.frames):
            save_phase(root / "frames" / f"{i:04d}.phase.pfm", fr.phase)
            write_ply_points(root / "frames" / f"{i:04d}.cloud.ply", fr.cloud.points)
        gt = ds.gt_poses
        if gt is not None:
            write_tum(root / TRAJ_FILE, gt)
    except OSError as exc:
        raise DataError(f"writing dataset to {root}: {exc}") from exc
    return root


_FRAME_RE = re.compile(r"^(\d{4,})\.phase\.pfm$")


def load_dataset(path) -> Dataset:
    root = Path(path)
    rig = load_rig(root / CALIB_FILE)
    names = sorted(p.name for p in (root / "frames").glob("*.phase.pfm")) \
        if (root / "frames").is_dir() else []
    idx = [int(_FRAME_RE.match(n).group(1)) for n in names if _FRAME_RE.match(n)]
    if idx != list(range(len(idx))):
        raise DataError(f"{root}: frame indices are not contiguous from 0: {idx[:10]}")
    gt = None
    if (root / TRAJ_FILE).exists():
        _, gt = read_tum(root / TRAJ_FILE)
        if len(gt) != len(idx):
            raise DimensionMismatchError(
                f"{root / TRAJ_FILE}: {len(gt)} poses for {len(idx)} frames")
    frames = []
    for i in idx:
        phase = load_phase(root / "frames" / f"{i:04d}.phase.pfm")
        if phase.shape != (rig.cam_height, rig.cam_width):
            raise DimensionMismatchError(
                f"frame {i}: phase image {phase.width}x{phase.height} does not match "
                f"calibration {rig.cam_width}x{rig.cam_height}")
        ply = root / "frames" / f"{i:04d}.cloud.ply"
        cloud = PointCloud(read_ply_points(ply)) if ply.exists() else PointCloud(np.zeros((0, 3)))
        frames.append(Frame(phase, cloud, None if gt is None else gt[i]))
    return Dataset(rig, frames)


# -- g2o ---------------------------------------------------------------------

def _pose_fields(T: np.ndarray) -> str:
    q = Rotation.from_matrix(T[:3, :3]).as_quat()
    return " ".join(repr(float(x)) for x in [*T[:3, 3], *q])


def write_g2o(path, vertices, edges) -> None:
    """``vertices``: list of (id, 4x4); ``edges``: list of (from, to, 4x4, 6x6 information)."""
    lines = []
    for vid, T in vertices:
        lines.append(f"VERTEX_SE3:QUAT {vid} {_pose_fields(T)}")
    lines.append("FIX 0")
    iu = np.triu_indices(6)
    for a, b, Z, info in edges:
        upper = " ".join(repr(float(x)) for x in np.asarray(info)[iu])
        lines.append(f"EDGE_SE3:QUAT {a} {b} {_pose_fields(Z)} {upper}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_g2o(path):
    vertices, edges = [], []
    iu = np.triu_indices(6)

    def pose(vals):
        T = np.eye(4)
        T[:3, 3] = vals[:3]
        T[:3, :3] = Rotation.from_quat(vals[3:7]).as_matrix()
        return T

    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "VERTEX_SE3:QUAT":
            vertices.append((int(parts[1]), pose([float(x) for x in parts[2:9]])))
        elif parts[0] == "EDGE_SE3:QUAT":
            vals = [float(x) for x in parts[3:]]
            info = np.zeros((6, 6))
            info[iu] = vals[7:28]
            info = info + np.triu(info, 1).T
            edges.append((int(parts[1]), int(parts[2]), pose(vals[:7]), info))
    return vertices, edges

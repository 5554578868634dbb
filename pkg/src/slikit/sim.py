"""Ray-cast structured-light renderer and synthetic dataset generator.

Scenes are lists of planes, spheres and triangle meshes. A render casts one
camera ray per pixel, finds the nearest hit and checks visibility from the
projector centre with a shadow ray. Shading is albedo times pattern value
plus ambient, with no cosine falloff.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import TWO_PI, Dataset, EulerPose, Frame, PhaseImage, PointCloud, RawImage, SensorRig
from .errors import SceneParseError
from .pmp import PmpConfig, camera_rays, decode_phase, pattern_value, pixel_grid, triangulate
from .se3 import inv_T, make_T

T_EPS = 1e-9


# -- primitives ----------------------------------------------------------------

@dataclass
class Plane:
    """Infinite plane; ``checker > 0`` paints a checkerboard of that cell size
    alternating between ``albedo`` and ``albedo_alt``."""

    point: np.ndarray
    normal: np.ndarray
    albedo: float = 0.8
    checker: float = 0.0
    albedo_alt: float = 0.3

    def __post_init__(self):
        self.point = np.asarray(self.point, float)
        n = np.asarray(self.normal, float)
        self.normal = n / np.linalg.norm(n)
        if self.checker < 0 or not 0.0 < self.albedo_alt <= 1.0:
            raise ValueError("checker must be >= 0 and albedo_alt in (0, 1]")

    def albedo_at(self, x):
        if self.checker == 0:
            return np.full(len(x), self.albedo)
        # in-plane axes from the normal
        a = np.cross(self.normal, [1.0, 0.0, 0.0] if abs(self.normal[0]) < 0.9 else [0.0, 1.0, 0.0])
        a /= np.linalg.norm(a)
        b = np.cross(self.normal, a)
        rel = x - self.point
        cell = np.floor(rel @ a / self.checker) + np.floor(rel @ b / self.checker)
        return np.where(cell % 2 == 0, self.albedo, self.albedo_alt)

    def intersect(self, o, d, t_max):
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - o) @ self.normal) / denom
        hit = (np.abs(denom) > 1e-15) & (t > T_EPS) & (t < t_max)
        return np.where(hit, t, np.inf)

    def normals_at(self, x):
        return np.broadcast_to(self.normal, x.shape)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: float = 0.8

    def __post_init__(self):
        self.center = np.asarray(self.center, float)
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def intersect(self, o, d, t_max):
        oc = o - self.center
        a = np.einsum("...i,...i->...", d, d)
        b = np.einsum("...i,...i->...", d, oc)
        c = np.einsum("...i,...i->...", oc, oc) - self.radius ** 2
        disc = b * b - a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        # numerically stable roots
        qq = -(b + np.copysign(sq, b))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = qq / a
            t2 = c / qq
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        t = np.where(lo > T_EPS, lo, hi)
        hit = ok & (t > T_EPS) & (t < t_max) & np.isfinite(t)
        return np.where(hit, t, np.inf)

    def normals_at(self, x):
        return (x - self.center) / self.radius


class TriangleMesh:
    """Triangle mesh with an axis-aligned BVH; ``intersect_brute`` is the reference path."""

    leaf_size = 16

    def __init__(self, vertices, faces, albedo: float = 0.8):
        self.vertices = np.asarray(vertices, float).reshape(-1, 3)
        self.faces = np.asarray(faces, int).reshape(-1, 3)
        if len(self.faces) == 0:
            raise ValueError("mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise ValueError("mesh face indexes a missing vertex")
        self.albedo = albedo
        tri = self.vertices[self.faces]
        self._v0 = tri[:, 0]
        self._e1 = tri[:, 1] - tri[:, 0]
        self._e2 = tri[:, 2] - tri[:, 0]
        n = np.cross(self._e1, self._e2)
        self._fn = n / np.linalg.norm(n, axis=1, keepdims=True)
        self._build_bvh(tri)
        self.last_face = None

    def _build_bvh(self, tri):
        cent = tri.mean(axis=1)
        lo_t, hi_t = tri.min(axis=1), tri.max(axis=1)
        order = np.arange(len(tri))
        nodes = []  # [lo, hi, left, right, start, count]

        def build(idx_start, idx_end):
            ids = order[idx_start:idx_end]
            node = len(nodes)
            nodes.append([lo_t[ids].min(0), hi_t[ids].max(0), -1, -1, idx_start, idx_end - idx_start])
            if idx_end - idx_start <= self.leaf_size:
                return node
            c = cent[ids]
            axis = int(np.argmax(c.max(0) - c.min(0)))
            srt = ids[np.argsort(c[:, axis], kind="stable")]
            order[idx_start:idx_end] = srt
            mid = (idx_start + idx_end) // 2
            nodes[node][2] = build(idx_start, mid)
            nodes[node][3] = build(mid, idx_end)
            return node

        build(0, len(tri))
        self._order = order
        self._nodes = nodes

    def _tri_hit(self, o, d, face_ids, t_max):
        """Moller-Trumbore for every (ray, face) pair; returns best t and face per ray."""
        v0, e1, e2 = self._v0[face_ids], self._e1[face_ids], self._e2[face_ids]
        oo = o if o.ndim == 1 else o[:, None, :]
        dd = d[:, None, :]
        p = np.cross(dd, e2[None])
        det = np.einsum("rfi,fi->rf", p, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            s = np.broadcast_to(oo - v0[None], p.shape)
            uu = np.einsum("rfi,rfi->rf", s, p) * inv
            q = np.cross(s, e1[None])
            vv = np.einsum("ri,rfi->rf", d, q) * inv
            t = np.einsum("rfi,fi->rf", q, e2) * inv
        ok = (np.abs(det) > 1e-14) & (uu >= 0) & (vv >= 0) & (uu + vv <= 1) & (t > T_EPS) \
            & (t < t_max[:, None])
        t = np.where(ok, t, np.inf)
        j = np.argmin(t, axis=1)
        best = t[np.arange(len(d)), j]
        return best, face_ids[j]

    def intersect_brute(self, o, d, t_max, chunk: int = 256):
        t_best = np.full(len(d), np.inf)
        f_best = np.full(len(d), -1)
        tm = np.broadcast_to(np.asarray(t_max, float), (len(d),)).copy()
        for s in range(0, len(self.faces), chunk):
            ids = np.arange(s, min(s + chunk, len(self.faces)))
            t, f = self._tri_hit(o, d, ids, np.minimum(tm, t_best))
            better = t < t_best
            t_best[better] = t[better]
            f_best[better] = f[better]
        self.last_face = f_best
        return t_best

    def intersect(self, o, d, t_max):
        n = len(d)
        t_best = np.full(n, np.inf)
        f_best = np.full(n, -1)
        tm = np.broadcast_to(np.asarray(t_max, float), (n,)).copy()
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_d = 1.0 / d
        stack = [(0, np.arange(n))]
        while stack:
            node_id, rays = stack.pop()
            lo, hi, left, right, start, count = self._nodes[node_id]
            oo = o if o.ndim == 1 else o[rays]
            with np.errstate(invalid="ignore"):
                t0 = (lo - oo) * inv_d[rays]
                t1 = (hi - oo) * inv_d[rays]
            tn = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf).max(axis=1)
            tf = np.nan_to_num(np.maximum(t0, t1), nan=np.inf).min(axis=1)
            keep = (tn <= tf) & (tf > 0) & (tn < np.minimum(t_best[rays], tm[rays]))
            rays = rays[keep]
            if len(rays) == 0:
                continue
            if left < 0:
                ids = self._order[start:start + count]
                o_sub = o if o.ndim == 1 else o[rays]
                t, f = self._tri_hit(o_sub, d[rays], ids, np.minimum(tm[rays], t_best[rays]))
                better = t < t_best[rays]
                t_best[rays[better]] = t[better]
                f_best[rays[better]] = f[better]
            else:
                stack.append((right, rays))
                stack.append((left, rays))
        self.last_face = f_best
        return t_best

    def normals_at(self, x):
        return self._fn[self.last_face]


# -- scene ---------------------------------------------------------------------

@dataclass
class Scene:
    surfaces: list
    ambient: float = 0.05

    def __post_init__(self):
        if not self.surfaces:
            raise ValueError("scene needs at least one surface")
        if not 0.0 <= self.ambient < 1.0:
            raise ValueError("ambient must lie in [0, 1)")
        for s in self.surfaces:
            if not 0.0 < s.albedo <= 1.0:
                raise ValueError("albedo must lie in (0, 1]")

    def intersect(self, o, d, t_max=np.inf):
        """Nearest hit along ``o + t d``; returns (t, surface index, normal)."""
        d = np.asarray(d, float).reshape(-1, 3)
        tm = np.broadcast_to(np.asarray(t_max, float), (len(d),))
        t_best = np.full(len(d), np.inf)
        s_best = np.full(len(d), -1)
        normals = np.zeros_like(d)
        for k, surf in enumerate(self.surfaces):
            t = surf.intersect(o, d, tm)
            better = t < t_best
            if not better.any():
                continue
            t_best[better] = t[better]
            s_best[better] = k
            x = (o if np.ndim(o) == 1 else o[better]) + t[better, None] * d[better]
            nrm = surf.normals_at(x) if not isinstance(surf, TriangleMesh) \
                else surf._fn[surf.last_face[better]]
            normals[better] = nrm
        return t_best, s_best, normals

    def occluded(self, o, d, t_max) -> np.ndarray:
        t, _, _ = self.intersect(o, d, t_max)
        return np.isfinite(t)


# -- rendering -----------------------------------------------------------------

@dataclass
class _Geometry:
    hit: np.ndarray        # (H, W) bool
    lit: np.ndarray        # (H, W) bool, visible from projector and inside pattern
    row: np.ndarray        # (H, W) continuous projector row
    albedo: np.ndarray     # (H, W)
    points_dev: np.ndarray  # (H, W, 3)
    normals_dev: np.ndarray  # (H, W, 3)


def _render_geometry(scene: Scene, rig: SensorRig, device_pose: np.ndarray) -> _Geometry:
    T = np.asarray(device_pose, float)
    R_wd, t_wd = T[:3, :3], T[:3, 3]
    H, W = rig.cam_height, rig.cam_width
    uu, vv = pixel_grid(W, H)
    c_dev, d_dev = camera_rays(rig, uu.ravel(), vv.ravel())
    o_w = R_wd @ c_dev + t_wd
    d_w = d_dev @ R_wd.T
    t, surf, n_w = scene.intersect(o_w, d_w)
    hit = np.isfinite(t)
    x_w = o_w + np.where(hit, t, 0.0)[:, None] * d_w
    x_dev = (x_w - t_wd) @ R_wd
    n_dev = n_w @ R_wd
    z = x_dev[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        row = rig.proj_fy * x_dev[:, 1] / z + rig.proj_cy
        col = rig.proj_fx * x_dev[:, 0] / z + rig.proj_cx
    inside = hit & (z > 0) & (row >= 0) & (row < rig.proj_height) & (col >= 0) & (col < rig.proj_width)
    lit = inside.copy()
    idx = np.nonzero(inside)[0]
    if len(idx):
        shadow = scene.occluded(t_wd, x_w[idx] - t_wd, 1.0 - 1e-9)
        lit[idx[shadow]] = False
    flip = np.einsum("ij,ij->i", n_dev, x_dev) > 0
    n_dev[flip] *= -1.0
    albedo = np.zeros(len(t))
    for k, s in enumerate(scene.surfaces):
        on = surf == k
        albedo[on] = s.albedo_at(x_w[on]) if hasattr(s, "albedo_at") else s.albedo
    row = np.where(inside, row, 0.0)
    return _Geometry(hit.reshape(H, W), lit.reshape(H, W), row.reshape(H, W),
                     albedo.reshape(H, W), x_dev.reshape(H, W, 3), n_dev.reshape(H, W, 3))


def render_raw_patterns(scene: Scene, rig: SensorRig, device_pose, cfg: PmpConfig) -> list[RawImage]:
    g = _render_geometry(scene, rig, device_pose)
    out = []
    for n in range(1, cfg.n_patterns + 1):
        img = np.full(g.hit.shape, scene.ambient)
        img[g.lit] += g.albedo[g.lit] * pattern_value(cfg, g.row[g.lit], n, rig.proj_height)
        out.append(RawImage(img))
    return out


def render_phase_direct(scene: Scene, rig: SensorRig, device_pose) -> tuple[PhaseImage, PointCloud]:
    """Exact phase from each hit's projector row, and the exact hit points (device frame)."""
    g = _render_geometry(scene, rig, device_pose)
    phase = np.where(g.lit, TWO_PI * g.row / rig.proj_height, 0.0)
    phase[phase >= TWO_PI] = 0.0
    img = PhaseImage(phase, g.lit)
    vv, uu = np.nonzero(g.lit)
    cloud = PointCloud(g.points_dev[vv, uu], np.column_stack([uu, vv]).astype(float),
                       g.normals_dev[vv, uu])
    return img, cloud


# -- trajectories ----------------------------------------------------------------

def motion_matrix(p: EulerPose) -> np.ndarray:
    """4x4 point transform from frame k into frame k+1."""
    return p.to_homogeneous()


def relative_pose(p: EulerPose) -> np.ndarray:
    """Pose of frame k+1 expressed in frame k (inverse of the point motion)."""
    return inv_T(p.to_homogeneous())


@dataclass
class TrajectorySpec:
    kind: str = "orbit"
    radius: float = 1.2
    step_deg: float = 20.0
    count: int = 18
    translation_bound: float = 0.05
    rotation_bound_deg: float = 5.0
    seed: int = 0
    motions: Sequence[EulerPose] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("orbit", "random_6dof", "motions"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.kind == "motions":
            self.count = len(self.motions) + 1
        if self.count < 2:
            raise ValueError("trajectory needs at least 2 poses")
        if self.kind == "orbit" and abs(self.step_deg) * self.count > 360.0 + abs(self.step_deg) + 1e-9:
            raise ValueError("orbit step x count exceeds one revolution plus one step")

    def poses(self) -> list[np.ndarray]:
        """Absolute device-to-world poses; pose 0 is the world origin."""
        if self.kind == "orbit":
            center = np.array([0.0, 0.0, self.radius])
            out = []
            for k in range(self.count):
                th = np.deg2rad(self.step_deg * k)
                c, s = np.cos(th), np.sin(th)
                Ry = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
                out.append(make_T(Ry, center + Ry @ np.array([0.0, 0.0, -self.radius])))
            out[0] = np.eye(4)
            return out
        if self.kind == "random_6dof":
            rng = np.random.default_rng(self.seed)
            out = [np.eye(4)]
            rb = np.deg2rad(self.rotation_bound_deg)
            for _ in range(self.count - 1):
                t = rng.uniform(-self.translation_bound, self.translation_bound, 3)
                a = rng.uniform(-rb, rb, 3)
                out.append(EulerPose(*t, *a).to_homogeneous())
            return out
        out = [np.eye(4)]
        for m in self.motions:
            out.append(out[-1] @ relative_pose(m))
        return out

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "count": self.count}
        if self.kind == "orbit":
            d.update(radius=self.radius, step_deg=self.step_deg)
        elif self.kind == "random_6dof":
            d.update(translation_bound=self.translation_bound,
                     rotation_bound_deg=self.rotation_bound_deg, seed=self.seed)
        else:
            d["motions"] = [m.to_dict() for m in self.motions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectorySpec":
        d = dict(d)
        if "motions" in d:
            d["motions"] = [EulerPose(**m) for m in d["motions"]]
            d.pop("count", None)
        return cls(**d)


def generate_dataset(scene: Scene, rig: SensorRig, traj: TrajectorySpec, cfg: PmpConfig,
                     out_path=None) -> Dataset:
    """Render, decode and triangulate one frame per trajectory pose.

    Phase values are rounded to float32 in memory so the returned dataset
    equals what a later ``load_dataset`` reads back.
    """
    frames = []
    for T in traj.poses():
        raw = render_raw_patterns(scene, rig, T, cfg)
        decoded = decode_phase(raw, cfg)
        ph = decoded.phase.astype(np.float32).astype(np.float64)
        ph[ph >= TWO_PI] = 0.0
        phase = PhaseImage(ph, decoded.valid)
        cloud = triangulate(phase, rig)
        pts32 = cloud.points.astype(np.float32).astype(np.float64)
        frames.append(Frame(phase, PointCloud(pts32, cloud.source_pixel, cloud.normals), T))
    ds = Dataset(rig, frames)
    if out_path is not None:
        from .io import save_dataset
        save_dataset(ds, out_path)
    return ds


def perturb_pose(gt: EulerPose, fraction: float, seed: int) -> EulerPose:
    """Scale every component by ``1 + u * fraction`` with u ~ U[-1, 1]."""
    if fraction < 0:
        raise ValueError("fraction must be non-negative")
    u = np.random.default_rng(seed).uniform(-1.0, 1.0, 6)
    return EulerPose.from_vector(gt.as_vector() * (1.0 + u * fraction))


# -- scene description files -------------------------------------------------------

def _vec3(v, where):
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise SceneParseError(f"{where}: expected a list of 3 numbers") from None
    if a.shape != (3,) or not np.isfinite(a).all():
        raise SceneParseError(f"{where}: expected a list of 3 finite numbers")
    return a


def _positive(v, where):
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
        raise SceneParseError(f"{where}: expected a positive number, got {v!r}")
    return float(v)


def scene_from_dict(d: dict, base_dir: Optional[Path] = None) -> Scene:
    if not isinstance(d, dict) or "surfaces" not in d:
        raise SceneParseError("scene: missing field 'surfaces'")
    surfaces = []
    for i, s in enumerate(d["surfaces"]):
        where = f"surfaces[{i}]"
        if not isinstance(s, dict) or "type" not in s:
            raise SceneParseError(f"{where}: missing field 'type'")
        albedo = s.get("albedo", 0.8)
        if not isinstance(albedo, (int, float)) or not 0 < albedo <= 1:
            raise SceneParseError(f"{where}.albedo: expected a number in (0, 1], got {albedo!r}")
        kind = s["type"]
        if kind == "sphere":
            surfaces.append(Sphere(_vec3(s.get("center"), f"{where}.center"),
                                   _positive(s.get("radius"), f"{where}.radius"), albedo))
        elif kind == "plane":
            n = _vec3(s.get("normal"), f"{where}.normal")
            if np.linalg.norm(n) == 0:
                raise SceneParseError(f"{where}.normal: zero vector")
            checker = s.get("checker", 0.0)
            alt = s.get("albedo_alt", 0.3)
            if not isinstance(checker, (int, float)) or checker < 0:
                raise SceneParseError(f"{where}.checker: expected a number >= 0, got {checker!r}")
            if not isinstance(alt, (int, float)) or not 0 < alt <= 1:
                raise SceneParseError(f"{where}.albedo_alt: expected a number in (0, 1], got {alt!r}")
            surfaces.append(Plane(_vec3(s.get("point"), f"{where}.point"), n, albedo,
                                  float(checker), float(alt)))
        elif kind == "mesh":
            if "path" in s:
                from .io import read_mesh
                p = Path(s["path"])
                if base_dir is not None and not p.is_absolute():
                    p = base_dir / p
                verts, faces = read_mesh(p)
            elif "vertices" in s and "faces" in s:
                verts, faces = np.asarray(s["vertices"], float), np.asarray(s["faces"], int)
            else:
                raise SceneParseError(f"{where}: mesh needs 'path' or 'vertices'+'faces'")
            scale = float(s.get("scale", 1.0))
            offset = _vec3(s.get("offset", [0, 0, 0]), f"{where}.offset")
            try:
                surfaces.append(TriangleMesh(verts * scale + offset, faces, albedo))
            except ValueError as exc:
                raise SceneParseError(f"{where}: {exc}") from None
        else:
            raise SceneParseError(f"{where}.type: unknown primitive {kind!r}")
    ambient = d.get("ambient", 0.05)
    if not isinstance(ambient, (int, float)) or not 0 <= ambient < 1:
        raise SceneParseError(f"ambient: expected a number in [0, 1), got {ambient!r}")
    try:
        return Scene(surfaces, float(ambient))
    except ValueError as exc:
        raise SceneParseError(f"scene: {exc}") from None


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return scene_from_dict(d, path.parent)


# -- built-in scenes -----------------------------------------------------------------

def desk_scene() -> Scene:
    """Tilted backdrop plane with two spheres, about 1.1-1.5 m in front of the rig."""
    return Scene([
        Plane([0.0, 0.0, 1.5], [0.0, -0.25, -1.0], albedo=0.7),
        Sphere([-0.09, 0.04, 1.15], 0.15, albedo=0.85),
        Sphere([0.16, -0.08, 1.22], 0.09, albedo=0.8),
    ], ambient=0.05)


def orbit_scene(standoff: float = 1.2) -> Scene:
    """Asymmetric cluster of spheres centred ``standoff`` metres ahead of pose 0."""
    c = np.array([0.0, 0.0, standoff])
    return Scene([
        Sphere(c + [0.0, 0.04, 0.0], 0.16, albedo=0.85),
        Sphere(c + [0.15, -0.11, 0.05], 0.08, albedo=0.8),
        Sphere(c + [-0.13, -0.07, -0.10], 0.07, albedo=0.8),
        Sphere(c + [-0.04, 0.16, 0.14], 0.06, albedo=0.75),
        Sphere(c + [0.05, -0.17, -0.09], 0.05, albedo=0.9),
    ], ambient=0.05)


def scene_surface_distance(scene: Scene, points: np.ndarray) -> np.ndarray:
    """Unsigned distance from each point to the nearest analytic surface (spheres and planes)."""
    pts = np.asarray(points, float)
    best = np.full(len(pts), np.inf)
    for s in scene.surfaces:
        if isinstance(s, Sphere):
            d = np.abs(np.linalg.norm(pts - s.center, axis=1) - s.radius)
        elif isinstance(s, Plane):
            d = np.abs((pts - s.point) @ s.normal)
        else:
            raise TypeError("surface distance is only defined for analytic primitives")
        best = np.minimum(best, d)
    return best


def box_mesh(center, size) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(center, float)
    h = np.asarray(size, float) / 2.0 * np.ones(3)
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float) * h + c
    f = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                  [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    return v, f


def uv_sphere_mesh(center, radius, n_lat=24, n_lon=48) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(center, float)
    verts = [c + [0, 0, radius], c + [0, 0, -radius]]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = 2 * np.pi * j / n_lon
            verts.append(c + radius * np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph),
                                                np.cos(th)]))
    idx = lambda i, j: 2 + (i - 1) * n_lon + (j % n_lon)  # noqa: E731
    faces = []
    for j in range(n_lon):
        faces.append([0, idx(1, j), idx(1, j + 1)])
        faces.append([1, idx(n_lat - 1, j + 1), idx(n_lat - 1, j)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            faces.append([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)])
            faces.append([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)])
    return np.asarray(verts), np.asarray(faces)

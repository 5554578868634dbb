"""Pose graph over absolute device poses, solved with Levenberg-Marquardt.

Each non-fixed vertex is perturbed on the right, ``R <- R Exp(dtheta)`` and
``t <- t + R dt``. An edge ``a -> b`` with measurement ``Z`` compares ``Z`` to
``E = Z^-1 A^-1 B`` and uses the residual ``[t_E, log(R_E)]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import EulerPose, PointCloud
from .errors import DimensionMismatchError, GraphError
from .se3 import inv_T, make_T, right_jacobian_inv, skew, so3_exp, so3_log


@dataclass
class PoseVertex:
    id: int
    pose: np.ndarray            # 4x4, device frame -> world frame

    def __post_init__(self):
        self.pose = np.array(self.pose, dtype=float)
        if self.pose.shape != (4, 4):
            raise ValueError("vertex pose must be 4x4")


@dataclass
class PoseEdge:
    from_id: int
    to_id: int
    measurement: np.ndarray     # pose of ``to`` expressed in ``from``'s frame
    information: np.ndarray = field(default_factory=lambda: np.eye(6))
    kind: str = "odometry"

    def __post_init__(self):
        if self.from_id == self.to_id:
            raise GraphError(f"edge {self.from_id}->{self.to_id} is a self loop")
        self.measurement = np.array(self.measurement, dtype=float)
        self.information = np.array(self.information, dtype=float)
        if self.information.shape != (6, 6):
            raise GraphError("information matrix must be 6x6")
        if not np.allclose(self.information, self.information.T, rtol=0, atol=1e-12):
            raise GraphError(f"edge {self.from_id}->{self.to_id}: information is not symmetric")
        try:
            self.sqrt_info = np.linalg.cholesky(self.information).T
        except np.linalg.LinAlgError:
            raise GraphError(
                f"edge {self.from_id}->{self.to_id}: information is not positive definite") from None


def information(sigma: float) -> np.ndarray:
    return np.eye(6) / sigma**2


def _as_T(m) -> np.ndarray:
    if isinstance(m, EulerPose):
        return m.to_homogeneous()
    return np.asarray(m, dtype=float)


def accumulate(motions: Sequence) -> list[PoseVertex]:
    """Chain relative poses (EulerPose or 4x4) into absolute vertices starting at identity."""
    out = [PoseVertex(0, np.eye(4))]
    for k, m in enumerate(motions):
        out.append(PoseVertex(k + 1, out[-1].pose @ _as_T(m)))
    return out


def edge_residual(A: np.ndarray, B: np.ndarray, Z: np.ndarray) -> np.ndarray:
    Ra, ta, Rb, tb, Rz, tz = A[:3, :3], A[:3, 3], B[:3, :3], B[:3, 3], Z[:3, :3], Z[:3, 3]
    r = np.empty(6)
    r[:3] = Rz.T @ (Ra.T @ (tb - ta) - tz)
    r[3:] = so3_log(Rz.T @ Ra.T @ Rb)
    return r


def edge_jacobians(A: np.ndarray, B: np.ndarray, Z: np.ndarray):
    """d residual / d (dt, dtheta) of the ``from`` and the ``to`` vertex."""
    Ra, ta, Rb, tb, Rz = A[:3, :3], A[:3, 3], B[:3, :3], B[:3, 3], Z[:3, :3]
    r_rot = so3_log(Rz.T @ Ra.T @ Rb)
    Jinv = right_jacobian_inv(r_rot)
    Ja = np.zeros((6, 6))
    Jb = np.zeros((6, 6))
    Ja[:3, :3] = -Rz.T
    Ja[:3, 3:] = Rz.T @ skew(Ra.T @ (tb - ta))
    Ja[3:, 3:] = -Jinv @ Rb.T @ Ra
    Jb[:3, :3] = Rz.T @ Ra.T @ Rb
    Jb[3:, 3:] = Jinv
    return Ja, Jb


def retract(T: np.ndarray, delta: np.ndarray) -> np.ndarray:
    R, t = T[:3, :3], T[:3, 3]
    return make_T(R @ so3_exp(delta[3:]), t + R @ delta[:3])


def _cost(poses, edges) -> float:
    total = 0.0
    for e in edges:
        r = e.sqrt_info @ edge_residual(poses[e.from_id], poses[e.to_id], e.measurement)
        total += float(r @ r)
    return total


def chi2(vertices: Sequence[PoseVertex], edges: Sequence[PoseEdge]) -> float:
    return _cost({v.id: v.pose for v in vertices}, edges)


def _check_graph(vertices: Sequence[PoseVertex], edges: Sequence[PoseEdge]) -> None:
    ids = [v.id for v in vertices]
    if sorted(ids) != list(range(len(ids))):
        raise GraphError(f"vertex ids must be unique and contiguous from 0, got {ids[:10]}...")
    parent = list(range(len(ids)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for e in edges:
        for end in (e.from_id, e.to_id):
            if not 0 <= end < len(ids):
                raise GraphError(f"edge {e.from_id}->{e.to_id} refers to a missing vertex")
        parent[find(e.from_id)] = find(e.to_id)
    roots = {find(i) for i in range(len(ids))}
    if len(roots) > 1:
        raise GraphError(f"pose graph is disconnected ({len(roots)} components)")


@dataclass
class OptimizeResult:
    vertices: list
    chi2: float
    initial_chi2: float
    iterations: int
    chi2_history: list
    converged: bool


def optimize(vertices: Sequence[PoseVertex], edges: Sequence[PoseEdge], max_iters: int = 50,
             tol: float = 1e-10, lam: float = 1e-4) -> OptimizeResult:
    """LM with vertex 0 held fixed; returns new vertices, inputs are untouched."""
    _check_graph(vertices, edges)
    order = sorted(vertices, key=lambda v: v.id)
    poses = [v.pose.copy() for v in order]
    n = len(poses)
    dim = 6 * (n - 1)

    F = _cost(poses, edges)
    history = [F]
    F0 = F
    converged = False
    it = 0
    if dim == 0 or not edges:
        return OptimizeResult([PoseVertex(v.id, p) for v, p in zip(order, poses)], F, F0, 0, history, True)
    for it in range(1, max_iters + 1):
        H = np.zeros((dim, dim))
        g = np.zeros(dim)
        for e in edges:
            A, B = poses[e.from_id], poses[e.to_id]
            r = edge_residual(A, B, e.measurement)
            Ja, Jb = edge_jacobians(A, B, e.measurement)
            W = e.information
            blocks = [(e.from_id, Ja), (e.to_id, Jb)]
            for i, Ji in blocks:
                if i == 0:
                    continue
                si = slice(6 * (i - 1), 6 * i)
                g[si] += Ji.T @ W @ r
                for j, Jj in blocks:
                    if j == 0:
                        continue
                    sj = slice(6 * (j - 1), 6 * j)
                    H[si, sj] += Ji.T @ W @ Jj
        if np.max(np.abs(g)) < 1e-15:
            converged = True
            break
        improved = False
        while lam < 1e12:
            D = np.diag(np.diag(H)) + 1e-12 * np.eye(dim)
            try:
                delta = np.linalg.solve(H + lam * D, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = [poses[0]] + [retract(poses[k], delta[6 * (k - 1):6 * k]) for k in range(1, n)]
            F_try = _cost(trial, edges)
            if F_try < F:
                poses, F_prev, F = trial, F, F_try
                lam = max(lam / 3.0, 1e-12)
                improved = True
                break
            lam *= 5.0
        if not improved:
            converged = True
            break
        history.append(F)
        if (F_prev - F) <= tol * max(F_prev, 1e-300):
            converged = True
            break
    out = [PoseVertex(v.id, v.pose.copy() if v.id == 0 else p) for v, p in zip(order, poses)]
    return OptimizeResult(out, F, F0, it, history, converged)


def apply_to_clouds(vertices: Sequence[PoseVertex], clouds: Sequence, voxel: Optional[float] = None
                    ) -> PointCloud:
    """Move every cloud into the world frame and concatenate; optional voxel-mean downsampling."""
    if len(vertices) != len(clouds):
        raise DimensionMismatchError(f"{len(vertices)} vertices but {len(clouds)} clouds")
    parts = []
    for v, c in zip(sorted(vertices, key=lambda v: v.id), clouds):
        P = c.points if isinstance(c, PointCloud) else np.asarray(c, float).reshape(-1, 3)
        parts.append(P @ v.pose[:3, :3].T + v.pose[:3, 3])
    pts = np.concatenate(parts) if parts else np.zeros((0, 3))
    if voxel is not None and len(pts):
        if not voxel > 0:
            raise ValueError("voxel size must be positive")
        keys = np.floor(pts / voxel).astype(np.int64)
        _, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        sums = np.zeros((inv.max() + 1, 3))
        np.add.at(sums, inv, pts)
        pts = sums / np.bincount(inv)[:, None]
    return PointCloud(pts)


def relative_from_motion(delta_x: EulerPose) -> np.ndarray:
    """Edge measurement for an odometry result that maps frame-k points into frame k+1."""
    return inv_T(delta_x.to_homogeneous())


def to_g2o(path, vertices: Sequence[PoseVertex], edges: Sequence[PoseEdge]) -> None:
    from .io import write_g2o
    write_g2o(path, [(v.id, v.pose) for v in vertices],
              [(e.from_id, e.to_id, e.measurement, e.information) for e in edges])

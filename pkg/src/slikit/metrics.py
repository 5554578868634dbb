"""Trajectory and reconstruction metrics, a point-to-point ICP baseline and a timer."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points
from .core import EulerPose, PointCloud
from .errors import DimensionMismatchError, NumericalError
from .se3 import inv_T, rotation_angle, rotation_angles


def _poses(traj) -> np.ndarray:
    arr = np.asarray([getattr(p, "pose", p) for p in traj], dtype=float)
    if arr.ndim != 3 or arr.shape[1:] != (4, 4):
        raise DimensionMismatchError("trajectory must be a sequence of 4x4 poses")
    return arr


def _check_pair(est, gt, minimum: int):
    P, Q = _poses(est), _poses(gt)
    if len(P) != len(Q):
        raise DimensionMismatchError(f"trajectory lengths differ: {len(P)} vs {len(Q)}")
    if len(P) < minimum:
        raise DimensionMismatchError(f"need at least {minimum} poses, got {len(P)}")
    return P, Q


def rigid_align(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """R, t minimising sum |R src_i + t - dst_i|^2 (no scale)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    S = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(S)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return R, mu_d - R @ mu_s


def ate_rmse(estimated, ground_truth, align: str = "rigid") -> float:
    """Translational RMSE after aligning the estimate to the ground truth.

    ``align="none"`` skips the alignment and compares positions directly.
    """
    P, Q = _check_pair(estimated, ground_truth, 3)
    p, q = P[:, :3, 3], Q[:, :3, 3]
    if align == "rigid":
        R, t = rigid_align(p, q)
        p = p @ R.T + t
    elif align != "none":
        raise ValueError(f"unknown alignment {align!r}")
    return float(np.sqrt(np.mean(np.sum((p - q) ** 2, axis=1))))


@dataclass
class TrajectoryError:
    ate_rmse: float
    rpe_translation: list = field(default_factory=list)
    rpe_rotation_deg: list = field(default_factory=list)

    @property
    def rpe_translation_median(self) -> float:
        return float(np.median(self.rpe_translation)) if self.rpe_translation else 0.0

    @property
    def rpe_rotation_median_deg(self) -> float:
        return float(np.median(self.rpe_rotation_deg)) if self.rpe_rotation_deg else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rpe_translation_median"] = self.rpe_translation_median
        d["rpe_rotation_median_deg"] = self.rpe_rotation_median_deg
        return d


def rpe(estimated, ground_truth, delta: int = 1) -> tuple[list[float], list[float]]:
    """Per-step relative errors: translation norms (m) and rotation angles (degrees)."""
    P, Q = _check_pair(estimated, ground_truth, 3)
    if delta < 1:
        raise ValueError("delta must be >= 1")
    Pi = np.linalg.inv(P)
    Qi = np.linalg.inv(Q)
    rel_p = Pi[:-delta] @ P[delta:]
    rel_q = Qi[:-delta] @ Q[delta:]
    E = np.linalg.inv(rel_q) @ rel_p
    trans = np.linalg.norm(E[:, :3, 3], axis=1)
    ang = np.degrees(rotation_angles(E[:, :3, :3]))
    return [float(x) for x in trans], [float(x) for x in ang]


def trajectory_error(estimated, ground_truth, delta: int = 1) -> TrajectoryError:
    t, r = rpe(estimated, ground_truth, delta)
    return TrajectoryError(ate_rmse(estimated, ground_truth), t, r)


def _cloud_array(c, name) -> np.ndarray:
    P = c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        raise DimensionMismatchError(f"{name} is empty")
    return P


def directed_hausdorff(a, b) -> float:
    """sup over ``a`` of the distance to the nearest point of ``b``."""
    A, B = _cloud_array(a, "a"), _cloud_array(b, "b")
    d, _ = cKDTree(B).query(A, k=1)
    return float(d.max())


def hausdorff(a, b) -> float:
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


# -- point-to-point ICP --------------------------------------------------------------

@dataclass
class IcpResult:
    pose: EulerPose
    rms: float
    rms_history: list
    iterations: int
    transform: np.ndarray


def icp_point_to_point(source, target, max_iters: int = 30, init: Optional[EulerPose] = None,
                       tol: float = 0.0) -> IcpResult:
    """Rigid motion mapping ``source`` onto ``target``; plain nearest-neighbour ICP.

    ``rms_history[i]`` is the correspondence RMS measured before step ``i``; the
    last entry is measured after the final step.
    """
    S = _cloud_array(source, "source")
    Tg = _cloud_array(target, "target")
    for P, name in ((S, "source"), (Tg, "target")):
        if len(P) < 3 or np.linalg.matrix_rank(P - P.mean(axis=0), tol=1e-12) < 2:
            raise NumericalError(f"{name} needs at least 3 non-collinear points")
    tree = cKDTree(Tg)
    T = (init or EulerPose()).to_homogeneous()
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        moved = S @ T[:3, :3].T + T[:3, 3]
        d, j = tree.query(moved, k=1)
        history.append(float(np.sqrt(np.mean(d * d))))
        if len(history) > 1 and history[-2] - history[-1] <= tol * history[-2]:
            it -= 1
            break
        matched = Tg[j]
        R, t = rigid_align(moved, matched)
        if not np.all(np.isfinite(R)):
            raise NumericalError("rank-deficient cross-covariance in ICP")
        step = np.eye(4)
        step[:3, :3], step[:3, 3] = R, t
        T = step @ T
    else:
        moved = S @ T[:3, :3].T + T[:3, 3]
        d, _ = tree.query(moved, k=1)
        history.append(float(np.sqrt(np.mean(d * d))))
    return IcpResult(EulerPose.from_matrix(T[:3, :3], T[:3, 3]), history[-1], history, it, T)


class PointToPointICP(BaseEstimator):
    """Estimator wrapper: ``fit(source, target)``, then ``transform`` moves points."""

    def __init__(self, max_iters: int = 30, tol: float = 0.0):
        self.max_iters = max_iters
        self.tol = tol

    def fit(self, X, y, init: Optional[EulerPose] = None):
        X = check_points(X, "X")
        y = check_points(y, "y")
        self.result_ = icp_point_to_point(X, y, self.max_iters, init, self.tol)
        self.transform_ = self.result_.transform
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "transform_")
        X = check_points(X, "X")
        return X @ self.transform_[:3, :3].T + self.transform_[:3, 3]

    def predict(self, X=None) -> EulerPose:
        check_is_fitted(self, "result_")
        return self.result_.pose

    def score(self, X, y) -> float:
        """Negative correspondence RMS of ``X`` moved onto ``y``."""
        d, _ = cKDTree(check_points(y, "y")).query(self.transform(X), k=1)
        return -float(np.sqrt(np.mean(d * d)))


# -- timing + reports ----------------------------------------------------------------

def timing_harness(fn: Callable[[], object], repetitions: int = 5) -> float:
    """Median wall-clock seconds over ``repetitions`` runs after one untimed warm-up."""
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    fn()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def pose_error(estimate: EulerPose, truth: EulerPose) -> tuple[float, float]:
    """Translation (m) and rotation (deg) of ``truth^-1 * estimate``."""
    E = inv_T(truth.to_homogeneous()) @ estimate.to_homogeneous()
    return float(np.linalg.norm(E[:3, 3])), float(np.degrees(rotation_angle(E[:3, :3])))


def write_report(path, report: dict, fmt: str = "json") -> Path:
    """JSON keeps the full structure; CSV writes one row per frame of the per-frame arrays."""
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report, indent=2, sort_keys=True))
        return path
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    per_frame = {k: v for k, v in report.items() if isinstance(v, list)}
    n = max((len(v) for v in per_frame.values()), default=0)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", *per_frame])
        for i in range(n):
            w.writerow([i, *[(v[i] if i < len(v) else "") for v in per_frame.values()]])
    return path

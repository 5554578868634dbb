"""Phase odometry: register a point cloud against the next frame's phase image.

Each source point is moved by the candidate motion, projected into the
projector to predict its phase and into the camera to sample the measured
phase. The motion minimises half the summed squared difference over the ROI,
using the analytic Jacobian of that difference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_cloud, check_phase_image, check_points
from .core import TWO_PI, EulerPose, PhaseImage, Roi, SensorRig, rotation_zyx
from .errors import InsufficientPointsError, OutOfFrustumError

MIN_DEPTH = 1e-9


# -- configuration / results ---------------------------------------------------------

@dataclass(frozen=True)
class OdometryConfig:
    max_iters: int = 50
    step_init: float = 1e-4
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    tol_step: float = 1e-9
    tol_cost: float = 1e-12
    roi: Union[Roi, str] = "auto"
    solver: str = "gauss_newton"
    jacobian: str = "analytic"
    max_points: Optional[int] = 50_000
    min_points: int = 100
    max_phase_step: float = 0.1
    max_curvature: float = 3e-3
    visibility: bool = True
    min_view_cos: float = 0.05
    depth_margin: float = 0.02
    outlier_k: float = 5.0
    outlier_floor: float = 0.05

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.armijo_c < 1 or not 0 < self.armijo_shrink < 1:
            raise ValueError("Armijo constants must lie in (0, 1)")
        if not (self.outlier_k > 0 and self.outlier_floor > 0):
            raise ValueError("outlier_k and outlier_floor must be positive")
        if not (self.tol_step > 0 and self.tol_cost > 0 and self.step_init > 0):
            raise ValueError("tolerances and step_init must be positive")
        if self.solver not in ("steepest_descent", "gauss_newton"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.jacobian not in ("analytic", "finite_difference"):
            raise ValueError(f"unknown jacobian mode {self.jacobian!r}")
        if not (isinstance(self.roi, Roi) or self.roi == "auto"):
            raise ValueError("roi must be a Roi or 'auto'")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if isinstance(self.roi, Roi):
            d["roi"] = [self.roi.u_min, self.roi.u_max, self.roi.v_min, self.roi.v_max]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OdometryConfig":
        d = dict(d)
        if isinstance(d.get("roi"), (list, tuple)):
            d["roi"] = Roi(*map(int, d["roi"]))
        return cls(**d)


@dataclass
class OdometryResult:
    delta_x: EulerPose
    final_cost: float
    iterations: int
    residual_count: int
    converged: bool
    per_iteration_cost: list = field(default_factory=list)
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "delta_x": self.delta_x.to_dict(),
            "final_cost": float(self.final_cost),
            "iterations": int(self.iterations),
            "residual_count": int(self.residual_count),
            "converged": bool(self.converged),
            "per_iteration_cost": [float(c) for c in self.per_iteration_cost],
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OdometryResult":
        d = dict(d)
        d["delta_x"] = EulerPose(**d["delta_x"])
        return cls(**d)


@dataclass
class JacobianTerms:
    """Per-point intermediates of the analytic Jacobian (arrays broadcast over points).

    ``mu[..., j]`` is m_1j - m_3j * u and ``nu[..., j]`` is m_2j - m_3j * v.
    ``j_point[..., a, :]`` is the derivative of the moved point with respect to
    rotation angle ``a`` (alpha, beta, gamma); ``j_mu``/``j_nu`` are those
    derivatives pushed through the camera projection and divided by ``s``.
    """

    g_x: np.ndarray
    g_y: np.ndarray
    big_k: float
    f_p: float
    s: np.ndarray
    y_prime: np.ndarray
    z_prime: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    j_point: np.ndarray
    j_mu: np.ndarray
    j_nu: np.ndarray


# -- geometry -----------------------------------------------------------------------

def transform_point(p, pose: EulerPose) -> np.ndarray:
    R, t = pose.to_matrix()
    return np.asarray(p, float) @ R.T + t


def project_to_camera(p_prime, rig: SensorRig) -> np.ndarray:
    """Pixel (u, v) of device-frame point(s) after dehomogenising ``M [p; 1]``."""
    p = np.asarray(p_prime, float)
    hom = p @ rig.M[:, :3].T + rig.M[:, 3]
    s = hom[..., 2]
    if np.any(s <= MIN_DEPTH):
        raise OutOfFrustumError("point lies at or behind the camera plane")
    return hom[..., :2] / s[..., None]


def predict_phase(p, pose: EulerPose, rig: SensorRig, strict: bool = True):
    """Phase the projector assigns to point ``p`` after motion ``pose``.

    With ``strict`` a non-positive depth raises; a prediction outside [0, 2pi)
    is returned together with a ``False`` in-pattern flag.
    """
    pp = transform_point(p, pose)
    z = pp[..., 2]
    if strict and np.any(z <= MIN_DEPTH):
        raise OutOfFrustumError("point lies at or behind the projector plane")
    phi = (TWO_PI / rig.proj_height) * (rig.proj_fy * pp[..., 1] / z + rig.proj_cy)
    in_pattern = (phi >= 0.0) & (phi < TWO_PI)
    return phi, in_pattern


# -- sampling --------------------------------------------------------------------------

class PhaseSampler:
    """Bilinear phase lookup with central-difference gradient images.

    A gradient pixel is valid when both horizontal (or vertical) neighbours are
    valid and neither neighbour step exceeds ``max_phase_step``; this keeps
    samples off depth discontinuities.
    """

    def __init__(self, phase: PhaseImage, max_phase_step: float = np.inf,
                 max_curvature: float = np.inf):
        self.image = phase
        P, V = phase.phase, phase.valid
        H, W = P.shape
        gx = np.zeros_like(P)
        gy = np.zeros_like(P)
        gx_ok = np.zeros_like(V)
        gy_ok = np.zeros_like(V)
        gx[:, 1:-1] = 0.5 * (P[:, 2:] - P[:, :-2])
        gy[1:-1, :] = 0.5 * (P[2:, :] - P[:-2, :])
        gx_ok[:, 1:-1] = V[:, 2:] & V[:, 1:-1] & V[:, :-2] \
            & (np.abs(P[:, 2:] - P[:, 1:-1]) <= max_phase_step) \
            & (np.abs(P[:, 1:-1] - P[:, :-2]) <= max_phase_step)
        gy_ok[1:-1, :] = V[2:, :] & V[1:-1, :] & V[:-2, :] \
            & (np.abs(P[2:, :] - P[1:-1, :]) <= max_phase_step) \
            & (np.abs(P[1:-1, :] - P[:-2, :]) <= max_phase_step)
        if np.isfinite(max_curvature):
            # bilinear error grows with the second difference; skip strongly curved pixels
            with np.errstate(invalid="ignore"):
                gx_ok[:, 1:-1] &= np.abs(P[:, 2:] - 2 * P[:, 1:-1] + P[:, :-2]) <= max_curvature
                gy_ok[1:-1, :] &= np.abs(P[2:, :] - 2 * P[1:-1, :] + P[:-2, :]) <= max_curvature
        self.gx, self.gy = gx, gy
        self.grad_ok = gx_ok & gy_ok
        self.shape = (H, W)
        self._fields = np.stack([P, gx, gy], axis=-1).reshape(-1, 3)
        good = V & self.grad_ok
        self._cell_ok = np.zeros((H, W), dtype=bool)
        self._cell_ok[:-1, :-1] = good[:-1, :-1] & good[:-1, 1:] & good[1:, :-1] & good[1:, 1:]

    def _corners(self, u, v):
        H, W = self.shape
        u = np.asarray(u, float)
        v = np.asarray(v, float)
        inb = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (v >= 0) & (u <= W - 1) & (v <= H - 1)
        uc = np.where(inb, u, 0.0)
        vc = np.where(inb, v, 0.0)
        u0 = np.minimum(np.floor(uc).astype(int), max(W - 2, 0))
        v0 = np.minimum(np.floor(vc).astype(int), max(H - 2, 0))
        return inb, u0, v0, uc - u0, vc - v0

    def sample(self, u, v):
        """Value, g_x, g_y and a validity flag at sub-pixel (u, v)."""
        inb, u0, v0, fu, fv = self._corners(u, v)
        W = self.shape[1]
        k = v0 * W + u0
        F = self._fields
        fu, fv = fu[..., None], fv[..., None]
        out = (1 - fv) * ((1 - fu) * F[k] + fu * F[k + 1]) + fv * ((1 - fu) * F[k + W] + fu * F[k + W + 1])
        ok = inb & self._cell_ok.reshape(-1)[k]
        return out[..., 0], out[..., 1], out[..., 2], ok

    def default_roi(self) -> Roi:
        """Bounding box of the valid pixels shrunk by 5% per side."""
        vv, uu = np.nonzero(self.image.valid)
        if len(uu) == 0:
            raise InsufficientPointsError("target phase image has no valid pixels")
        u_lo, u_hi, v_lo, v_hi = uu.min(), uu.max() + 1, vv.min(), vv.max() + 1
        du, dv = 0.05 * (u_hi - u_lo), 0.05 * (v_hi - v_lo)
        return Roi(int(np.ceil(u_lo + du)), int(np.floor(u_hi - du)),
                   int(np.ceil(v_lo + dv)), int(np.floor(v_hi - dv)))


class AnalyticPhaseField:
    """Smooth phase field given as callables; same interface as ``PhaseSampler``.

    ``fn(u, v)`` returns the phase and ``grad(u, v)`` returns (d/du, d/dv).
    """

    def __init__(self, fn, grad, shape):
        self.fn, self.grad, self.shape = fn, grad, shape

    def sample(self, u, v):
        gx, gy = self.grad(u, v)
        H, W = self.shape
        ok = (u >= 0) & (v >= 0) & (u <= W - 1) & (v <= H - 1)
        return self.fn(u, v), gx, gy, ok

    def default_roi(self) -> Roi:
        H, W = self.shape
        return Roi(0, W, 0, H)


def sample_phase(phase: PhaseImage, mu: float, nu: float):
    """Bilinear value and central-difference gradients at one sub-pixel location.

    Returns ``None`` when a neighbour is invalid or the location is outside
    the image. Gradients are NaN where the neighbourhood cannot supply them.
    """
    sampler = phase if isinstance(phase, PhaseSampler) else PhaseSampler(phase)
    inb, u0, v0, fu, fv = sampler._corners(np.array([mu]), np.array([nu]))
    if not inb[0]:
        return None
    u0, v0, fu, fv = int(u0[0]), int(v0[0]), float(fu[0]), float(fv[0])
    P, V = sampler.image.phase, sampler.image.valid
    H, W = sampler.shape
    u1, v1 = min(u0 + 1, W - 1), min(v0 + 1, H - 1)
    if not (V[v0, u0] and V[v0, u1] and V[v1, u0] and V[v1, u1]):
        return None
    w = np.array([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv])

    def blend(A):
        return float(w @ np.array([A[v0, u0], A[v0, u1], A[v1, u0], A[v1, u1]]))

    G = sampler.grad_ok
    grads_ok = G[v0, u0] and G[v0, u1] and G[v1, u0] and G[v1, u1]
    gx = blend(sampler.gx) if grads_ok else float("nan")
    gy = blend(sampler.gy) if grads_ok else float("nan")
    return blend(P), gx, gy


# -- residuals and Jacobian ----------------------------------------------------------------

def _rotation_partials(alpha, beta, gamma):
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    Rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    Ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    Rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    dRx = np.array([[0, 0, 0], [0, -sa, -ca], [0, ca, -sa]])
    dRy = np.array([[-sb, 0, cb], [0, 0, 0], [-cb, 0, -sb]])
    dRz = np.array([[-sg, -cg, 0], [cg, -sg, 0], [0, 0, 0]])
    return np.stack([Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx])


@dataclass
class _Evaluation:
    e: np.ndarray
    valid: np.ndarray
    terms: Optional[JacobianTerms] = None
    index: Optional[np.ndarray] = None

    @property
    def cost(self) -> float:
        return 0.5 * float(np.sum(self.e * self.e))

    @property
    def count(self) -> int:
        return int(self.valid.sum())


def _evaluate(points, normals, x, rig, sampler, roi: Optional[Roi], cfg: Optional[OdometryConfig],
              with_terms: bool) -> _Evaluation:
    """Residuals at pose vector ``x`` for every point that survives the validity tests."""
    R = rotation_zyx(x[3], x[4], x[5])
    t = x[:3]
    Pp = points @ R.T + t
    M = rig.M
    hom = Pp @ M[:, :3].T + M[:, 3]
    s = hom[:, 2]
    zp = Pp[:, 2]
    front = (s > MIN_DEPTH) & (zp > MIN_DEPTH)
    s_safe = np.where(front, s, 1.0)
    z_safe = np.where(front, zp, 1.0)
    u = hom[:, 0] / s_safe
    v = hom[:, 1] / s_safe
    phi_hat = (TWO_PI / rig.proj_height) * (rig.proj_fy * Pp[:, 1] / z_safe + rig.proj_cy)
    val, gx, gy, ok = sampler.sample(u, v)
    valid = front & ok & (phi_hat >= 0.0) & (phi_hat < TWO_PI)
    if roi is not None:
        valid &= roi.contains(u, v)
    if cfg is not None and cfg.visibility:
        valid &= _visible(Pp, normals, R, s_safe, u, v, valid, rig, cfg)
    idx = np.nonzero(valid)[0]
    e = phi_hat[idx] - val[idx]
    ev = _Evaluation(e, valid, index=idx)
    if with_terms:
        ev.terms = _terms(points[idx], Pp[idx], u[idx], v[idx], s_safe[idx], gx[idx], gy[idx], x, rig)
    return ev


def _visible(Pp, normals, R, s, u, v, valid, rig, cfg) -> np.ndarray:
    """Back-face culling against both devices plus a coarse camera z-buffer."""
    keep = valid.copy()
    if normals is not None:
        n = normals @ R.T
        has_n = np.any(normals != 0.0, axis=1)
        to_proj = -Pp
        to_cam = rig.camera_center - Pp
        cos_p = np.einsum("ij,ij->i", n, to_proj) / np.linalg.norm(to_proj, axis=1)
        cos_c = np.einsum("ij,ij->i", n, to_cam) / np.linalg.norm(to_cam, axis=1)
        keep &= has_n & (cos_p > cfg.min_view_cos) & (cos_c > cfg.min_view_cos)
    idx = np.nonzero(keep)[0]
    if len(idx) == 0:
        return keep
    H, W = rig.cam_height, rig.cam_width
    cu = np.clip(np.floor(u[idx]).astype(int), 0, W - 1) + 1
    cv = np.clip(np.floor(v[idx]).astype(int), 0, H - 1) + 1
    # z-buffer padded by one pixel; the nearest depth in each 3x3 block decides
    zbuf = np.full((H + 2) * (W + 2), np.inf)
    flat = cv * (W + 2) + cu
    np.minimum.at(zbuf, flat, s[idx])
    zmin = np.full(len(idx), np.inf)
    for off in (-W - 3, -W - 2, -W - 1, -1, 0, 1, W + 1, W + 2, W + 3):
        np.minimum(zmin, zbuf[flat + off], out=zmin)
    occluded = s[idx] > zmin * (1.0 + cfg.depth_margin)
    keep[idx[occluded]] = False
    return keep


def _terms(P, Pp, u, v, s, gx, gy, x, rig) -> JacobianTerms:
    M = rig.M
    mu = M[0, :3][None, :] - M[2, :3][None, :] * u[:, None]
    nu = M[1, :3][None, :] - M[2, :3][None, :] * v[:, None]
    dR = _rotation_partials(x[3], x[4], x[5])           # (3 angles, 3, 3)
    j_point = np.einsum("aij,nj->nai", dR, P)            # (n, 3 angles, 3 coords)
    j_mu = np.einsum("nc,nac->na", mu, j_point) / s[:, None]
    j_nu = np.einsum("nc,nac->na", nu, j_point) / s[:, None]
    return JacobianTerms(g_x=gx, g_y=gy, big_k=rig.proj_height / TWO_PI, f_p=rig.proj_fy,
                         s=s, y_prime=Pp[:, 1], z_prime=Pp[:, 2], mu=mu, nu=nu,
                         j_point=j_point, j_mu=j_mu, j_nu=j_nu)


def jacobian_row(terms: JacobianTerms) -> np.ndarray:
    """d e / d(dx, dy, dz, alpha, beta, gamma) for every point in ``terms``.

    The phase prediction contributes f (dy' z' - dz' y') / (K z'^2); the sampled
    measurement contributes -(g_x du + g_y dv) with du = mu . dP' / s.
    """
    f, K = terms.f_p, terms.big_k
    y, z = np.asarray(terms.y_prime), np.asarray(terms.z_prime)
    gx, gy, s = np.asarray(terms.g_x), np.asarray(terms.g_y), np.asarray(terms.s)
    mu, nu = np.asarray(terms.mu), np.asarray(terms.nu)
    out = np.empty(np.shape(y) + (6,))
    image = (gx[..., None] * mu + gy[..., None] * nu) / s[..., None]
    out[..., 0] = -image[..., 0]
    out[..., 1] = f / (K * z) - image[..., 1]
    out[..., 2] = -f * y / (K * z * z) - image[..., 2]
    jp = np.asarray(terms.j_point)
    for a in range(3):
        jy, jz = jp[..., a, 1], jp[..., a, 2]
        out[..., 3 + a] = f * (jy * z - jz * y) / (K * z * z) \
            - (gx * terms.j_mu[..., a] + gy * terms.j_nu[..., a])
    return out


def residual(p, pose: EulerPose, rig: SensorRig, target):
    """Residual and Jacobian terms for one point, or ``None`` when it cannot be measured."""
    sampler = _as_sampler(target)
    pts = np.asarray(p, float).reshape(1, 3)
    ev = _evaluate(pts, None, pose.as_vector(), rig, sampler, None, None, with_terms=True)
    if ev.count == 0:
        return None
    t = ev.terms
    one = JacobianTerms(**{k: (getattr(t, k)[0] if isinstance(getattr(t, k), np.ndarray) else getattr(t, k))
                           for k in t.__dataclass_fields__})
    return float(ev.e[0]), one


def residuals(points, pose: EulerPose, rig: SensorRig, target):
    """Vectorised residuals: (e over valid points, valid mask, JacobianTerms)."""
    sampler = _as_sampler(target)
    pts = np.asarray(points, float).reshape(-1, 3)
    ev = _evaluate(pts, None, pose.as_vector(), rig, sampler, None, None, with_terms=True)
    return ev.e, ev.valid, ev.terms


def _as_sampler(target, max_phase_step: float = np.inf, max_curvature: float = np.inf):
    if isinstance(target, (PhaseSampler, AnalyticPhaseField)):
        return target
    return PhaseSampler(check_phase_image(target, "target"), max_phase_step, max_curvature)


def finite_difference_jacobian(points, normals, x, rig, sampler, roi, cfg, h: float = 1e-6):
    """Central differences of the residual, restricted to points valid at x and x +/- h."""
    base = _evaluate(points, normals, x, rig, sampler, roi, cfg, with_terms=False)
    idx = base.index
    J = np.zeros((len(idx), 6))
    keep = np.ones(len(idx), dtype=bool)
    sub_pts = points[idx]
    sub_n = None if normals is None else normals[idx]
    for k in range(6):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        ep = _evaluate(sub_pts, sub_n, xp, rig, sampler, None, None, with_terms=False)
        em = _evaluate(sub_pts, sub_n, xm, rig, sampler, None, None, with_terms=False)
        both = ep.valid & em.valid
        col = np.zeros(len(idx))
        fp = np.zeros(len(idx))
        fm = np.zeros(len(idx))
        fp[ep.index] = ep.e
        fm[em.index] = em.e
        col[both] = (fp[both] - fm[both]) / (2 * h)
        J[:, k] = col
        keep &= both
    return base, J, keep


# -- optimiser -----------------------------------------------------------------------

def estimate_motion(source_cloud, target_phase, rig: SensorRig, init: Optional[EulerPose] = None,
                    cfg: Optional[OdometryConfig] = None) -> OdometryResult:
    """Motion taking ``source_cloud`` (frame k) into the frame where ``target_phase`` was seen."""
    cfg = cfg or OdometryConfig()
    cloud = check_cloud(source_cloud, "source_cloud").subsample(cfg.max_points)
    sampler = _as_sampler(target_phase, cfg.max_phase_step, cfg.max_curvature)
    roi = sampler.default_roi() if cfg.roi == "auto" else cfg.roi
    roi.validate(sampler.shape[1], sampler.shape[0])
    pts, normals = cloud.points, cloud.normals
    x = (init or EulerPose()).as_vector()

    def evaluate(xv, with_jac):
        if with_jac and cfg.jacobian == "finite_difference":
            ev, J, keep = finite_difference_jacobian(pts, normals, xv, rig, sampler, roi, cfg)
            ev.e, ev.index, J = ev.e[keep], ev.index[keep], J[keep]
            return ev, J
        ev = _evaluate(pts, normals, xv, rig, sampler, roi, cfg, with_terms=with_jac)
        return ev, (jacobian_row(ev.terms) if with_jac else None)

    ev, J = evaluate(x, True)
    if ev.count < cfg.min_points:
        raise InsufficientPointsError(
            f"only {ev.count} valid residuals in the ROI (need {cfg.min_points})")
    run = _Descent(cfg, evaluate, len(pts))
    run.start(x, ev, J)
    run.iterate(cfg.max_iters, stall=0.05)
    # Surfaces exposed only in the target have no source points to occlude them
    # and leave a few gross residuals that can pull the optimum aside. Once the
    # plain solve has settled, gate them out and refine on a fixed inlier set.
    if run.alive and run.iterations < cfg.max_iters:
        run.freeze_inliers()
        if run.n_active >= cfg.min_points:
            run.iterate(cfg.max_iters - run.iterations)
    return OdometryResult(EulerPose.from_vector(run.x), run.F, run.iterations, run.n_active,
                          run.converged, run.costs, run.message)


class _Descent:
    """Armijo-guarded descent state shared by the plain and the gated phase."""

    def __init__(self, cfg: OdometryConfig, evaluate, n_points: int):
        self.cfg = cfg
        self.evaluate = evaluate
        self.n_points = n_points
        self.active = None          # None: every valid point counts
        self.gate = np.inf
        self.iterations = 0
        self.costs: list[float] = []
        self.converged, self.message, self.alive = False, "max_iters reached", True
        self.alpha = cfg.step_init

    @property
    def n_active(self) -> int:
        return len(self.e)

    def start(self, x, ev, J):
        self.x = x
        self._take(ev, J)
        self.costs.append(self.F)

    def _take(self, ev, J):
        if self.active is None:
            self.e, self.J, self.index = ev.e, J, ev.index
        else:
            keep = self.active[ev.index] & (np.abs(ev.e) <= self.gate)
            self.active[:] = False
            self.active[ev.index[keep]] = True
            self.e, self.J, self.index = ev.e[keep], (None if J is None else J[keep]), ev.index[keep]
        self.F = 0.5 * float(self.e @ self.e)

    def _accept(self, ev_try, step: float, slope: float) -> bool:
        """Armijo test on the points measurable both here and at the trial pose.

        Comparing on the shared set keeps a step from looking good merely
        because it pushed points out of view.
        """
        if ev_try.count < self.cfg.min_points:
            return False
        here = np.full(self.n_points, np.nan)
        here[self.index] = self.e
        there = np.full(self.n_points, np.nan)
        keep = np.abs(ev_try.e) <= self.gate
        there[ev_try.index[keep]] = ev_try.e[keep]
        both = np.isfinite(here) & np.isfinite(there)
        # a step that only sheds points would win on an empty common set
        if both.sum() < max(self.cfg.min_points, 0.5 * self.n_active):
            return False
        F_here = 0.5 * float(np.sum(here[both] ** 2))
        F_there = 0.5 * float(np.sum(there[both] ** 2))
        ok = F_there <= F_here + self.cfg.armijo_c * step * slope * (F_here / max(self.F, 1e-300))
        if self.active is None:
            ok &= ev_try.cost <= self.F
        return ok

    def freeze_inliers(self):
        ev, J = self.evaluate(self.x, True)
        e_abs = np.abs(ev.e)
        self.gate = max(self.cfg.outlier_k * 1.4826 * float(np.median(e_abs)), self.cfg.outlier_floor)
        self.active = np.zeros(self.n_points, dtype=bool)
        self.active[ev.index] = True
        self._take(ev, J)
        self.costs[-1] = self.F     # same iterate, measured on the inliers only
        self.converged, self.message = False, "max_iters reached"

    def iterate(self, budget: int, stall: float = 0.0):
        cfg = self.cfg
        for _ in range(budget):
            g = self.J.T @ self.e
            if cfg.solver == "gauss_newton":
                A = self.J.T @ self.J
                try:
                    delta = -np.linalg.solve(A + 1e-12 * np.trace(A) / 6 * np.eye(6), g)
                except np.linalg.LinAlgError:
                    delta = -np.linalg.lstsq(A, g, rcond=None)[0]
                step = 1.0
            else:
                delta, step = -g, self.alpha
            slope = float(g @ delta)
            if np.linalg.norm(step * delta) < cfg.tol_step:
                self.converged, self.message = True, "step below tol_step"
                return
            if slope >= 0:
                delta, slope, step = -g, -float(g @ g), self.alpha
            accepted = False
            while step * np.linalg.norm(delta) >= 1e-3 * cfg.tol_step:
                x_try = self.x + step * delta
                ev_try, _ = self.evaluate(x_try, False)
                if self._accept(ev_try, step, slope):
                    accepted = True
                    break
                step *= cfg.armijo_shrink
            if not accepted:
                # Bilinear sampling makes the cost piecewise smooth, so the last few
                # model steps can be unrealisable. Count it as converged when the
                # model itself promised only a sliver of the remaining cost.
                self.converged = 0.5 * abs(slope) <= 1e-3 * self.F or self.F < 1e-24
                self.message = "line search exhausted" + (" at optimum" if self.converged else "")
                return
            self.iterations += 1
            dx = step * delta
            self.x = x_try
            F_prev = self.F
            ev, J = self.evaluate(self.x, True)
            self._take(ev, J)
            if self.n_active < cfg.min_points:
                self.alive, self.message = False, f"only {self.n_active} residuals left"
                return
            self.costs.append(self.F)
            if cfg.solver == "steepest_descent":
                self.alpha = step * 2.0
            if np.linalg.norm(dx) < cfg.tol_step:
                self.converged, self.message = True, "step below tol_step"
                return
            if abs(F_prev - self.F) <= cfg.tol_cost * max(F_prev, 1e-300):
                self.converged, self.message = True, "relative cost change below tol_cost"
                return
            if F_prev - self.F < stall * F_prev:
                self.message = "stalled"
                return


# -- estimator wrapper ---------------------------------------------------------------

class PhaseOdometry(BaseEstimator):
    """Estimator API around :func:`estimate_motion`.

    ``fit(X, y)`` takes the source cloud ``X`` and the target ``PhaseImage`` ``y``.
    After fitting, ``transform`` moves points by the estimated motion and
    ``predict`` returns their predicted phase.
    """

    def __init__(self, rig: Optional[SensorRig] = None, solver: str = "gauss_newton",
                 jacobian: str = "analytic", max_iters: int = 50, step_init: float = 1e-4,
                 armijo_c: float = 1e-4, armijo_shrink: float = 0.5, tol_step: float = 1e-9,
                 tol_cost: float = 1e-12, roi="auto", max_points: Optional[int] = 50_000,
                 max_phase_step: float = 0.1, visibility: bool = True):
        self.rig = rig
        self.solver = solver
        self.jacobian = jacobian
        self.max_iters = max_iters
        self.step_init = step_init
        self.armijo_c = armijo_c
        self.armijo_shrink = armijo_shrink
        self.tol_step = tol_step
        self.tol_cost = tol_cost
        self.roi = roi
        self.max_points = max_points
        self.max_phase_step = max_phase_step
        self.visibility = visibility

    def _config(self) -> OdometryConfig:
        return OdometryConfig(
            max_iters=self.max_iters, step_init=self.step_init, armijo_c=self.armijo_c,
            armijo_shrink=self.armijo_shrink, tol_step=self.tol_step, tol_cost=self.tol_cost,
            roi=self.roi, solver=self.solver, jacobian=self.jacobian, max_points=self.max_points,
            max_phase_step=self.max_phase_step, visibility=self.visibility)

    def fit(self, X, y, init: Optional[EulerPose] = None):
        if self.rig is None:
            raise ValueError("PhaseOdometry needs a SensorRig")
        cloud = check_cloud(X)
        target = check_phase_image(y)
        self.result_ = estimate_motion(cloud, target, self.rig, init, self._config())
        self.delta_x_ = self.result_.delta_x
        self.n_iter_ = self.result_.iterations
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "delta_x_")
        return transform_point(check_points(X), self.delta_x_)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "delta_x_")
        phi, _ = predict_phase(check_points(X), self.delta_x_, self.rig, strict=False)
        return phi

    def score(self, X, y) -> float:
        """Negative RMS phase residual at the fitted motion."""
        check_is_fitted(self, "delta_x_")
        e, _, _ = residuals(check_points(X), self.delta_x_, self.rig, check_phase_image(y))
        return -float(np.sqrt(np.mean(e * e))) if len(e) else -np.inf

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_rotation
from slikit.core import EulerPose, PhaseImage, PointCloud, SensorRig, default_rig
from slikit.errors import InsufficientPointsError, OutOfFrustumError
from slikit.metrics import pose_error
from slikit.odometry import (AnalyticPhaseField, OdometryConfig, OdometryResult, PhaseOdometry,
                             PhaseSampler, estimate_motion, jacobian_row, predict_phase,
                             project_to_camera, residual, residuals, sample_phase, transform_point)
from slikit.sim import Plane, Scene, desk_scene, relative_pose, render_phase_direct

DEG = np.pi / 180
TRUE = EulerPose(0.005, 0.0, 0.01, 0.5 * DEG, 1 * DEG, 0.5 * DEG)


def _colocated(f=500.0, w=640, h=480):
    return SensorRig(cam_fx=f, cam_fy=f, cam_cx=w / 2, cam_cy=h / 2, cam_width=w, cam_height=h,
                     proj_fy=800, proj_cy=240, proj_height=480, proj_width=640)


@pytest.fixture(scope="module")
def desk_pair():
    rig = default_rig(160, 120)
    scene = desk_scene()
    p0, c0 = render_phase_direct(scene, rig, np.eye(4))
    p1, _ = render_phase_direct(scene, rig, relative_pose(TRUE))
    return rig, p0, c0, p1


class TestGeometry:
    def test_transform_identity_and_translation(self):
        p = np.array([0.3, -0.2, 1.1])
        assert np.array_equal(transform_point(p, EulerPose()), p)
        assert np.allclose(transform_point([0, 0, 1], EulerPose(dx=0.1)), [0.1, 0, 1])

    @given(st.integers(0, 2**32 - 1))
    def test_transform_matches_homogeneous(self, seed):
        rng = np.random.default_rng(seed)
        pose = EulerPose(*rng.normal(size=3), *rng.uniform(-1, 1, 3))
        p = rng.normal(size=3)
        assert np.allclose(transform_point(p, pose), (pose.to_homogeneous() @ np.append(p, 1))[:3],
                           atol=1e-12)

    def test_principal_point(self):
        rig = default_rig()
        axis = rig.extrinsic_rotation.T @ [0, 0, 1]
        u, v = project_to_camera(rig.camera_center + 1.3 * axis, rig)
        assert (u, v) == pytest.approx((rig.cam_cx, rig.cam_cy), abs=1e-9)

    def test_depth_doubling_halves_offset(self):
        rig = _colocated()
        a = project_to_camera([0.1, -0.05, 1.0], rig) - [320, 240]
        b = project_to_camera([0.1, -0.05, 2.0], rig) - [320, 240]
        assert np.allclose(b, a / 2, atol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_projection_two_step(self, seed):
        rng = np.random.default_rng(seed)
        R = random_rotation(rng, 0.4)
        rig = SensorRig(cam_fx=600, cam_fy=610, cam_cx=300, cam_cy=250, cam_width=640,
                        cam_height=480, proj_fy=800, proj_cy=240, proj_height=480, proj_width=640,
                        extrinsic_rotation=R, extrinsic_translation=rng.uniform(-0.2, 0.2, 3))
        p = np.array([*rng.uniform(-0.3, 0.3, 2), rng.uniform(1, 3)])
        cam = rig.K_cam @ (R @ p + rig.extrinsic_translation)
        uv = project_to_camera(p, rig)
        assert np.allclose(uv, cam[:2] / cam[2], atol=1e-12 * max(1.0, np.abs(uv).max()))

    def test_colocated_reduces_to_3x3(self):
        rig = _colocated()
        p = np.random.default_rng(0).uniform(-0.2, 0.2, (50, 3)) + [0, 0, 1.2]
        hom = p @ rig.K_cam.T
        assert np.array_equal(rig.M[:, 3], np.zeros(3))
        assert np.allclose(project_to_camera(p, rig), hom[:, :2] / hom[:, 2:], atol=1e-12)

    def test_behind_camera_raises(self):
        with pytest.raises(OutOfFrustumError):
            project_to_camera([0, 0, -1.0], _colocated())
        with pytest.raises(OutOfFrustumError):
            predict_phase([0, 0, -1.0], EulerPose(), _colocated())

    def test_predict_phase_scalar_case(self):
        phi, ok = predict_phase([0, 0.15, 1.0], EulerPose(), _colocated())
        assert phi == pytest.approx(3 * np.pi / 2, abs=1e-12) and ok

    def test_predict_phase_principal_ray(self):
        phi, _ = predict_phase([0.2, 0.0, 1.7], EulerPose(), _colocated())
        assert phi == pytest.approx(2 * np.pi * 240 / 480, abs=1e-12)

    def test_predict_phase_outside_pattern_flagged(self):
        _, ok = predict_phase([0, 2.0, 1.0], EulerPose(), _colocated())
        assert not ok


class TestSampling:
    def test_bilinear_center(self):
        img = PhaseImage(np.array([[0.0, 1.0], [2.0, 3.0]]), np.ones((2, 2), bool))
        assert sample_phase(img, 0.5, 0.5)[0] == pytest.approx(1.5, abs=1e-15)

    def test_lattice_points_exact(self):
        rng = np.random.default_rng(1)
        P = rng.uniform(0, 6, (6, 7))
        img = PhaseImage(P, np.ones_like(P, bool))
        for v in range(6):
            for u in range(7):
                assert sample_phase(img, u, v)[0] == P[v, u]

    def test_invalid_neighbour_and_outside(self):
        P = np.ones((4, 4))
        V = np.ones((4, 4), bool)
        V[1, 2] = False
        img = PhaseImage(P, V)
        assert sample_phase(img, 1.5, 0.5) is None
        assert sample_phase(img, -0.1, 1.0) is None
        assert sample_phase(img, 0.5, 2.5) is not None

    def test_second_order_convergence(self):
        def field(u, v, h):
            return 2.0 + 0.8 * np.sin(0.9 * u * h) * np.cos(0.7 * v * h)

        errs = []
        pts = np.random.default_rng(2).uniform(2.0, 6.0, (200, 2))
        for h in (0.2, 0.1, 0.05):
            n = int(round(8 / h)) + 1
            vv, uu = np.mgrid[0:n, 0:n].astype(float)
            img = PhaseImage(field(uu, vv, h), np.ones((n, n), bool))
            s = PhaseSampler(img)
            val, _, _, ok = s.sample(pts[:, 0] / h, pts[:, 1] / h)
            assert ok.all()
            truth = 2.0 + 0.8 * np.sin(0.9 * pts[:, 0]) * np.cos(0.7 * pts[:, 1])
            errs.append(np.abs(val - truth).max())
        assert errs[0] / errs[1] == pytest.approx(4, rel=0.25)
        assert errs[1] / errs[2] == pytest.approx(4, rel=0.25)

    def test_sampler_agrees_with_scalar_sampler(self):
        rng = np.random.default_rng(3)
        P = rng.uniform(0, 6, (10, 12))
        img = PhaseImage(P, np.ones_like(P, bool))
        s = PhaseSampler(img)
        for u, v in rng.uniform(1, 8, (20, 2)):
            ref = sample_phase(img, u, v)
            val, gx, gy, ok = s.sample(np.array([u]), np.array([v]))
            assert ok[0] and val[0] == pytest.approx(ref[0]) and gx[0] == pytest.approx(ref[1])


class TestResidual:
    def test_true_motion_gives_tiny_residual(self):
        rig = default_rig()
        scene = Scene([Plane([0, 0, 1.3], [0.2, -0.3, -1.0])])
        _, c0 = render_phase_direct(scene, rig, np.eye(4))
        p1, _ = render_phase_direct(scene, rig, relative_pose(TRUE))
        e, valid, _ = residuals(c0.points, TRUE, rig, p1)
        assert len(e) > 100_000
        assert np.abs(e).max() < 1e-6

    def test_self_registration_zero(self, desk_pair):
        rig, p0, c0, _ = desk_pair
        e, _, _ = residuals(c0.points, EulerPose(), rig, p0)
        assert len(e) > 1000
        assert np.abs(e).max() < 1e-9

    def test_depth_offset_sign_on_tilted_plane(self):
        rig = default_rig()
        n = np.array([0.0, -0.4, -1.0])
        n /= np.linalg.norm(n)
        q = np.array([0, 0, 1.3])
        scene = Scene([Plane(q, n)])
        phase, cloud = render_phase_direct(scene, rig, np.eye(4))
        dz = 0.004
        pts = cloud.points[::997]
        e, valid, _ = residuals(pts, EulerPose(dz=dz), rig, phase)
        moved = pts[valid] + [0, 0, dz]
        # camera ray through each moved point, intersected with the plane
        c = rig.camera_center
        d = moved - c
        lam = ((q - c) @ n) / (d @ n)
        seen = c + lam[:, None] * d
        expect = (2 * np.pi / rig.proj_height) * (rig.proj_fy * (moved[:, 1] / moved[:, 2] - seen[:, 1] / seen[:, 2]))
        assert np.all(np.abs(expect) > 1e-4)
        assert np.all(np.sign(e) == np.sign(expect))
        assert np.abs(e - expect).max() < 1e-4 * np.abs(expect).max() + 1e-6

    def test_residual_invalid_returns_none(self):
        rig = _colocated()
        img = PhaseImage(np.zeros((480, 640)), np.zeros((480, 640), bool))
        assert residual([0, 0, 1.0], EulerPose(), rig, img) is None


class TestJacobian:
    def _flat(self, value=2.0):
        return AnalyticPhaseField(lambda u, v: np.full_like(u, value),
                                  lambda u, v: (np.zeros_like(u), np.zeros_like(u)), (480, 640))

    def test_zero_gradient_translation_columns(self):
        rig = _colocated()
        p = np.array([0.05, 0.1, 1.2])
        e, terms = residual(p, EulerPose(), rig, self._flat())
        J = jacobian_row(terms)
        K = rig.proj_height / (2 * np.pi)
        assert J[0] == pytest.approx(0.0, abs=1e-15)
        assert J[1] == pytest.approx(rig.proj_fy / (K * p[2]), rel=1e-12)

    def test_symmetric_point_has_no_roll_term(self):
        rig = _colocated()
        field = AnalyticPhaseField(lambda u, v: 0.01 * (u - 320) ** 2 + 0.02 * (v - 240) ** 2,
                                   lambda u, v: (0.02 * (u - 320), 0.04 * (v - 240)), (480, 640))
        _, terms = residual([0.0, 0.0, 1.0], EulerPose(), rig, field)
        assert abs(jacobian_row(terms)[5]) < 1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        rig = default_rig(standoff=rng.uniform(0.8, 2.0), baseline=rng.uniform(0.05, 0.3))
        a, b, w = rng.uniform(0.5, 3), rng.normal(0, 0.005), rng.normal(0, 0.02, 2)
        field = AnalyticPhaseField(
            lambda u, v: a + b * v + 0.3 * np.sin(w[0] * u + w[1] * v),
            lambda u, v: (0.3 * w[0] * np.cos(w[0] * u + w[1] * v),
                          b + 0.3 * w[1] * np.cos(w[0] * u + w[1] * v)), (480, 640))
        pose = EulerPose(*rng.uniform(-0.02, 0.02, 3), *rng.uniform(-0.03, 0.03, 3))
        z = rng.uniform(0.8, 1.8)
        p = np.array([rng.uniform(-0.15, 0.15) * z, rng.uniform(-0.15, 0.15) * z, z])
        out = residual(p, pose, rig, field)
        if out is None:
            return
        J = jacobian_row(out[1])
        h = 1e-6
        for k in range(6):
            x = pose.as_vector()
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            ep, em = residual(p, EulerPose.from_vector(xp), rig, field), residual(p, EulerPose.from_vector(xm), rig, field)
            if ep is None or em is None:
                return
            fd = (ep[0] - em[0]) / (2 * h)
            if abs(fd) >= 1e-3:
                assert abs(J[k] - fd) < 1e-5 * abs(fd)
            else:
                assert abs(J[k] - fd) < 1e-8


class TestEstimateMotion:
    def test_zero_motion_fixed_point(self, desk_pair):
        rig, p0, c0, _ = desk_pair
        res = estimate_motion(c0, p0, rig, EulerPose())
        assert res.iterations <= 2
        assert np.linalg.norm(res.delta_x.as_vector()) < 1e-8
        assert res.converged

    def test_recovers_motion_and_descends(self, desk_pair):
        rig, _, c0, p1 = desk_pair
        res = estimate_motion(c0, p1, rig, EulerPose())
        t, r = pose_error(res.delta_x, TRUE)
        assert t < 0.1e-3 and r < 0.01
        assert res.converged
        assert len(res.per_iteration_cost) == res.iterations + 1
        assert np.all(np.diff(res.per_iteration_cost) <= 0)

    @pytest.mark.parametrize("fraction", [0.1, 0.25, 0.4])
    def test_perturbed_init_same_optimum(self, desk_pair, fraction):
        from slikit.sim import perturb_pose
        rig, _, c0, p1 = desk_pair
        ref = estimate_motion(c0, p1, rig, EulerPose()).delta_x
        for seed in range(3):
            res = estimate_motion(c0, p1, rig, perturb_pose(TRUE, fraction, seed))
            t, r = pose_error(res.delta_x, ref)
            assert t < 2e-6 and r < 2e-4

    def test_finite_difference_mode_agrees(self, desk_pair):
        rig, _, c0, p1 = desk_pair
        a = estimate_motion(c0, p1, rig, EulerPose())
        b = estimate_motion(c0, p1, rig, EulerPose(), OdometryConfig(jacobian="finite_difference"))
        # the difference path drops points invalid at x +/- h, so the optima differ slightly
        for res in (a, b):
            t, r = pose_error(res.delta_x, TRUE)
            assert t < 1e-4 and r < 0.01
        assert pose_error(a.delta_x, b.delta_x)[0] < 2e-5

    @pytest.mark.slow
    def test_steepest_descent_reaches_same_optimum(self, desk_pair):
        rig, _, c0, p1 = desk_pair
        cfg = dict(max_points=3000, max_iters=6000)
        gn = estimate_motion(c0, p1, rig, None, OdometryConfig(solver="gauss_newton", **cfg))
        sd = estimate_motion(c0, p1, rig, None, OdometryConfig(solver="steepest_descent", **cfg))
        assert sd.converged and np.all(np.diff(sd.per_iteration_cost) <= 0)
        t, r = pose_error(gn.delta_x, sd.delta_x)
        assert t < 2e-5 and r < 2e-3

    def test_too_few_points(self, desk_pair):
        rig, p0, _, _ = desk_pair
        with pytest.raises(InsufficientPointsError):
            estimate_motion(PointCloud(np.array([[0, 0, 1.2]] * 5)), p0, rig)
        empty = PhaseImage(np.zeros(p0.shape), np.zeros(p0.shape, bool))
        with pytest.raises(InsufficientPointsError):
            estimate_motion(PointCloud(np.array([[0, 0, 1.2]] * 500)), empty, rig)

    def test_config_validation_and_round_trip(self):
        with pytest.raises(ValueError):
            OdometryConfig(solver="newton")
        with pytest.raises(ValueError):
            OdometryConfig(armijo_c=2.0)
        cfg = OdometryConfig(max_iters=7)
        assert OdometryConfig.from_dict(cfg.to_dict()) == cfg

    def test_result_round_trip(self, desk_pair):
        rig, _, c0, p1 = desk_pair
        res = estimate_motion(c0, p1, rig, EulerPose(), OdometryConfig(max_iters=3))
        again = OdometryResult.from_dict(res.to_dict())
        assert again.to_dict() == res.to_dict()
        assert res.iterations <= 3


class TestEstimator:
    def test_fit_predict_score(self, desk_pair):
        from sklearn.base import clone
        rig, _, c0, p1 = desk_pair
        est = PhaseOdometry(rig=rig).fit(c0, p1)
        assert pose_error(est.delta_x_, TRUE)[0] < 1e-4
        moved = est.transform(c0.points[:10])
        assert np.allclose(moved, transform_point(c0.points[:10], est.delta_x_))
        assert est.predict(c0.points[:10]).shape == (10,)
        assert est.score(c0.points, p1) > -0.05
        assert np.array_equal(clone(est).get_params()["rig"].M, rig.M)

    def test_unfitted_raises(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            PhaseOdometry(rig=default_rig()).transform(np.zeros((1, 3)))

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_rotation
from slikit.core import EulerPose, SensorRig, default_rig
from slikit.errors import SceneParseError
from slikit.io import load_dataset
from slikit.odometry import predict_phase
from slikit.pmp import PmpConfig, decode_phase
from slikit.se3 import rotation_angle
from slikit.sim import (Plane, Scene, Sphere, TrajectorySpec, TriangleMesh, box_mesh, desk_scene,
                        generate_dataset, load_scene, orbit_scene, perturb_pose, render_phase_direct,
                        render_raw_patterns, scene_from_dict, uv_sphere_mesh)

CFG = PmpConfig()


def _colocated(fy_cam=200.0, fy_proj=200.0):
    return SensorRig(cam_fx=fy_cam, cam_fy=fy_cam, cam_cx=40, cam_cy=30, cam_width=80, cam_height=60,
                     proj_fy=fy_proj, proj_cy=30, proj_height=60, proj_width=80)


def test_background_is_ambient():
    scene = Scene([Sphere([0, 0, 1.2], 0.05)], ambient=0.07)
    imgs = render_raw_patterns(scene, default_rig(80, 60), np.eye(4), CFG)
    for img in imgs:
        assert img.intensity[0, 0] == pytest.approx(0.07, abs=1e-15)
        assert img.intensity[-1, -1] == pytest.approx(0.07, abs=1e-15)


@pytest.mark.parametrize("fy_proj", [200.0, 150.0])
def test_plane_columns_follow_pattern(fy_proj):
    rig = _colocated(200.0, fy_proj)
    scene = Scene([Plane([0, 0, 1.0], [0, 0, -1.0], albedo=1.0)], ambient=0.0)
    imgs = render_raw_patterns(scene, rig, np.eye(4), CFG)
    v = np.arange(60.0)[:, None]
    row = rig.proj_cy + (fy_proj / 200.0) * (v - rig.cam_cy)
    inside = ((row >= 0) & (row < 60)).ravel()
    for n, img in enumerate(imgs, start=1):
        expect = np.broadcast_to(CFG.brightness_a + CFG.modulation_b *
                                 np.cos(2 * np.pi * row / 60 - 2 * np.pi * n / 4), (60, 80))
        assert np.abs(img.intensity[inside] - expect[inside]).max() < 1e-12


def test_plane_phase_linear_down_columns():
    rig = _colocated()
    phase, _ = render_phase_direct(Scene([Plane([0, 0, 1.0], [0, 0, -1.0])]), rig, np.eye(4))
    assert phase.valid.all()
    assert np.abs(np.diff(phase.phase, 2, axis=0)).max() < 1e-12
    assert np.abs(np.diff(phase.phase, axis=1)).max() < 1e-12


def test_shadows_decode_invalid():
    rig = default_rig(160, 120)
    scene = Scene([Plane([0, 0, 1.5], [0, 0, -1.0]), Sphere([0, 0, 1.0], 0.12)])
    decoded = decode_phase(render_raw_patterns(scene, rig, np.eye(4), CFG), CFG)
    u, v = np.meshgrid(np.arange(160.0), np.arange(120.0))
    d = np.stack([(u - rig.cam_cx) / rig.cam_fx, (v - rig.cam_cy) / rig.cam_fy, np.ones_like(u)], -1)
    d = d.reshape(-1, 3) @ rig.extrinsic_rotation
    t, s, _ = scene.intersect(rig.camera_center, d)
    x = rig.camera_center + t[:, None] * d
    on_plane = (s == 0)
    shadowed = np.zeros(len(t), bool)
    shadowed[on_plane] = scene.occluded(np.zeros(3), x[on_plane], 1 - 1e-9)
    assert shadowed.sum() > 50
    assert not decoded.valid.ravel()[shadowed].any()


def test_visibility_soundness():
    rig = default_rig(80, 60)
    scene = desk_scene()
    phase, cloud = render_phase_direct(scene, rig, np.eye(4))
    assert not scene.occluded(np.zeros(3), cloud.points, 1 - 1e-9).any()


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000))
def test_direct_matches_decoded(seed):
    rng = np.random.default_rng(seed)
    rig = default_rig(80, 60)
    T = EulerPose(*rng.uniform(-0.05, 0.05, 3), *rng.uniform(-0.05, 0.05, 3)).to_homogeneous()
    for scene in (desk_scene(), orbit_scene()):
        direct, _ = render_phase_direct(scene, rig, T)
        decoded = decode_phase(render_raw_patterns(scene, rig, T, CFG), CFG)
        both = direct.valid & decoded.valid
        err = np.abs(np.angle(np.exp(1j * (direct.phase - decoded.phase))))[both]
        assert err.max(initial=0.0) < 1e-6
        assert both.sum() >= 0.99 * direct.valid.sum()


def test_direct_cloud_reprojects_to_its_phase():
    rig = default_rig(80, 60)
    phase, cloud = render_phase_direct(desk_scene(), rig, np.eye(4))
    phi, ok = predict_phase(cloud.points, EulerPose(), rig, strict=False)
    u, v = cloud.source_pixel.T.astype(int)
    assert ok.all()
    assert np.abs(phi - phase.phase[v, u]).max() < 1e-9


def test_bvh_matches_brute_force():
    rng = np.random.default_rng(4)
    v, f = uv_sphere_mesh([0, 0, 1.0], 0.3, 12, 24)
    mesh = TriangleMesh(v, f)
    o = rng.normal(0, 0.05, 3)
    d = np.column_stack([rng.uniform(-0.5, 0.5, 2000), rng.uniform(-0.5, 0.5, 2000), np.ones(2000)])
    a = mesh.intersect(o, d, np.full(2000, np.inf))
    b = mesh.intersect_brute(o, d, np.full(2000, np.inf))
    assert np.isfinite(a).sum() > 200
    assert np.array_equal(a, b)


def test_mesh_quad_renders_like_plane():
    rig = default_rig(80, 60)
    v = np.array([[-5, -5, 1.0], [5, -5, 1.0], [5, 5, 1.0], [-5, 5, 1.0]])
    mesh = Scene([TriangleMesh(v, [[0, 1, 2], [0, 2, 3]])])
    plane = Scene([Plane([0, 0, 1.0], [0, 0, -1.0])])
    a, _ = render_phase_direct(mesh, rig, np.eye(4))
    b, _ = render_phase_direct(plane, rig, np.eye(4))
    assert np.array_equal(a.valid, b.valid)
    assert np.abs(a.phase - b.phase).max() < 1e-9


def test_box_mesh_is_closed():
    v, f = box_mesh([0, 0, 0], 1.0)
    edges = {}
    for tri in f:
        for i in range(3):
            e = tuple(sorted((tri[i], tri[(i + 1) % 3])))
            edges[e] = edges.get(e, 0) + 1
    assert len(f) == 12 and set(edges.values()) == {2}


def test_orbit_trajectory():
    poses = TrajectorySpec("orbit", radius=1.2, step_deg=20, count=18).poses()
    assert len(poses) == 18
    assert np.degrees(rotation_angle(poses[-1][:3, :3])) == pytest.approx(20.0, abs=1e-9)
    centre = np.array([0, 0, 1.2])
    for T in poses:
        assert np.linalg.norm(T[:3, 3] - centre) == pytest.approx(1.2, abs=1e-12)
        assert np.allclose(T[:3, :3].T @ (centre - T[:3, 3]), [0, 0, 1.2], atol=1e-12)


def test_orbit_dataset_small(tmp_path):
    ds = generate_dataset(orbit_scene(), default_rig(64, 48), TrajectorySpec(count=18), CFG,
                          tmp_path / "ds")
    assert len(ds) == 18
    again = load_dataset(tmp_path / "ds")
    assert len(again) == 18
    for a, b in zip(ds.frames, again.frames):
        assert np.array_equal(a.phase.phase, b.phase.phase)


def test_identity_trajectory_gives_identical_frames():
    ds = generate_dataset(desk_scene(), default_rig(64, 48),
                          TrajectorySpec("motions", motions=[EulerPose()]), CFG)
    a, b = ds.frames
    assert np.array_equal(a.phase.phase, b.phase.phase)
    assert np.array_equal(a.cloud.points, b.cloud.points)


def test_random_trajectory_deterministic(tmp_path):
    spec = TrajectorySpec("random_6dof", count=3, seed=11)
    generate_dataset(desk_scene(), default_rig(48, 36), spec, CFG, tmp_path / "a")
    generate_dataset(desk_scene(), default_rig(48, 36), spec, CFG, tmp_path / "b")
    for p in sorted((tmp_path / "a").rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_trajectory_validation():
    with pytest.raises(ValueError):
        TrajectorySpec("spiral")
    with pytest.raises(ValueError):
        TrajectorySpec("orbit", step_deg=20, count=30)


class TestPerturb:
    def test_zero_fraction(self):
        p = EulerPose(0.01, -0.02, 0.003, 0.01, 0.02, -0.01)
        assert perturb_pose(p, 0.0, 5) == p

    def test_reproducible(self):
        p = EulerPose(0.01, -0.02, 0.003, 0.01, 0.02, -0.01)
        assert perturb_pose(p, 0.5, 5) == perturb_pose(p, 0.5, 5)
        assert perturb_pose(p, 0.5, 5) != perturb_pose(p, 0.5, 6)

    @given(st.floats(0, 5), st.integers(0, 2**31))
    def test_zero_stays_zero(self, f, seed):
        assert perturb_pose(EulerPose(), f, seed) == EulerPose()

    @given(st.floats(0, 1), st.integers(0, 2**31))
    def test_bounded(self, f, seed):
        p = EulerPose(0.01, -0.02, 0.003, 0.01, 0.02, -0.01)
        q = perturb_pose(p, f, seed)
        assert np.all(np.abs(q.as_vector() - p.as_vector()) <= f * np.abs(p.as_vector()) + 1e-15)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            perturb_pose(EulerPose(), -0.1, 0)


class TestSceneFiles:
    def test_load(self, tmp_path):
        d = {"ambient": 0.1, "surfaces": [
            {"type": "plane", "point": [0, 0, 2], "normal": [0, 0, -1], "checker": 0.05},
            {"type": "sphere", "center": [0, 0, 1], "radius": 0.2},
            {"type": "mesh", "vertices": [[0, 0, 1], [1, 0, 1], [0, 1, 1]], "faces": [[0, 1, 2]]}]}
        (tmp_path / "s.json").write_text(json.dumps(d))
        scene = load_scene(tmp_path / "s.json")
        assert len(scene.surfaces) == 3 and scene.ambient == 0.1

    @pytest.mark.parametrize("surface, field", [
        ({"type": "sphere", "center": [0, 0, 1], "radius": -1}, "surfaces[0].radius"),
        ({"type": "sphere", "center": [0, 1], "radius": 1}, "surfaces[0].center"),
        ({"type": "cone"}, "surfaces[0].type"),
        ({"type": "plane", "point": [0, 0, 1], "normal": [0, 0, 0]}, "surfaces[0].normal"),
        ({"center": [0, 0, 1]}, "surfaces[0]"),
        ({"type": "sphere", "center": [0, 0, 1], "radius": 1, "albedo": 2}, "surfaces[0].albedo"),
    ])
    def test_errors_name_the_field(self, surface, field):
        with pytest.raises(SceneParseError, match=field.replace("[", r"\[").replace("]", r"\]")):
            scene_from_dict({"surfaces": [surface]})

    def test_json_syntax_error_has_position(self, tmp_path):
        (tmp_path / "s.json").write_text('{"surfaces": [\n  {"type": "sphere",}\n]}')
        with pytest.raises(SceneParseError, match=r"s\.json:2:\d+"):
            load_scene(tmp_path / "s.json")

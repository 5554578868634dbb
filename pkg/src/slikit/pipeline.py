"""End-to-end orchestration: generate, run (front end + back end), evaluate, init sweep."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .core import Dataset, EulerPose, default_rig, SensorRig
from .errors import ConfigError, DataError, DimensionMismatchError, NumericalError, SlikitError
from .io import load_dataset, read_ply_points, read_tum, write_ply_points, write_tum
from .loop import CompressorConfig, DetectorConfig, LoopDetector, compress_many
from .metrics import ate_rmse, hausdorff, pose_error, rpe
from .odometry import OdometryConfig, estimate_motion
from .pmp import PmpConfig
from .posegraph import (PoseEdge, PoseVertex, accumulate, apply_to_clouds, information, optimize,
                        to_g2o)
from .se3 import inv_T, make_T, so3_exp
from .sim import TrajectorySpec, desk_scene, generate_dataset, load_scene, orbit_scene, perturb_pose

MANIFEST_VERSION = 1
BUILTIN_SCENES = {"desk": desk_scene, "orbit": orbit_scene}


# -- configuration -----------------------------------------------------------------

def _build(cls, d, where):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class NoiseConfig:
    translation_sigma: float = 0.0      # metres
    rotation_sigma_deg: float = 0.0

    def __post_init__(self):
        if self.translation_sigma < 0 or self.rotation_sigma_deg < 0:
            raise ValueError("noise sigmas must be non-negative")


@dataclass
class GraphConfig:
    sigma_odometry: float = 1.0
    sigma_loop: float = 0.5
    max_iters: int = 50
    tol: float = 1e-10

    def __post_init__(self):
        if not (self.sigma_odometry > 0 and self.sigma_loop > 0):
            raise ValueError("sigmas must be positive")


@dataclass
class LoopConfig:
    m_rows: int = 100
    seed: Optional[int] = None          # None -> the run seed
    tau_ratio: float = 0.3
    tau: Optional[float] = None
    min_gap: int = 5


@dataclass
class GenerateConfig:
    scene: str = "desk"
    rig: dict = field(default_factory=dict)
    trajectory: dict = field(default_factory=dict)
    pmp: dict = field(default_factory=dict)


@dataclass
class PipelineConfig:
    seed: int = 0
    dataset: Optional[str] = None
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    odometry: OdometryConfig = field(default_factory=OdometryConfig)
    motion_prior: Optional[EulerPose] = None
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    voxel: Optional[float] = None
    sweep_fractions: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4])
    base_dir: Path = field(default=Path("."), repr=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path = Path(".")) -> "PipelineConfig":
        if d is None:
            d = {}
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be a mapping")
        known = {"seed", "dataset", "generate", "odometry", "motion_prior", "noise", "loop",
                 "graph", "voxel", "sweep_fractions"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"config: unknown field(s) {unknown}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")
        odo = d.get("odometry") or {}
        if not isinstance(odo, dict):
            raise ConfigError("odometry: expected a mapping")
        try:
            odometry = OdometryConfig.from_dict(odo)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"odometry: {exc}") from None
        prior = d.get("motion_prior")
        if prior is not None:
            prior = _build(EulerPose, prior, "motion_prior")
        fr = d.get("sweep_fractions", [0.0, 0.1, 0.2, 0.3, 0.4])
        if not isinstance(fr, list) or not all(isinstance(x, (int, float)) and x >= 0 for x in fr):
            raise ConfigError("sweep_fractions: expected a list of non-negative numbers")
        voxel = d.get("voxel")
        if voxel is not None and not (isinstance(voxel, (int, float)) and voxel > 0):
            raise ConfigError(f"voxel: expected a positive number, got {voxel!r}")
        return cls(seed=seed, dataset=d.get("dataset"),
                   generate=_build(GenerateConfig, d.get("generate"), "generate"),
                   odometry=odometry, motion_prior=prior,
                   noise=_build(NoiseConfig, d.get("noise"), "noise"),
                   loop=_build(LoopConfig, d.get("loop"), "loop"),
                   graph=_build(GraphConfig, d.get("graph"), "graph"),
                   voxel=voxel, sweep_fractions=[float(x) for x in fr], base_dir=base_dir)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "dataset": self.dataset,
            "generate": vars(self.generate).copy(), "odometry": self.odometry.to_dict(),
            "motion_prior": None if self.motion_prior is None else self.motion_prior.to_dict(),
            "noise": vars(self.noise).copy(), "loop": vars(self.loop).copy(),
            "graph": vars(self.graph).copy(), "voxel": self.voxel,
            "sweep_fractions": list(self.sweep_fractions),
        }


def load_config(path) -> PipelineConfig:
    """YAML or JSON config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        d = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ConfigError(f"{where}: {getattr(exc, 'problem', exc)}") from None
    return PipelineConfig.from_dict(d, path.parent)


# -- generate ----------------------------------------------------------------------

def build_scene(cfg: PipelineConfig):
    name = cfg.generate.scene
    if name in BUILTIN_SCENES:
        return BUILTIN_SCENES[name]()
    p = Path(name)
    if not p.is_absolute():
        p = cfg.base_dir / p
    return load_scene(p)


def build_rig(cfg: PipelineConfig) -> SensorRig:
    try:
        return default_rig(**cfg.generate.rig)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"generate.rig: {exc}") from None


def build_trajectory(cfg: PipelineConfig) -> TrajectorySpec:
    d = dict(cfg.generate.trajectory)
    d.setdefault("seed", cfg.seed)
    try:
        return TrajectorySpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"generate.trajectory: {exc}") from None


def cmd_generate(cfg: PipelineConfig, out) -> Dataset:
    try:
        pmp = PmpConfig(**cfg.generate.pmp)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"generate.pmp: {exc}") from None
    return generate_dataset(build_scene(cfg), build_rig(cfg), build_trajectory(cfg), pmp,
                            Path(out))


def _dataset_for(cfg: PipelineConfig, out: Path) -> Dataset:
    if cfg.dataset is not None:
        p = Path(cfg.dataset)
        if not p.is_absolute():
            p = cfg.base_dir / p
        if not p.exists():
            raise DataError(f"dataset not found: {p}")
        return load_dataset(p)
    return cmd_generate(cfg, out / "dataset")


# -- run ---------------------------------------------------------------------------

def _pose_list(poses) -> list:
    return [np.asarray(T, float).tolist() for T in poses]


def _noise(rng: np.random.Generator, cfg: NoiseConfig) -> np.ndarray:
    w = rng.normal(0.0, np.deg2rad(cfg.rotation_sigma_deg), 3)
    t = rng.normal(0.0, cfg.translation_sigma, 3)
    return make_T(so3_exp(w), t)


class _Backend:
    """Graph state; driven identically by a live run and by a manifest replay."""

    def __init__(self, gcfg: GraphConfig):
        self.gcfg = gcfg
        self.vertices = [PoseVertex(0, np.eye(4))]
        self.edges: list[PoseEdge] = []
        self.solves: list[dict] = []

    def add_odometry(self, rel: np.ndarray):
        k = len(self.vertices)
        self.vertices.append(PoseVertex(k, self.vertices[-1].pose @ rel))
        self.edges.append(PoseEdge(k - 1, k, rel, information(self.gcfg.sigma_odometry), "odometry"))

    def add_loop(self, a: int, b: int, rel: np.ndarray) -> dict:
        self.edges.append(PoseEdge(a, b, rel, information(self.gcfg.sigma_loop), "loop"))
        t0 = time.perf_counter()
        res = optimize(self.vertices, self.edges, self.gcfg.max_iters, self.gcfg.tol)
        elapsed = time.perf_counter() - t0
        self.vertices = res.vertices
        info = {"after_frame": b, "chi2_initial": res.initial_chi2, "chi2_final": res.chi2,
                "iterations": res.iterations, "converged": res.converged}
        self.solves.append(info)
        return {**info, "seconds": elapsed}


def cmd_run(cfg: PipelineConfig, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict = {"odometry_s": [], "loop_verify_s": [], "graph_solve_s": []}
    t_start = time.perf_counter()
    ds = _dataset_for(cfg, out)
    rig = ds.rig
    n = len(ds.frames)
    if n < 2:
        raise DataError("need at least two frames to run odometry")
    rng = np.random.default_rng(cfg.seed)

    t0 = time.perf_counter()
    ccfg = CompressorConfig(cfg.loop.m_rows, cfg.seed if cfg.loop.seed is None else cfg.loop.seed)
    signatures = compress_many([f.phase for f in ds.frames], ccfg)
    timings["compress_s"] = time.perf_counter() - t0
    detector = LoopDetector(DetectorConfig(cfg.loop.min_gap, cfg.loop.tau_ratio, cfg.loop.tau))

    backend = _Backend(cfg.graph)
    frames_out, loops_out, failures = [], [], []
    rels = []
    prev: Optional[EulerPose] = None
    detector.add(signatures[0])
    for k in range(1, n):
        init = prev if prev is not None else cfg.motion_prior
        record = {"index": k, "init": (init or EulerPose()).to_dict(), "fallback": False}
        t0 = time.perf_counter()
        try:
            res = estimate_motion(ds.frames[k - 1].cloud, ds.frames[k].phase, rig, init, cfg.odometry)
            record["odometry"] = res.to_dict()
            ok = res.converged and np.all(np.isfinite(res.delta_x.as_vector()))
            if not ok:
                record["error"] = f"odometry did not converge: {res.message}"
        except NumericalError as exc:
            ok = False
            record["odometry"] = None
            record["error"] = f"{type(exc).__name__}: {exc}"
        timings["odometry_s"].append(time.perf_counter() - t0)
        if ok:
            delta = res.delta_x
            prev = delta
        else:
            delta = EulerPose()
            record["fallback"] = True
            failures.append({"pair": [k - 1, k], "error": record["error"]})
        rel = inv_T(delta.to_homogeneous())
        if cfg.noise.translation_sigma > 0 or cfg.noise.rotation_sigma_deg > 0:
            rel = rel @ _noise(rng, cfg.noise)
        record["relative_pose"] = rel.tolist()
        rels.append(rel)
        backend.add_odometry(rel)

        cand = detector.add(signatures[k])
        if cand is not None:
            a, b = cand.frame_a, cand.frame_b
            guess = inv_T(backend.vertices[a].pose) @ backend.vertices[b].pose
            t0 = time.perf_counter()
            entry = cand.to_dict()
            try:
                lres = estimate_motion(ds.frames[b].cloud, ds.frames[a].phase, rig,
                                       EulerPose.from_matrix(guess[:3, :3], guess[:3, 3]), cfg.odometry)
                entry["odometry"] = lres.to_dict()
                entry["accepted"] = bool(lres.converged)
            except NumericalError as exc:
                entry["odometry"] = None
                entry["accepted"] = False
                entry["error"] = f"{type(exc).__name__}: {exc}"
            timings["loop_verify_s"].append(time.perf_counter() - t0)
            if entry["accepted"]:
                Z = lres.delta_x.to_homogeneous()
                entry["measurement"] = Z.tolist()
                solve = backend.add_loop(a, b, Z)
                timings["graph_solve_s"].append(solve.pop("seconds"))
                entry["solve"] = solve
            loops_out.append(entry)
        record["signature"] = signatures[k].tolist()
        frames_out.append(record)

    pre = [v.pose for v in accumulate(rels)]
    post = [v.pose for v in backend.vertices]
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "software_version": __version__,
        "config": cfg.to_dict(),
        "frame_count": n,
        "signature_0": signatures[0].tolist(),
        "frames": frames_out,
        "loops": loops_out,
        "failures": failures,
        "graph_solves": backend.solves,
        "trajectory_pre": _pose_list(pre),
        "trajectory_post": _pose_list(post),
    }
    gt = ds.gt_poses
    if gt is not None:
        manifest["metrics"] = _trajectory_metrics(pre, post, gt)
    _export(out, pre, post, backend, ds, cfg.voxel)
    timings["total_s"] = time.perf_counter() - t_start
    manifest["timings"] = timings
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def _trajectory_metrics(pre, post, gt) -> dict:
    gt0 = inv_T(gt[0])
    gt = [gt0 @ T for T in gt]
    out = {}
    for tag, traj in (("pre", pre), ("post", post)):
        if len(traj) >= 3:
            t, r = rpe(traj, gt)
            out[f"ate_rmse_{tag}"] = ate_rmse(traj, gt)
            out[f"rpe_translation_median_{tag}"] = float(np.median(t))
            out[f"rpe_rotation_median_deg_{tag}"] = float(np.median(r))
    return out


def _export(out: Path, pre, post, backend: _Backend, ds: Dataset, voxel) -> None:
    write_tum(out / "trajectory_pre.tum", pre)
    write_tum(out / "trajectory_post.tum", post)
    merged = apply_to_clouds(backend.vertices, [f.cloud for f in ds.frames], voxel)
    write_ply_points(out / "merged.ply", merged.points)
    to_g2o(out / "graph.g2o", backend.vertices, backend.edges)


def replay_backend(manifest: dict) -> list[np.ndarray]:
    """Rebuild the refined trajectory from recorded measurements only."""
    if manifest.get("manifest_version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest_version {manifest.get('manifest_version')!r}")
    try:
        gcfg = GraphConfig(**manifest["config"]["graph"])
        backend = _Backend(gcfg)
        loops_by_frame: dict = {}
        for entry in manifest["loops"]:
            if entry.get("accepted"):
                loops_by_frame.setdefault(entry["frame_b"], []).append(entry)
        for rec in manifest["frames"]:
            backend.add_odometry(np.asarray(rec["relative_pose"], float))
            for entry in loops_by_frame.get(rec["index"], []):
                backend.add_loop(entry["frame_a"], entry["frame_b"],
                                 np.asarray(entry["measurement"], float))
    except (KeyError, TypeError) as exc:
        raise DataError(f"manifest is missing data: {exc}") from None
    return [v.pose for v in backend.vertices]


def cmd_replay(manifest_path, out) -> dict:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    post = replay_backend(manifest)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "trajectory_post.tum", post)
    return {"trajectory_post": _pose_list(post),
            "matches_manifest": bool(np.array_equal(np.asarray(post),
                                                    np.asarray(manifest["trajectory_post"])))}


# -- eval --------------------------------------------------------------------------

def cmd_eval(run_dir, ground_truth=None, dataset=None) -> dict:
    """Metrics for a finished run directory against a TUM ground truth."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    if ground_truth is None:
        ds_dir = Path(dataset) if dataset else run_dir / "dataset"
        ground_truth = ds_dir / "gt_trajectory.tum"
    _, gt = read_tum(ground_truth)
    report: dict = {}
    for tag in ("pre", "post"):
        path = run_dir / f"trajectory_{tag}.tum"
        if not path.exists():
            raise DataError(f"missing {path}")
        _, est = read_tum(path)
        if len(est) != len(gt):
            raise DimensionMismatchError(f"{path}: {len(est)} poses, ground truth has {len(gt)}")
        gt0 = inv_T(gt[0])
        g = [gt0 @ T for T in gt]
        t, r = rpe(est, g)
        report[f"ate_rmse_{tag}"] = ate_rmse(est, g)
        report[f"rpe_translation_{tag}"] = t
        report[f"rpe_rotation_deg_{tag}"] = r
        report[f"rpe_translation_median_{tag}"] = float(np.median(t))
        report[f"rpe_rotation_median_deg_{tag}"] = float(np.median(r))
    merged = run_dir / "merged.ply"
    ds_dir = Path(dataset) if dataset else run_dir / "dataset"
    if merged.exists() and (ds_dir / "calib.json").exists():
        ds = load_dataset(ds_dir)
        ref = apply_to_clouds([PoseVertex(i, inv_T(ds.gt_poses[0]) @ T) for i, T in enumerate(ds.gt_poses)],
                              [f.cloud for f in ds.frames])
        report["hausdorff_to_gt_merge"] = hausdorff(read_ply_points(merged), ref)
    if "timings" in manifest:
        tm = manifest["timings"]
        report["odometry_seconds"] = tm.get("odometry_s", [])
        report["odometry_seconds_median"] = float(np.median(tm["odometry_s"])) if tm.get("odometry_s") else 0.0
        report["graph_solve_seconds"] = tm.get("graph_solve_s", [])
        report["loop_verify_seconds"] = tm.get("loop_verify_s", [])
    return report


# -- init sweep ----------------------------------------------------------------------

def sweep_init(ds: Dataset, fractions, odo: OdometryConfig, seed: int = 0) -> list[dict]:
    """Odometry error on every consecutive pair with the init perturbed by each fraction."""
    gt = ds.gt_poses
    if gt is None:
        raise DataError("the init sweep needs ground-truth poses")
    truths = []
    for k in range(len(gt) - 1):
        d = inv_T(inv_T(gt[k]) @ gt[k + 1])
        truths.append(EulerPose.from_matrix(d[:3, :3], d[:3, 3]))
    rows = []
    for f in fractions:
        te, re = [], []
        for k, truth in enumerate(truths):
            init = perturb_pose(truth, f, seed + k)
            res = estimate_motion(ds.frames[k].cloud, ds.frames[k + 1].phase, ds.rig, init, odo)
            t_err, r_err = pose_error(res.delta_x, truth)
            te.append(t_err)
            re.append(r_err)
        rows.append({"fraction": float(f), "mean_translation_error": float(np.mean(te)),
                     "mean_rotation_error_deg": float(np.mean(re)),
                     "max_translation_error": float(np.max(te)),
                     "max_rotation_error_deg": float(np.max(re))})
    return rows


def cmd_sweep_init(cfg: PipelineConfig, out) -> list[dict]:
    return sweep_init(_dataset_for(cfg, Path(out)), cfg.sweep_fractions, cfg.odometry, cfg.seed)


__all__ = ["PipelineConfig", "load_config", "cmd_generate", "cmd_run", "cmd_replay", "cmd_eval",
           "cmd_sweep_init", "sweep_init", "replay_backend", "MANIFEST_VERSION", "SlikitError"]

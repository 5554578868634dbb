import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from slikit.core import default_rig
from slikit.pipeline import PipelineConfig, cmd_generate, cmd_run

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance(request):
    lines = request.config._acceptance_lines

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'} {title}: {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


@pytest.fixture(scope="session")
def small_rig():
    return default_rig(width=160, height=120)


@pytest.fixture(scope="session")
def orbit_dataset(tmp_path_factory):
    """19 noiseless 640x480 frames on the 1.2 m / 20 deg orbit; frame 18 revisits frame 0."""
    out = tmp_path_factory.mktemp("orbit") / "dataset"
    cfg = PipelineConfig.from_dict(yaml.safe_load((CONFIGS / "orbit_drift.yaml").read_text()))
    cmd_generate(cfg, out)
    return out


def _orbit_config(dataset: Path, **overrides) -> dict:
    d = yaml.safe_load((CONFIGS / "orbit_drift.yaml").read_text())
    d.pop("generate")
    d["dataset"] = str(dataset)
    d.update(overrides)
    return d


@pytest.fixture(scope="session")
def clean_run(orbit_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("clean_run")
    cfg = PipelineConfig.from_dict(_orbit_config(orbit_dataset, noise=None))
    manifest = cmd_run(cfg, out)
    return out, manifest


@pytest.fixture(scope="session")
def drift_runs(orbit_dataset, tmp_path_factory):
    """Two command-line runs of the drift-injected orbit config with the same seed."""
    base = tmp_path_factory.mktemp("drift")
    cfg_path = base / "drift.yaml"
    cfg_path.write_text(yaml.safe_dump(_orbit_config(orbit_dataset)))
    exe = shutil.which("slikit")
    cmd = [exe] if exe else [sys.executable, "-m", "slikit.cli"]
    outs = []
    for tag in ("a", "b"):
        out = base / tag
        proc = subprocess.run([*cmd, "run", "--config", str(cfg_path), "--seed", "7", "--out", str(out)],
                              capture_output=True, text=True, timeout=600)
        assert proc.returncode == 0, proc.stderr
        outs.append(out)
    return outs


def load_manifest(run_dir: Path) -> dict:
    return json.loads((Path(run_dir) / "manifest.json").read_text())


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    from slikit.se3 import so3_exp
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0, max_angle))

"""Shared fixtures: synthetic scenes and full calibration runs through the CLI.

Pipeline runs take about a minute each on one core, so they are cached per
session and shared by the acceptance and report tests.
"""

import contextlib
import io
import os
import time
from dataclasses import dataclass

import numpy as np
import pytest

from evcal import cli
from evcal.config import SceneConfig
from evcal.results import read_result
from evcal.trajectory import read_pose_log

ACCEPTANCE_PREFIX = "test_acceptance.py::test_criterion_"


def run_cli(argv):
    """``(exit_code, stdout, stderr)`` of an in-process CLI call."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


@dataclass
class Simulated:
    events: str
    gt: str
    scene: SceneConfig


@dataclass
class Calibrated:
    code: int
    stdout: str
    stderr: str
    result_path: str
    poses_path: str
    seconds: float

    @property
    def data(self):
        return read_result(self.result_path)

    @property
    def poses(self):
        return read_pose_log(self.poses_path)


def simulate(directory, name, **overrides):
    sc = SceneConfig()
    noise = overrides.pop("noise", {})
    for key, value in overrides.items():
        setattr(sc, key, value)
    for key, value in noise.items():
        setattr(sc.noise, key, value)
    scene_path = os.path.join(directory, f"{name}_scene.yaml")
    with open(scene_path, "w") as fh:
        fh.write(sc.dump())
    prefix = os.path.join(directory, name)
    code, out, err = run_cli(["simulate", "--scene", scene_path, "--out-prefix", prefix])
    assert code == 0, err
    ext = ".csv" if sc.format == "csv" else ".evb"
    return Simulated(prefix + "_events" + ext, prefix + "_gt.txt", sc)


def calibrate(directory, name, events, mode=None, seed=None, config=None):
    out = os.path.join(directory, f"{name}.yaml")
    argv = ["calibrate", "--events", events, "--out", out]
    if mode:
        argv += ["--mode", mode]
    if seed is not None:
        argv += ["--seed", seed]
    if config is not None:
        cfg_path = os.path.join(directory, f"{name}_config.yaml")
        with open(cfg_path, "w") as fh:
            fh.write(config.dump())
        argv += ["--config", cfg_path]
    t0 = time.perf_counter()
    code, stdout, stderr = run_cli(argv)
    seconds = time.perf_counter() - t0
    return Calibrated(code, stdout, stderr, out, cli.default_pose_path(out), seconds)


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return str(tmp_path_factory.mktemp("evcal"))


@pytest.fixture(scope="session")
def noiseless_scene(workdir):
    return simulate(workdir, "noiseless")


@pytest.fixture(scope="session")
def noisy_scene(workdir):
    return simulate(workdir, "noisy", noise={"pixel_jitter": 0.5, "clutter_fraction": 0.1})


@pytest.fixture(scope="session")
def short_fast_scene(workdir):
    return simulate(workdir, "short_fast", duration=8.0, speed=2.0)


@pytest.fixture(scope="session")
def soft_run(workdir, noiseless_scene):
    return calibrate(workdir, "soft", noiseless_scene.events, seed=0)


@pytest.fixture(scope="session")
def soft_rerun(workdir, noiseless_scene, soft_run):
    return calibrate(workdir, "soft_again", noiseless_scene.events, seed=0)


@pytest.fixture(scope="session")
def hard_run(workdir, noiseless_scene):
    return calibrate(workdir, "hard", noiseless_scene.events, mode="hard", seed=0)


@pytest.fixture(scope="session")
def noisy_run(workdir, noisy_scene):
    return calibrate(workdir, "noisy", noisy_scene.events, seed=0)


@pytest.fixture(scope="session")
def short_fast_run(workdir, short_fast_scene):
    return calibrate(workdir, "short_fast", short_fast_scene.events, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if ACCEPTANCE_PREFIX not in nodeid:
                continue
            if outcome != "error" and getattr(rep, "when", "call") != "call":
                continue
            name = nodeid.split("::", 1)[1]
            detail = dict(getattr(rep, "user_properties", [])).get("detail", "")
            lines.append((name, "PASS" if outcome == "passed" else "FAIL", detail))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in sorted(lines):
        terminalreporter.write_line(f"{status} {name}" + (f": {detail}" if detail else ""))

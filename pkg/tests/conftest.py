import numpy as np
import pytest
from hypothesis import settings

from transdepth.data import GeneratorConfig, generate_samples
from transdepth.geometry import CameraRig, DepthPlanes, Intrinsics, RelativePose

settings.register_profile("repo", max_examples=40, deadline=None)
settings.load_profile("repo")


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def intrinsics():
    return Intrinsics(fx=100.0, fy=100.0, cx=31.5, cy=23.5, width=64, height=48)


@pytest.fixture
def baseline_rig(intrinsics):
    return CameraRig(intrinsics, intrinsics, RelativePose(np.eye(3), np.array([0.1, 0.0, 0.0])))


@pytest.fixture
def planes():
    return DepthPlanes(0.3, 1.5, 16)


@pytest.fixture(scope="session")
def small_corpus():
    """Three rendered 32x32 scenes (cheap enough for unit tests)."""
    cfg = GeneratorConfig(width=32, height=32)
    return generate_samples(cfg, 3, seed=11)


# --------------------------------------------------------------------------
# acceptance bookkeeping: one line per criterion in the terminal summary

ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

import numpy as np
import pytest
import torch

from metricpose.geometry import DTYPE, Intrinsics, Pose, rotation_about_axis


def random_rotation(rng, max_angle=np.pi):
    return rotation_about_axis(rng.normal(size=3), rng.uniform(-max_angle, max_angle))


def random_pose(rng, max_angle=np.pi, t_scale=1.0):
    return Pose(random_rotation(rng, max_angle), torch.as_tensor(rng.normal(scale=t_scale, size=3), dtype=DTYPE))


def tensor(x):
    return torch.as_tensor(x, dtype=DTYPE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def K():
    return Intrinsics(100.0, 100.0, 56.0, 56.0, 112, 112)


ACCEPTANCE = {}


def record_acceptance(number, ok, detail):
    ACCEPTANCE[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")

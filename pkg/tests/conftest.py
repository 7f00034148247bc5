import math

import numpy as np
import pytest
import torch
from hypothesis import settings

from endowave.camera import Camera
from endowave.gaussian4d import Primitive4D

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def xt_plane_quats(theta):
    # Equal half-angle left/right pair gives a pure rotation in the (x, t) plane.
    h = theta / 2.0
    return [math.cos(h), 0.0, 0.0, math.sin(h)], [math.cos(h), 0.0, 0.0, math.sin(h)]


def random_scene(rng, n, sh_degree=3, n_freq=2, depth=(2.0, 4.0), spread=1.0,
                 scale=(0.05, 0.3), time_scale=(0.2, 1.0), opacity=(0.05, 1.0)):
    mu = np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n)]
    log_scale = np.c_[np.log(rng.uniform(*scale, (n, 3))), np.log(rng.uniform(*time_scale, n))]
    k = (sh_degree + 1) ** 2
    sh = rng.normal(scale=0.3, size=(n, n_freq + 1, k, 3))
    return Primitive4D.create(mu, rng.uniform(0, 1, n), log_scale, unit_quats(rng, n),
                              unit_quats(rng, n), rng.uniform(*opacity, n), sh,
                              rng.uniform(-3, 3, (n, n_freq + 1)),
                              sh_degree=sh_degree, n_freq=n_freq)


def small_camera(size=32, focal=None):
    f = float(size) if focal is None else focal
    return Camera(f, f, (size - 1) / 2.0, (size - 1) / 2.0, size, size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cam32():
    return small_camera(32)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

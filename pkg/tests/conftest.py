import math

import numpy as np
import pytest

from mpmnav.world import Environment, ObjectPlacement, Viewpoint, generate_world_set


def make_env(positions, edges, objects=None, env_id="hand"):
    """Hand-built environment from explicit coordinates."""
    objects = objects or {}
    nodes = [
        Viewpoint(i, tuple(float(c) for c in p), tuple(objects.get(i, (ObjectPlacement(i % 32, 0.0),))))
        for i, p in enumerate(positions)
    ]
    return Environment(env_id, 0, nodes, [tuple(e) for e in edges])


def line_env(n=4, spacing=1.0):
    return make_env([(i * spacing, 0.0, 0.0) for i in range(n)], [(i, i + 1) for i in range(n - 1)], env_id="line")


def star_env(leaves=4, radius=2.0):
    pos = [(0.0, 0.0, 0.0)] + [
        (radius * math.cos(2 * math.pi * k / leaves), radius * math.sin(2 * math.pi * k / leaves), 0.0)
        for k in range(leaves)
    ]
    return make_env(pos, [(0, k + 1) for k in range(leaves)], env_id="star")


@pytest.fixture(scope="session")
def small_world():
    return generate_world_set(3, n_train=2, n_val_seen=1, n_val_unseen=1, n_nodes=20)


@pytest.fixture
def line4():
    return line_env(4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'} | {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])

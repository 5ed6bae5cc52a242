import numpy as np
import pytest

from pilotnav.env import generate_episode
from pilotnav.model import ModelConfig, init_params
from pilotnav.pilotloop import expert_trajectory
from pilotnav.scenegen import SceneGenConfig, generate_scene

SMALL = ModelConfig(d=16, n_layers=2, n_heads=2, k=5)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(3, SceneGenConfig(), scene_id="small")


@pytest.fixture(scope="session")
def small_episodes(small_scene):
    return [generate_episode(small_scene, s) for s in range(6)]


@pytest.fixture
def small_params():
    return init_params(SMALL, seed=0)


@pytest.fixture(scope="session")
def expert_trajs(small_scene, small_episodes):
    return [expert_trajectory(small_scene, e, SMALL.k) for e in small_episodes]


def long_traj(trajs, T_min=3):
    return next(t for t in trajs if t.length >= T_min)


def perturbed(arr, scale=1.0, seed=0):
    return np.asarray(arr) + np.random.default_rng(seed).normal(scale=scale, size=np.shape(arr))


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture(scope="session")
def record_criterion(request):
    """Callable ``(criterion, passed, detail)`` whose rows are printed after the run."""
    rows = request.config.stash[ACCEPTANCE]

    def record(criterion, passed, detail):
        rows.append((criterion, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(ACCEPTANCE, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in rows:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")

import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from pilotnav.env import generate_episode, load_scene
from pilotnav.metrics import (
    EvalConfig,
    cell_centers,
    dtw,
    evaluate,
    expert_agent,
    navigation_error,
    ndtw,
    oracle_success,
    path_length,
    spl,
    success,
)
from pilotnav.scenegen import generate_scene

DETOUR = load_scene("SCENE v1 5 4\n.....\n####.\n.....\n.....\n")


def brute_dtw(r, q):
    """Minimum cost over every monotone alignment path, enumerated explicitly."""
    r, q = np.asarray(r, float), np.asarray(q, float)
    n, m = len(r), len(q)
    best = math.inf
    moves = ((1, 0), (0, 1), (1, 1))

    def walk(i, j, cost):
        nonlocal best
        cost += float(np.linalg.norm(r[i] - q[j]))
        if (i, j) == (n - 1, m - 1):
            best = min(best, cost)
            return
        for di, dj in moves:
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, cost)

    walk(0, 0, 0.0)
    return best


def grid_graph(scene):
    g = nx.Graph()
    for x, y in scene.walkable_cells():
        g.add_node((x, y))
        for dx, dy in ((1, 0), (0, 1)):
            if scene.walkable(x + dx, y + dy):
                g.add_edge((x, y), (x + dx, y + dy))
    return g


def test_navigation_error_examples():
    open_grid = load_scene("SCENE v1 5 5\n" + ".....\n" * 5)
    assert navigation_error(open_grid, (2, 2), (2, 2)) == 0
    assert navigation_error(open_grid, (0, 0), (2, 1)) == 3
    oracle = nx.single_source_shortest_path_length(grid_graph(DETOUR), (0, 0))
    for cell, dist in oracle.items():
        assert navigation_error(DETOUR, cell, (0, 0)) == dist
    assert navigation_error(DETOUR, (0, 2), (0, 0)) == 10


def test_success_boundary():
    assert success(0, 2) == 1 and success(2, 2) == 1 and success(3, 2) == 0


def test_oracle_success_examples():
    assert oracle_success(DETOUR, [(4, 2), (4, 1), (4, 0)], (4, 0), 0) == 1
    assert oracle_success(DETOUR, [(3, 0), (4, 0), (4, 1), (4, 2)], (4, 0), 0) == 1
    assert oracle_success(DETOUR, [(0, 2), (1, 2)], (0, 0), 2) == 0


def test_spl_examples():
    assert spl([1], [6], [6]) == 1.0
    assert spl([1], [4], [8]) == 0.5
    assert spl([0], [4], [4]) == 0.0
    with pytest.warns(UserWarning):
        assert spl([1, 1], [0, 2], [0, 2]) == 1.0


def test_ndtw_examples():
    r = cell_centers([(0, 0), (1, 0), (2, 0)])
    assert dtw(r, r) == 0 and ndtw(r, r, 2.0) == 1.0
    assert ndtw([[0.0, 0.0]], [[3.0, 4.0]], 2.0) == pytest.approx(math.exp(-5 / 2))


paths = st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=6)


@settings(max_examples=60, deadline=None)
@given(paths, paths)
def test_dtw_matches_exhaustive_alignment(r, q):
    assert abs(dtw(r, q) - brute_dtw(r, q)) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(paths, paths, st.integers(0, 5), st.tuples(st.integers(-3, 8), st.integers(-3, 8)))
def test_detour_never_raises_ndtw(r, q, pos, extra):
    # a detour point sits at least as far from every reference point as the point it follows
    j = min(pos, len(q) - 1)
    assume(all(math.dist(extra, p) >= math.dist(q[j], p) for p in r))
    q2 = list(q)
    q2.insert(j + 1, extra)
    assert ndtw(r, q2, 2.0) <= ndtw(r, q, 2.0) + 1e-12
    assert 0 < ndtw(r, q, 2.0) <= 1


def test_path_length_ignores_turns_and_bumps():
    from pilotnav.env import Heading, Pose

    poses = [Pose(0, 0, Heading.E), Pose(0, 0, Heading.S), Pose(0, 1, Heading.S), Pose(0, 1, Heading.S)]
    assert path_length(poses) == 1


@pytest.fixture(scope="module")
def scenes_and_episodes():
    scenes = {f"s{i}": generate_scene(i, scene_id=f"s{i}") for i in range(3)}
    eps = [generate_episode(scenes[f"s{i % 3}"], 100 + i) for i in range(12)]
    return scenes, eps


def test_expert_agent_scores_perfectly(scenes_and_episodes):
    scenes, eps = scenes_and_episodes
    rep = evaluate(None, eps, scenes, EvalConfig(), agent=expert_agent)
    assert rep.SR == 1.0 and rep.SPL == 1.0 and rep.nDTW == pytest.approx(1.0)
    assert rep.NE_mean == 0.0


def test_always_stop_fails(scenes_and_episodes):
    scenes, eps = scenes_and_episodes

    def stopper(scene, episode, session):
        from pilotnav.model import StepOutput

        return lambda instr, obs, z: StepOutput(np.array([0, 0, 0, 1.0]), z, z, z)

    rep = evaluate(None, eps, scenes, EvalConfig(), agent=stopper)
    assert rep.SR == 0.0 and rep.OSR == 0.0 and rep.SPL == 0.0


def test_report_invariants_for_model(small_params, scenes_and_episodes):
    scenes, eps = scenes_and_episodes
    rep = evaluate(small_params, eps, scenes, EvalConfig(T_max=20))
    assert rep.n_episodes == len(eps)
    for e in rep.episodes:
        assert e.spl <= e.success <= e.oracle_success
        assert 0 < e.ndtw <= 1 and e.ne >= 0
    assert 0 <= rep.SPL <= rep.SR <= rep.OSR <= 1
    text = rep.to_csv()
    assert text.splitlines()[-1].startswith("ALL,")
    assert len(text.splitlines()) == len(eps) + 2

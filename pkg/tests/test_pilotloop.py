import dataclasses
import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL
from pilotnav.env import EpisodeGenConfig, Heading, Pose, generate_episode, geodesic_field
from pilotnav.metrics import visited_cells
from pilotnav.model import StepOutput, init_params
from pilotnav.pilotloop import (
    LoopConfig,
    aggregate,
    collect_rollout,
    deviation,
    expert_trajectory,
    held_out_episodes,
    read_trajectories,
    replay_errors,
    round_episodes,
    run_flywheel,
    write_trajectories,
)
from pilotnav.scenegen import generate_scene
from pilotnav.train import TrainConfig


def scripted(actions):
    """Step function replaying a fixed action list (then STOP)."""
    it = iter(actions)

    def step_fn(instr, obs, z_prev):
        logits = np.full(4, -10.0)
        logits[next(it, 3)] = 10.0
        return StepOutput(logits, z_prev, z_prev, z_prev)

    return step_fn


def test_deviation_examples(small_scene, small_episodes):
    ep = small_episodes[0]
    path = ep.reference_path
    assert deviation(small_scene, path[2], path) == 0
    field = geodesic_field(small_scene, path)
    off = next(c for c in small_scene.walkable_cells() if field[c[1], c[0]] == 1)
    assert deviation(small_scene, off, path) == 1
    with pytest.raises(ValueError):
        deviation(small_scene, path[0], [])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 500), st.integers(0, 10_000))
def test_deviation_matches_multi_source_dijkstra(scene_seed, seed):
    scene = generate_scene(scene_seed)
    ep = generate_episode(scene, seed)
    g = nx.Graph()
    for x, y in scene.walkable_cells():
        g.add_node((x, y))
        for dx, dy in ((1, 0), (0, 1)):
            if scene.walkable(x + dx, y + dy):
                g.add_edge((x, y), (x + dx, y + dy), weight=1)
    oracle = nx.multi_source_dijkstra_path_length(g, set(ep.reference_path))
    cells = scene.walkable_cells()
    rng = np.random.default_rng(seed)
    for i in rng.choice(len(cells), size=min(10, len(cells)), replace=False):
        c = cells[i]
        assert deviation(scene, c, ep.reference_path) == oracle.get(c, math.inf)


def test_expert_policy_never_triggers_takeover(small_scene, small_episodes, small_params):
    for ep in small_episodes:
        ref = expert_trajectory(small_scene, ep, SMALL.k)
        traj = collect_rollout(small_params, small_scene, ep, LoopConfig(), step_fn=scripted(ref.actions), T_max=60)
        assert not any(traj.takeover)
        assert traj.actions == ref.actions
        assert visited_cells(traj.poses) == list(ep.reference_path)


def test_takeover_triggers_and_persists(small_scene, small_episodes, small_params):
    ep = max(small_episodes, key=lambda e: len(e.reference_path))
    cfg = LoopConfig(dev_threshold=1)
    # walk straight away from the start forever; the expert must take over once off the path
    traj = collect_rollout(small_params, small_scene, ep, cfg, step_fn=scripted([1, 1] + [0] * 200), T_max=80)
    flags = traj.takeover
    assert any(flags)
    first = flags.index(True)
    assert all(flags[first:])
    field = geodesic_field(small_scene, ep.reference_path)
    devs = [field[p.y, p.x] for p in traj.poses[: len(flags)]]
    assert devs[first] > cfg.dev_threshold and all(d <= cfg.dev_threshold for d in devs[:first])
    for t in range(first, len(flags)):
        assert traj.actions[t] == traj.expert_actions[t]
    assert replay_errors(traj, small_scene) == []


def test_infinite_threshold_never_takes_over(small_scene, small_episodes, small_params):
    ep = small_episodes[0]
    traj = collect_rollout(small_params, small_scene, ep, LoopConfig(dev_threshold=math.inf),
                           step_fn=scripted([0] * 30), T_max=30)
    assert not any(traj.takeover)


def test_zero_threshold_takes_over_on_first_deviation(small_scene, small_episodes, small_params):
    ep = small_episodes[0]
    traj = collect_rollout(small_params, small_scene, ep, LoopConfig(dev_threshold=0), T_max=40)
    field = geodesic_field(small_scene, ep.reference_path)
    devs = [field[p.y, p.x] for p in traj.poses[: traj.length]]
    off = [t for t, d in enumerate(devs) if d > 0]
    if off:
        assert traj.takeover.index(True) == off[0]
    else:
        assert not any(traj.takeover)


def test_aggregate_examples():
    a, b = list(range(10)), list(range(10, 20))
    assert len(aggregate([a, b])) == 20
    assert aggregate([a, b], aggregate=False) == b
    assert len(aggregate([a, a])) == 20
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([[]])


def test_trajectory_store_round_trip(tmp_path, small_scene, small_episodes, small_params):
    trajs = [collect_rollout(small_params, small_scene, e, LoopConfig(), source_round=2, T_max=15)
             for e in small_episodes[:3]]
    path = tmp_path / "round.jsonl"
    write_trajectories(trajs, path)
    back = read_trajectories(path)
    for t, u in zip(trajs, back):
        assert u.actions == t.actions and u.poses == t.poses and u.takeover == t.takeover
        assert u.source_round == 2 and u.episode == t.episode
        assert all(np.array_equal(a, b) for a, b in zip(t.observations, u.observations))
        assert replay_errors(u, small_scene) == []


def test_replay_detects_corruption(small_scene, small_episodes):
    traj = expert_trajectory(small_scene, small_episodes[0], SMALL.k)
    bad = dataclasses.replace(traj, poses=list(traj.poses))
    p = bad.poses[2]
    bad.poses[2] = Pose(p.x, p.y, Heading((p.heading + 2) % 4))
    errs = replay_errors(bad, small_scene)
    assert errs and errs[0][0] == 2


def test_episode_draws():
    scenes = [generate_scene(i, scene_id=f"s{i}") for i in range(3)]
    cfg = EpisodeGenConfig()
    assert [e.episode_id for e in round_episodes(scenes, 5, 0, 1, cfg)] == [
        e.episode_id for e in round_episodes(scenes, 5, 0, 1, cfg)
    ]
    train_ids = {e.episode_id for r in range(4) for e in round_episodes(scenes, 50, 0, r, cfg)}
    assert not train_ids & {e.episode_id for e in held_out_episodes(scenes, 50, 0, cfg)}


def test_flywheel_determinism_and_bootstrap(tmp_path):
    scene = generate_scene(11, scene_id="tiny")
    ev = held_out_episodes([scene], 2, 0, EpisodeGenConfig())
    loop = LoopConfig(rounds=1, episodes_per_round=1, bootstrap_episodes=2, bootstrap_epochs=2)
    tcfg = TrainConfig(epochs=1, seed=0)
    texts = []
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        res = run_flywheel(init_params(SMALL, 0), [scene], ev, {"tiny": scene}, loop, tcfg, out_dir=str(out), seed=0)
        texts.append((out / "curve.csv").read_text())
        assert not any(f for t in res.buffers[0] for f in t.takeover)
        assert all(t.source_round == 0 for t in res.buffers[0])
        assert [row[0] for row in res.curve] == [0, 1]
    assert texts[0] == texts[1]
    assert texts[0].splitlines()[0] == "round,SR,SPL,NE,OSR,nDTW"

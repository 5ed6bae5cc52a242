"""Strictly causal recurrent rollout with a single-slot pilot cache."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env import Action, EnvSession, EpisodeSpec, Pose, Scene, observed_cells
from .model import ModelParams, StepOutput, model_step

StepFn = Callable[[list, np.ndarray, np.ndarray], StepOutput]


@dataclass
class Trajectory:
    episode: EpisodeSpec
    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    takeover: list = field(default_factory=list)
    expert_actions: list = field(default_factory=list)
    pilots: list = field(default_factory=list)
    source_round: int = 0

    @property
    def instruction(self):
        return self.episode.instruction

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def final_pose(self) -> Pose:
        return self.poses[-1]


class PilotCache:
    """Holds the latest pilot token; starts at the placeholder embedding."""

    def __init__(self, z0):
        self.current = np.array(z0, dtype=np.float64, copy=True)
        self.writes = 0

    def read(self) -> np.ndarray:
        return self.current

    def write(self, z) -> None:
        self.current = np.array(z, dtype=np.float64, copy=True)
        self.writes += 1


@dataclass(frozen=True)
class Sample:
    """Stochastic action selection at a given temperature."""

    temperature: float = 1.0
    seed: int = 0


def select_action(logits: np.ndarray, policy, rng: np.random.Generator | None) -> Action:
    if policy == "greedy" or policy is None:
        return Action(int(np.argmax(logits)))
    if isinstance(policy, Sample):
        z = logits / max(policy.temperature, 1e-8)
        p = np.exp(z - z.max())
        p /= p.sum()
        return Action(int(rng.choice(len(p), p=p)))
    raise ValueError(f"unknown policy {policy!r}")


def model_step_fn(params: ModelParams) -> StepFn:
    return lambda instr, obs, z_prev: model_step(params, instr, obs, z_prev)


def rollout(
    params: ModelParams | None,
    session: EnvSession,
    instr,
    T_max: int,
    policy="greedy",
    step_fn: StepFn | None = None,
    z0=None,
    on_step: Callable[[int, EnvSession], Action | None] | None = None,
) -> Trajectory:
    """Run the policy until STOP or ``T_max`` steps.

    Each step reads the cached pilot, runs one model transition on the current
    observation, writes the new pilot back and executes the chosen action.
    ``on_step`` may return an action that replaces the policy's choice (used
    for expert takeover during data collection).
    """
    if step_fn is None:
        step_fn = model_step_fn(params)
    if z0 is None:
        z0 = params["z0"].data
    cache = PilotCache(z0)
    rng = np.random.default_rng(policy.seed) if isinstance(policy, Sample) else None
    traj = Trajectory(episode=None, poses=[session.pose])
    for t in range(T_max):
        obs = session.observe()
        out = step_fn(instr, obs, cache.read())
        cache.write(out.pilot)
        action = select_action(out.action_logits, policy, rng)
        override = on_step(t, session) if on_step is not None else None
        if override is not None:
            action = Action(override)
        traj.observations.append(obs)
        traj.pilots.append(cache.read().copy())
        traj.actions.append(int(action))
        session.act(action)
        traj.poses.append(session.pose)
        if action == Action.STOP:
            break
    return traj


def run_episode(params: ModelParams, scene: Scene, episode: EpisodeSpec, T_max: int, k: int, **kw) -> Trajectory:
    session = EnvSession(scene, episode.start, k)
    traj = rollout(params, session, episode.instruction, T_max, **kw)
    traj.episode = episode
    traj.takeover = [False] * traj.length
    return traj


# ---------------------------------------------------------------- causality probe


class ProbeNotApplicable(ValueError):
    """The chosen mutation is visible before the split step."""


@dataclass
class ProbeResult:
    passed: bool
    first_divergence: int | None
    mutated_cell: tuple
    t_split: int


def seen_cells(scene: Scene, traj: Trajectory, t_split: int, k: int) -> set:
    """Cells covered by the observations of steps 1..t_split."""
    cells = set()
    for pose in traj.poses[:t_split]:
        cells |= observed_cells(scene, pose, k)
    return cells


def causality_probe(
    params: ModelParams,
    scene: Scene,
    episode: EpisodeSpec,
    t_split: int,
    cell: tuple | None = None,
    new_class: int | None = None,
    k: int | None = None,
    seed: int = 0,
) -> ProbeResult:
    """Compare rollouts in a scene and in a copy mutated where the agent has not yet looked.

    The action and pilot sequences of steps 1..t_split must be bit-identical.
    When ``cell`` is None a walkable cell unseen through ``t_split`` is picked
    at random and given a different landmark class.
    """
    k = params.config.k if k is None else k
    T_max = max(t_split, 1)
    base = run_episode(params, scene, episode, T_max, k)
    t_split = min(t_split, base.length)
    seen = seen_cells(scene, base, t_split, k)
    rng = np.random.default_rng(seed)
    if cell is None:
        unseen = [c for c in scene.walkable_cells() if c not in seen]
        if not unseen:
            raise ProbeNotApplicable("every walkable cell is observed before the split step")
        cell = unseen[rng.integers(len(unseen))]
    elif tuple(cell) in seen:
        raise ProbeNotApplicable(f"cell {tuple(cell)} is observed at or before step {t_split}")
    x, y = cell
    if new_class is None:
        choices = [c for c in range(2, 8) if c != scene.cell(x, y)]
        new_class = choices[rng.integers(len(choices))]
    mutated = scene.with_cell(x, y, new_class)
    other = run_episode(params, mutated, episode, T_max, k)
    for t in range(min(t_split, base.length, other.length)):
        same = base.actions[t] == other.actions[t] and np.array_equal(base.pilots[t], other.pilots[t])
        if not same:
            return ProbeResult(False, t + 1, tuple(cell), t_split)
    if base.length != other.length and min(base.length, other.length) < t_split:
        return ProbeResult(False, min(base.length, other.length) + 1, tuple(cell), t_split)
    return ProbeResult(True, None, tuple(cell), t_split)

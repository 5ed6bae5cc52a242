"""Closed-loop flywheel training with deviation-triggered expert takeover."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .env import (
    INF,
    Action,
    EnvSession,
    EpisodeGenConfig,
    EpisodeSpec,
    Heading,
    Pose,
    Scene,
    expert_action,
    expert_path,
    generate_episode,
    geodesic_field,
    render_observation,
    scene_diameter,
    step,
)
from .infer import Trajectory, rollout
from .metrics import EvalConfig, evaluate
from .model import ModelParams, save_checkpoint
from .train import TrainConfig, train_round, write_loss_log

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoopConfig:
    rounds: int = 3
    episodes_per_round: int = 100
    dev_threshold: float = 3
    T_max: int | None = None
    T_max_factor: int = 4
    aggregate: bool = True
    bootstrap_episodes: int = 200
    bootstrap_epochs: int = 30

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("LoopConfig.rounds must be >= 1")
        if self.episodes_per_round < 1:
            raise ValueError("LoopConfig.episodes_per_round must be >= 1")
        if self.dev_threshold < 1 and self.dev_threshold != 0:
            raise ValueError("LoopConfig.dev_threshold must be >= 1")
        if self.bootstrap_episodes < 1 or self.bootstrap_epochs < 1:
            raise ValueError("bootstrap_episodes and bootstrap_epochs must be >= 1")


def deviation(scene: Scene, pose, reference_path, field: np.ndarray | None = None) -> float:
    """Geodesic distance from the agent's cell to the nearest reference-path cell."""
    if field is None:
        if not reference_path:
            raise ValueError("deviation needs a non-empty reference path")
        field = geodesic_field(scene, [tuple(c) for c in reference_path])
    x, y = pose.cell if hasattr(pose, "cell") else pose
    return float(field[y, x])


def expert_trajectory(scene: Scene, episode: EpisodeSpec, k: int, source_round: int = 0) -> Trajectory:
    """Shortest-path follower demonstration (no takeover, no pilots)."""
    field = geodesic_field(scene, [episode.goal])
    actions, poses = expert_path(scene, episode.start, field, episode.goal_region)
    poses = poses + [poses[-1]]  # STOP leaves the pose unchanged
    return Trajectory(
        episode=episode,
        observations=[render_observation(scene, p, k) for p in poses[:-1]],
        actions=[int(a) for a in actions],
        poses=poses,
        takeover=[False] * len(actions),
        expert_actions=[int(a) for a in actions],
        source_round=source_round,
    )


def collect_rollout(
    params: ModelParams,
    scene: Scene,
    episode: EpisodeSpec,
    cfg: LoopConfig,
    source_round: int = 0,
    step_fn=None,
    T_max: int | None = None,
    k: int | None = None,
) -> Trajectory:
    """On-policy pilot-cache rollout; the expert takes over for good once deviation exceeds the threshold."""
    k = params.config.k if k is None else k
    if T_max is None:
        T_max = cfg.T_max if cfg.T_max is not None else cfg.T_max_factor * scene_diameter(scene)
    goal_f = geodesic_field(scene, [episode.goal])
    ref_f = geodesic_field(scene, episode.reference_path)
    flags, experts = [], []

    def on_step(t, session):
        pose = session.pose
        taken = bool(flags) and flags[-1]
        if not taken and deviation(scene, pose, None, ref_f) > cfg.dev_threshold:
            taken = True
        flags.append(taken)
        a = expert_action(scene, pose, goal_f, episode.goal_region)
        experts.append(int(a))
        return a if taken else None

    session = EnvSession(scene, episode.start, k)
    traj = rollout(params, session, episode.instruction, T_max, step_fn=step_fn, on_step=on_step)
    traj.episode = episode
    traj.takeover = flags
    traj.expert_actions = experts
    traj.source_round = source_round
    return traj


def aggregate(buffers, aggregate: bool = True) -> list:
    """Union of all rounds' trajectories (or just the latest round)."""
    buffers = list(buffers)
    if not buffers:
        raise ValueError("aggregate: no rounds collected")
    out = [t for b in buffers for t in b] if aggregate else list(buffers[-1])
    if not out:
        raise ValueError("aggregate: empty training buffer")
    return out


# ---------------------------------------------------------------- trajectory store


def trajectory_to_dict(traj: Trajectory) -> dict:
    ep = traj.episode
    return {
        "episode_id": ep.episode_id,
        "scene_id": ep.scene_id,
        "instr_ids": list(ep.instruction),
        "poses": [[p.x, p.y, int(p.heading)] for p in traj.poses],
        "actions": list(traj.actions),
        "takeover": [bool(f) for f in traj.takeover],
        "observations": [np.asarray(o).tolist() for o in traj.observations],
        "source_round": traj.source_round,
        "expert_actions": list(traj.expert_actions),
        "episode": ep.to_dict(),
    }


def trajectory_from_dict(d: dict) -> Trajectory:
    if "episode" in d:
        episode = EpisodeSpec.from_dict(d["episode"])
    else:
        x, y, h = d["poses"][0]
        episode = EpisodeSpec(d["scene_id"], Pose(x, y, Heading(h)), (x, y), frozenset(), [(x, y)],
                              list(d["instr_ids"]), 0, d["episode_id"])
    return Trajectory(
        episode=episode,
        observations=[np.asarray(o, dtype=np.int8) for o in d["observations"]],
        actions=list(d["actions"]),
        poses=[Pose(x, y, Heading(h)) for x, y, h in d["poses"]],
        takeover=list(d["takeover"]),
        expert_actions=list(d.get("expert_actions", [])),
        source_round=d["source_round"],
    )


def write_trajectories(trajs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajs:
            fh.write(json.dumps(trajectory_to_dict(t), separators=(",", ":")) + "\n")


def read_trajectories(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(trajectory_from_dict(json.loads(line)))
    return out


def replay_errors(traj: Trajectory, scene: Scene) -> list:
    """Steps where re-simulating the recorded actions does not reproduce the recorded poses."""
    errors = []
    if len(traj.poses) != len(traj.actions) + 1:
        errors.append((0, f"{len(traj.poses)} poses for {len(traj.actions)} actions"))
        return errors
    pose = traj.poses[0]
    for t, a in enumerate(traj.actions):
        if a not in (0, 1, 2, 3):
            errors.append((t + 1, f"invalid action code {a!r}"))
            return errors
        pose, _ = step(scene, pose, Action(a))
        if pose != traj.poses[t + 1]:
            errors.append((t + 1, f"expected {traj.poses[t + 1]}, re-simulated {pose}"))
            return errors
    return errors


# ---------------------------------------------------------------- flywheel


CURVE_COLUMNS = ("round", "SR", "SPL", "NE", "OSR", "nDTW")


def round_episodes(scenes: list, n: int, seed: int, round_index: int, gen_cfg: EpisodeGenConfig) -> list:
    """Deterministic episode draw for one round, cycling over the training scenes."""
    out = []
    for i in range(n):
        scene = scenes[i % len(scenes)]
        out.append(generate_episode(scene, seed * 1_000_003 + round_index * 10_007 + i, gen_cfg))
    return out


def held_out_episodes(scenes: list, n: int, seed: int, gen_cfg: EpisodeGenConfig) -> list:
    """Evaluation episodes, drawn from a seed range disjoint from the training rounds of the same run."""
    base = 7_000_000_019 + seed * 1_000_003
    return [generate_episode(scenes[i % len(scenes)], base + i, gen_cfg) for i in range(n)]


@dataclass
class FlywheelResult:
    params: ModelParams
    curve: list
    losses: list
    buffers: list


def run_flywheel(
    params: ModelParams,
    train_scenes: list,
    eval_episodes: list,
    eval_scenes: dict,
    loop_cfg: LoopConfig,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig = EvalConfig(),
    gen_cfg: EpisodeGenConfig = EpisodeGenConfig(),
    out_dir=None,
    seed: int | None = None,
) -> FlywheelResult:
    """Bootstrap on expert demonstrations, then iterate collect / aggregate / fine-tune.

    After every round the policy is evaluated on ``eval_episodes`` and one
    (round, SR, SPL, NE, OSR, nDTW) row is appended to the curve.
    """
    seed = train_cfg.seed if seed is None else seed
    k = params.config.k
    by_id = {s.id: s for s in train_scenes}
    diameters = {}
    for s in list(train_scenes) + list(eval_scenes.values()):
        diameters.setdefault(s.id, scene_diameter(s))

    curve, losses, buffers = [], [], []

    def finish_round(r):
        report = evaluate(params, eval_episodes, eval_scenes, eval_cfg, diameters=diameters)
        row = (r, report.SR, report.SPL, report.NE_mean, report.OSR, report.nDTW)
        curve.append(row)
        log.info("round %d: %s", r, report.to_text())
        if out_dir is not None:
            save_checkpoint(params, os.path.join(out_dir, f"round_{r}.ckpt.json"))
            write_trajectories(buffers[-1], os.path.join(out_dir, f"trajectories_round_{r}.jsonl"))
            write_curve(curve, os.path.join(out_dir, "curve.csv"))
            write_loss_log(losses, os.path.join(out_dir, "loss.csv"))

    boot = round_episodes(train_scenes, loop_cfg.bootstrap_episodes, seed, 0, gen_cfg)
    buffers.append([expert_trajectory(by_id[e.scene_id], e, k, 0) for e in boot])
    losses += train_round(params, buffers[0], train_cfg, 0, epochs=loop_cfg.bootstrap_epochs)
    finish_round(0)

    for r in range(1, loop_cfg.rounds + 1):
        eps = round_episodes(train_scenes, loop_cfg.episodes_per_round, seed, r, gen_cfg)
        collected = []
        for e in eps:
            scene = by_id[e.scene_id]
            T_max = loop_cfg.T_max if loop_cfg.T_max is not None else loop_cfg.T_max_factor * diameters[e.scene_id]
            collected.append(collect_rollout(params, scene, e, loop_cfg, r, T_max=T_max))
        buffers.append(collected)
        buffer = aggregate(buffers, loop_cfg.aggregate)
        losses += train_round(params, buffer, train_cfg, r)
        finish_round(r)
    return FlywheelResult(params, curve, losses, buffers)


def write_curve(curve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for row in curve:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

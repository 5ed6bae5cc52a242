"""``pilotnav`` command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 configuration or I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import scenegen
from .analyze import collapse_report, collect_latents
from .config import ConfigError, RunConfig, load_config
from .env import SceneFormatError, scene_diameter
from .metrics import evaluate
from .model import CheckpointError, init_params, load_checkpoint, save_checkpoint
from .pilotloop import (
    expert_trajectory,
    held_out_episodes,
    read_trajectories,
    replay_errors,
    round_episodes,
    run_flywheel,
)
from .train import objective_grad_check, train_round, write_loss_log

log = logging.getLogger("pilotnav")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    """Bad input that maps to exit code 2."""


def _out_dir(args, cfg: RunConfig) -> str:
    out = args.out or cfg.paths.out_dir
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"{out}: cannot create output directory ({exc.strerror})") from exc
    if not os.access(out, os.W_OK):
        raise UsageError(f"{out}: output directory is not writable")
    return out


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _write_config(cfg: RunConfig, out: str) -> None:
    _write(os.path.join(out, "config.json"), cfg.to_json())


def _scenes(cfg: RunConfig, args) -> dict:
    scene_dir = getattr(args, "scene_dir", None) or cfg.paths.scene_dir
    try:
        return scenegen.read_scene_dir(scene_dir)
    except FileNotFoundError as exc:
        raise UsageError(f"{exc.filename}: not found (run 'pilotnav gen-scenes' first?)") from exc
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _checkpoint(cfg: RunConfig, args):
    path = args.checkpoint or cfg.paths.checkpoint
    if path is None:
        raise UsageError("a checkpoint is required: pass --checkpoint or set paths.checkpoint")
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UsageError(f"{path}: checkpoint not found") from exc
    except (OSError, CheckpointError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _by_id(scenes) -> dict:
    return {s.id: s for s in scenes}


# ---------------------------------------------------------------- commands


def cmd_gen_scenes(cfg: RunConfig, args) -> int:
    seed = 0 if cfg.seed is None else cfg.seed
    out = args.out or cfg.paths.scene_dir
    splits = scenegen.generate_split(seed, cfg.scenes)
    disconnected = [s.id for name in scenegen.SPLITS for s in splits[name] if not scenegen.is_connected(s)]
    if disconnected:
        print(f"disconnected scenes generated: {disconnected}", file=sys.stderr)
        return EXIT_FAIL
    try:
        paths = scenegen.write_scene_dir(splits, out, seed)
        _write_config(cfg, out)
    except OSError as exc:
        raise UsageError(f"{exc.filename or out}: cannot write ({exc.strerror})") from exc
    print(f"wrote {len(paths) - 1} scenes and {scenegen.MANIFEST} to {out}")
    return EXIT_OK


def cmd_bootstrap(cfg: RunConfig, args) -> int:
    seed = cfg.require_seed("bootstrap")
    out = _out_dir(args, cfg)
    splits = _scenes(cfg, args)
    train_scenes = splits["train"]
    by_id = _by_id(train_scenes)
    episodes = round_episodes(train_scenes, cfg.loop.bootstrap_episodes, seed, 0, cfg.episodes)
    buffer = [expert_trajectory(by_id[e.scene_id], e, cfg.model.k, 0) for e in episodes]
    params = init_params(cfg.model, seed)
    records = train_round(params, buffer, cfg.train, 0, epochs=cfg.loop.bootstrap_epochs)
    _write_config(cfg, out)
    save_checkpoint(params, os.path.join(out, "round_0.ckpt.json"))
    write_loss_log(records, os.path.join(out, "loss.csv"))
    report = evaluate(params, episodes, by_id, cfg.eval)
    report.to_csv(os.path.join(out, "train_metrics.csv"))
    _write(os.path.join(out, "train_metrics.txt"), report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def _eval_split(cfg: RunConfig, splits: dict, split: str, n: int, seed: int):
    scenes = splits[split]
    return held_out_episodes(scenes, n, seed, cfg.episodes), _by_id(scenes)


def cmd_loop(cfg: RunConfig, args) -> int:
    seed = cfg.require_seed("loop")
    out = _out_dir(args, cfg)
    splits = _scenes(cfg, args)
    eval_eps, eval_scenes = _eval_split(cfg, splits, cfg.experiment.eval_split, cfg.experiment.eval_episodes, seed)
    _write_config(cfg, out)
    params = init_params(cfg.model, seed)
    result = run_flywheel(
        params, splits["train"], eval_eps, eval_scenes, cfg.loop, cfg.train, cfg.eval, cfg.episodes, out_dir=out, seed=seed
    )
    for row in result.curve:
        print("round {} SR {:.3f} SPL {:.3f} NE {:.3f} OSR {:.3f} nDTW {:.3f}".format(*row))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    seed = cfg.require_seed("eval")
    params = _checkpoint(cfg, args)
    out = _out_dir(args, cfg)
    splits = _scenes(cfg, args)
    split = args.split or cfg.experiment.eval_split
    episodes, scenes = _eval_split(cfg, splits, split, cfg.experiment.eval_episodes, seed)
    diameters = {sid: scene_diameter(s) for sid, s in scenes.items()}
    report = evaluate(params, episodes, scenes, cfg.eval, diameters=diameters)
    _write_config(cfg, out)
    report.to_csv(os.path.join(out, f"metrics_{split}.csv"))
    _write(os.path.join(out, f"metrics_{split}.txt"), report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, args) -> int:
    seed = 0 if cfg.seed is None else cfg.seed
    params = _checkpoint(cfg, args)
    out = _out_dir(args, cfg)
    splits = _scenes(cfg, args)
    split = args.split or cfg.experiment.analyze_split
    episodes, scenes = _eval_split(cfg, splits, split, cfg.experiment.analyze_episodes, seed)
    samples = collect_latents(params, episodes, scenes, cfg.eval)
    try:
        report = collapse_report(samples)
    except ValueError as exc:
        print(f"analyze: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _write_config(cfg, out)
    report.write_projection(os.path.join(out, "projection.csv"))
    _write(os.path.join(out, "collapse_report.txt"), report.to_text())
    _write(os.path.join(out, "collapse_report.json"), report.to_json() + "\n")
    print(report.to_text(), end="")
    return EXIT_FAIL if report.collapsed else EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    seed = 0 if cfg.seed is None else cfg.seed
    err = objective_grad_check(T=cfg.experiment.gradcheck_T, seed=seed, lambda_pil=cfg.train.lambda_pil)
    ok = err <= GRADCHECK_TOL
    print(f"gradcheck T={cfg.experiment.gradcheck_T}: max relative error {err:.3e} ({'PASS' if ok else 'FAIL'})")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_replay(cfg: RunConfig, args) -> int:
    try:
        trajs = read_trajectories(args.trajectories)
    except FileNotFoundError as exc:
        raise UsageError(f"{args.trajectories}: not found") from exc
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{args.trajectories}: unreadable trajectory file ({exc})") from exc
    if not trajs:
        print("0 trajectories")
        return EXIT_OK
    splits = _scenes(cfg, args)
    scenes = {s.id: s for name in scenegen.SPLITS for s in splits[name]}
    failed = 0
    for traj in trajs:
        sid = traj.episode.scene_id
        if sid not in scenes:
            raise UsageError(f"{args.trajectories}: episode {traj.episode.episode_id} names unknown scene {sid!r}")
        for step_no, msg in replay_errors(traj, scenes[sid]):
            print(f"episode {traj.episode.episode_id} step {step_no}: {msg}")
            failed += 1
    print(f"{len(trajs)} trajectories, {failed} mismatching")
    return EXIT_FAIL if failed else EXIT_OK


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "bootstrap": cmd_bootstrap,
    "loop": cmd_loop,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pilotnav", description="Pilot-token grid navigation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides the configured seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", help="checkpoint file (eval, analyze)")
        p.add_argument("--scene-dir", help="scene directory (defaults to paths.scene_dir)")
        if name in ("eval", "analyze"):
            p.add_argument("--split", choices=scenegen.SPLITS, help="scene split to run on")
        if name == "replay":
            p.add_argument("trajectories", help="trajectory JSONL file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError, SceneFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

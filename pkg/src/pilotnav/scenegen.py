"""Procedural rooms-and-corridors scenes with scattered landmarks."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .env import CellClass, Scene, SceneFormatError, geodesic_field, load_scene

SPLITS = ("train", "val_seen", "val_unseen")


@dataclass(frozen=True)
class SceneGenConfig:
    width: int = 15
    height: int = 15
    rooms: int = 5
    room_min: int = 3
    room_max: int = 5
    landmarks: int = 12
    n_train: int = 8
    n_val_unseen: int = 4


def generate_scene(seed: int, cfg: SceneGenConfig = SceneGenConfig(), scene_id: str | None = None) -> Scene:
    rng = np.random.default_rng(seed)
    grid = np.full((cfg.height, cfg.width), CellClass.WALL, dtype=np.int8)
    centers = []
    for _ in range(cfg.rooms):
        w = int(rng.integers(cfg.room_min, cfg.room_max + 1))
        h = int(rng.integers(cfg.room_min, cfg.room_max + 1))
        x0 = int(rng.integers(1, max(2, cfg.width - w)))
        y0 = int(rng.integers(1, max(2, cfg.height - h)))
        grid[y0 : y0 + h, x0 : x0 + w] = CellClass.FLOOR
        centers.append((x0 + w // 2, y0 + h // 2))
    for (ax, ay), (bx, by) in zip(centers, centers[1:]):
        if rng.random() < 0.5:
            grid[ay, min(ax, bx) : max(ax, bx) + 1] = CellClass.FLOOR
            grid[min(ay, by) : max(ay, by) + 1, bx] = CellClass.FLOOR
        else:
            grid[min(ay, by) : max(ay, by) + 1, ax] = CellClass.FLOOR
            grid[by, min(ax, bx) : max(ax, bx) + 1] = CellClass.FLOOR
    floor = np.argwhere(grid == CellClass.FLOOR)
    picks = rng.choice(len(floor), size=min(cfg.landmarks, len(floor)), replace=False)
    for i, idx in enumerate(picks):
        y, x = floor[idx]
        grid[y, x] = CellClass.LANDMARK_A + (i % 6)
    return Scene(grid, scene_id or f"scene_{seed}")


def is_connected(scene: Scene) -> bool:
    cells = scene.walkable_cells()
    field = geodesic_field(scene, [cells[0]])
    return all(np.isfinite(field[y, x]) for x, y in cells)


def generate_split(seed: int, cfg: SceneGenConfig = SceneGenConfig()):
    """Scenes for every split: val_seen reuses the training scenes, val_unseen gets fresh ones."""
    rng = np.random.default_rng(seed)
    train = [generate_scene(int(rng.integers(2**31)), cfg, f"train_{i:02d}") for i in range(cfg.n_train)]
    unseen = [generate_scene(int(rng.integers(2**31)), cfg, f"unseen_{i:02d}") for i in range(cfg.n_val_unseen)]
    return {"train": train, "val_seen": list(train), "val_unseen": unseen}


MANIFEST = "manifest.json"


def write_scene_dir(splits: dict, out_dir, seed: int) -> list:
    """Write one SCENE v1 file per distinct scene plus a split manifest; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written, seen = [], set()
    for name in SPLITS:
        for scene in splits[name]:
            if scene.id in seen:
                continue
            seen.add(scene.id)
            path = os.path.join(out_dir, f"{scene.id}.scene")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(scene.to_text())
            written.append(path)
    manifest = {"seed": seed, "splits": {name: [s.id for s in splits[name]] for name in SPLITS}}
    path = os.path.join(out_dir, MANIFEST)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written


def read_scene_dir(scene_dir) -> dict:
    """Load the splits described by ``manifest.json`` in ``scene_dir``."""
    with open(os.path.join(scene_dir, MANIFEST), encoding="utf-8") as fh:
        manifest = json.load(fh)
    splits = manifest.get("splits")
    if not isinstance(splits, dict) or set(splits) != set(SPLITS):
        raise SceneFormatError(f"{os.path.join(scene_dir, MANIFEST)}: splits must be exactly {list(SPLITS)}")
    cache = {}
    out = {}
    for name in SPLITS:
        out[name] = []
        for sid in splits[name]:
            if sid not in cache:
                path = os.path.join(scene_dir, f"{sid}.scene")
                with open(path, encoding="utf-8") as fh:
                    try:
                        cache[sid] = load_scene(fh.read(), sid)
                    except SceneFormatError as exc:
                        raise SceneFormatError(f"{path}: {exc}") from exc
            out[name].append(cache[sid])
    return out

"""Single-file JSON run configuration with full default disclosure."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .env import EpisodeGenConfig
from .metrics import EvalConfig
from .model import ModelConfig
from .pilotloop import LoopConfig
from .scenegen import SceneGenConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key or file."""


@dataclass(frozen=True)
class PathConfig:
    scene_dir: str = "scenes"
    out_dir: str = "runs/default"
    checkpoint: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    eval_split: str = "val_unseen"
    eval_episodes: int = 50
    analyze_split: str = "val_unseen"
    analyze_episodes: int = 50
    gradcheck_T: int = 2

    def __post_init__(self):
        for name in ("eval_split", "analyze_split"):
            if getattr(self, name) not in ("train", "val_seen", "val_unseen"):
                raise ValueError(f"{name} must be train, val_seen or val_unseen")
        if self.eval_episodes < 1 or self.analyze_episodes < 1:
            raise ValueError("episode counts must be >= 1")
        if self.gradcheck_T < 1:
            raise ValueError("gradcheck_T must be >= 1")


# section name -> dataclass; TrainConfig.seed is driven by the top-level seed
SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "loop": LoopConfig,
    "episodes": EpisodeGenConfig,
    "eval": EvalConfig,
    "scenes": SceneGenConfig,
    "paths": PathConfig,
    "experiment": ExperimentConfig,
}
_HIDDEN = {"train": {"seed"}}


@dataclass(frozen=True)
class RunConfig:
    seed: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    episodes: EpisodeGenConfig = field(default_factory=EpisodeGenConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    scenes: SceneGenConfig = field(default_factory=SceneGenConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            for hidden in _HIDDEN.get(name, ()):
                d.pop(hidden)
            out[name] = d
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    def require_seed(self, command: str) -> int:
        if self.seed is None:
            raise ConfigError(f"'{command}' needs a seed: set the top-level 'seed' key or pass --seed")
        return self.seed


def from_dict(raw: dict, source: str = "<config>") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    unknown = set(raw) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {sorted(unknown)}")
    seed = raw.get("seed")
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool)):
        raise ConfigError(f"{source}: 'seed' must be an integer")
    kwargs = {}
    for name, cls in SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"{source}: section '{name}' must be an object")
        allowed = {f.name for f in fields(cls)} - _HIDDEN.get(name, set())
        bad = set(section) - allowed
        if bad:
            raise ConfigError(f"{source}: unknown key(s) {sorted(f'{name}.{k}' for k in bad)}")
        try:
            kwargs[name] = cls(**section)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: invalid '{name}' section: {exc}") from exc
    cfg = RunConfig(seed=seed, **kwargs)
    return cfg.with_seed(seed) if seed is not None else cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return from_dict(raw, path)

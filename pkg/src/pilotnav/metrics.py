"""Navigation metrics: NE, SR, OSR, SPL and nDTW, plus batch evaluation."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .env import INF, EnvSession, EpisodeSpec, Scene, expert_action, geodesic_field, scene_diameter
from .infer import Trajectory, rollout
from .model import StepOutput


def navigation_error(scene: Scene, final_cell, goal) -> float:
    """Geodesic distance in cells from the final cell to the goal (inf if unreachable)."""
    field = geodesic_field(scene, [tuple(goal)])
    x, y = final_cell
    return float(field[y, x])


def success(ne: float, d_succ: float) -> int:
    return int(ne <= d_succ)


def oracle_success(scene: Scene, cells, goal, d_succ: float, field: np.ndarray | None = None) -> int:
    cells = list(cells)
    if not cells:
        raise ValueError("oracle_success needs at least one visited cell")
    if field is None:
        field = geodesic_field(scene, [tuple(goal)])
    best = min(field[y, x] for x, y in cells)
    return int(best <= d_succ)


def spl(successes, shortest, path_lengths) -> float:
    """Mean of S_i * l_i / max(p_i, l_i); episodes with l_i = 0 are skipped."""
    terms = []
    for s, l, p in zip(successes, shortest, path_lengths):
        if l <= 0:
            warnings.warn("SPL: episode with zero shortest-path length excluded", stacklevel=2)
            continue
        terms.append(s * l / max(p, l))
    return float(np.mean(terms)) if terms else 0.0


def dtw(reference, query) -> float:
    """Dynamic time warping cost with Euclidean point distance."""
    r = np.asarray(reference, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if len(r) == 0 or len(q) == 0:
        raise ValueError("dtw needs non-empty sequences")
    dist = np.sqrt(((r[:, None, :] - q[None, :, :]) ** 2).sum(-1))
    n, m = dist.shape
    cost = np.full((n + 1, m + 1), INF)
    cost[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost[i, j] = dist[i - 1, j - 1] + min(cost[i - 1, j], cost[i, j - 1], cost[i - 1, j - 1])
    return float(cost[n, m])


def ndtw(reference, query, d_succ: float) -> float:
    return math.exp(-dtw(reference, query) / (len(reference) * d_succ))


def cell_centers(cells) -> np.ndarray:
    return np.asarray(cells, dtype=np.float64) + 0.5


def visited_cells(poses) -> list:
    """Cell sequence of a pose list with consecutive repeats (turns, bumps) removed."""
    out = []
    for p in poses:
        c = p.cell if hasattr(p, "cell") else tuple(p)
        if not out or out[-1] != c:
            out.append(c)
    return out


def path_length(poses) -> int:
    """Number of cell-to-cell moves; rotations and blocked moves are free."""
    return len(visited_cells(poses)) - 1


@dataclass
class EpisodeMetrics:
    episode_id: str
    ne: float
    success: int
    oracle_success: int
    spl: float
    ndtw: float
    shortest: int
    path_length: int
    steps: int


@dataclass
class MetricsReport:
    n_episodes: int
    NE_mean: float
    SR: float
    OSR: float
    SPL: float
    nDTW: float
    episodes: list = field(default_factory=list)

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("n_episodes", "NE_mean", "SR", "OSR", "SPL", "nDTW")}

    def to_text(self) -> str:
        return (
            f"episodes {self.n_episodes}: SR {self.SR * 100:.1f}  OSR {self.OSR * 100:.1f}  "
            f"SPL {self.SPL * 100:.1f}  nDTW {self.nDTW * 100:.1f}  NE {self.NE_mean:.2f}"
        )

    def to_csv(self, path=None) -> str:
        """Per-episode rows plus an ``ALL`` summary row; also written to ``path`` if given."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode_id", "NE", "success", "oracle_success", "SPL", "nDTW", "shortest", "path_length", "steps"])
        for e in self.episodes:
            w.writerow([e.episode_id, repr(e.ne), e.success, e.oracle_success, repr(e.spl), repr(e.ndtw),
                        e.shortest, e.path_length, e.steps])
        w.writerow(["ALL", repr(self.NE_mean), repr(self.SR), repr(self.OSR), repr(self.SPL), repr(self.nDTW),
                    "", "", self.n_episodes])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def episode_metrics(scene: Scene, episode: EpisodeSpec, traj: Trajectory, d_succ: float) -> EpisodeMetrics:
    field = geodesic_field(scene, [episode.goal])
    cells = visited_cells(traj.poses)
    fx, fy = traj.poses[-1].cell
    ne = float(field[fy, fx])
    s = success(ne, d_succ)
    os_ = oracle_success(scene, cells, episode.goal, d_succ, field)
    shortest = len(episode.reference_path) - 1
    p = path_length(traj.poses)
    spl_i = spl([s], [shortest], [p]) if shortest > 0 else float(s)
    nd = ndtw(cell_centers(episode.reference_path), cell_centers(cells), d_succ)
    return EpisodeMetrics(episode.episode_id, ne, s, os_, spl_i, nd, shortest, p, traj.length)


def aggregate_metrics(records) -> MetricsReport:
    records = list(records)
    if not records:
        raise ValueError("no episodes to aggregate")
    ne = np.array([r.ne for r in records])
    finite = ne[np.isfinite(ne)]
    return MetricsReport(
        n_episodes=len(records),
        NE_mean=float(finite.mean()) if len(finite) else INF,
        SR=float(np.mean([r.success for r in records])),
        OSR=float(np.mean([r.oracle_success for r in records])),
        SPL=float(np.mean([r.spl for r in records])),
        nDTW=float(np.mean([r.ndtw for r in records])),
        episodes=records,
    )


@dataclass(frozen=True)
class EvalConfig:
    d_succ: float = 2.0
    T_max: int | None = None
    T_max_factor: int = 4


def episode_T_max(scene_diam: int, cfg) -> int:
    return cfg.T_max if cfg.T_max is not None else cfg.T_max_factor * scene_diam


def expert_agent(scene: Scene, episode: EpisodeSpec, session: EnvSession):
    """Step function that always emits the shortest-path expert's action; pilots stay zero."""
    field = geodesic_field(scene, [episode.goal])

    def step_fn(instr, obs, z_prev):
        logits = np.full(4, -1e9)
        logits[int(expert_action(scene, session.pose, field, episode.goal_region))] = 0.0
        z = np.zeros_like(z_prev)
        return StepOutput(logits, z, z, z)

    return step_fn


def evaluate(params, episodes, scenes: dict, cfg: EvalConfig = EvalConfig(), agent=None, diameters=None) -> MetricsReport:
    """Greedy rollout on every episode and aggregate metrics.

    ``agent(scene, episode, session)`` may supply a replacement step function
    (for oracle or baseline agents); by default the model is used.
    """
    episodes = list(episodes)
    if not episodes:
        raise ValueError("evaluate: empty episode set")
    diameters = {} if diameters is None else diameters
    k = params.config.k if params is not None else 5
    records = []
    for ep in episodes:
        scene = scenes[ep.scene_id]
        if ep.scene_id not in diameters:
            diameters[ep.scene_id] = scene_diameter(scene)
        T_max = episode_T_max(diameters[ep.scene_id], cfg)
        session = EnvSession(scene, ep.start, k)
        step_fn = agent(scene, ep, session) if agent is not None else None
        traj = rollout(params, session, ep.instruction, T_max, step_fn=step_fn,
                       z0=None if params is not None else np.zeros(1))
        traj.episode = ep
        records.append(episode_metrics(scene, ep, traj, cfg.d_succ))
    return aggregate_metrics(records)

"""Latent-collapse diagnostics for propagated pilot tokens.

Pilot tokens are gathered from greedy rollouts, projected to two dimensions
with PCA and scored by how well the executed action separates them.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .env import Action, scene_diameter
from .infer import run_episode
from .metrics import EvalConfig, episode_T_max
from .model import ModelParams

ACTION_NAMES = {int(a): a.name for a in Action}


@dataclass(frozen=True)
class LatentSample:
    z: np.ndarray
    action: Action
    episode_id: str
    step: int


def collect_latents(
    params: ModelParams, episodes, scenes: dict, eval_cfg: EvalConfig = EvalConfig()
) -> list[LatentSample]:
    """One sample per executed non-STOP step of a greedy rollout."""
    out = []
    for ep in episodes:
        scene = scenes[ep.scene_id]
        T_max = episode_T_max(scene_diameter(scene), eval_cfg)
        traj = run_episode(params, scene, ep, T_max, params.config.k)
        for t, (a, z) in enumerate(zip(traj.actions, traj.pilots)):
            if a != Action.STOP:
                out.append(LatentSample(np.array(z, copy=True), Action(a), ep.episode_id, t + 1))
    return out


def _fix_signs(components: np.ndarray) -> np.ndarray:
    for row in components:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return components


def pca(points, k: int = 2):
    """Project ``points`` (n x d) onto their top-``k`` principal components.

    Returns ``(projection, ratios, components)``. Ratios are each component's
    share of the total variance. When the centred data has rank below ``k``
    the surplus ratios are zero and a warning is emitted.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"pca expects an n x d array, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ValueError("pca needs at least 2 points")
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k={k} must lie in 1..{min(n, d)}")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s**2 / (n - 1)
    total = var.sum()
    tol = max(n, d) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    comps = _fix_signs(vt[:k].copy())
    ratios = np.zeros(k)
    if total > 0:
        ratios[: min(k, rank)] = var[: min(k, rank)] / total
    if rank < k:
        warnings.warn(f"pca: data rank {rank} is below the requested {k} components", RuntimeWarning)
        comps[rank:] = 0.0
    return xc @ comps.T, ratios, comps


def silhouette(points, labels) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    Points in singleton clusters score 0, as do points whose intra- and
    nearest-cluster mean distances are both zero.
    """
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least two distinct labels")
    dist = np.sqrt(np.maximum(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1), 0.0))
    scores = np.zeros(len(x))
    masks = {u: labels == u for u in uniq}
    for i in range(len(x)):
        own = masks[labels[i]]
        n_own = own.sum()
        if n_own < 2:
            continue
        a = dist[i, own].sum() / (n_own - 1)
        b = min(dist[i, m].mean() for u, m in masks.items() if u != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


@dataclass
class CollapseReport:
    n_samples: int
    total_variance: float
    ratios: list
    centroids: dict
    centroid_distances: dict
    silhouette: float
    projection: np.ndarray
    actions: list

    @property
    def top1_ratio(self) -> float:
        return float(self.ratios[0])

    @property
    def collapsed(self) -> bool:
        return self.total_variance <= 0.0 or not self.silhouette > 0.0 or self.top1_ratio >= 0.99

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "total_variance": self.total_variance,
            "explained_variance_ratios": [float(r) for r in self.ratios],
            "top1_ratio": self.top1_ratio,
            "silhouette": self.silhouette,
            "centroids": {k: [float(v) for v in c] for k, c in self.centroids.items()},
            "centroid_distances": dict(self.centroid_distances),
            "collapsed": self.collapsed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"samples            {self.n_samples}",
            f"total variance     {self.total_variance:.6g}",
            f"explained ratios   " + " ".join(f"{r:.4f}" for r in self.ratios),
            f"silhouette (2D)    {self.silhouette:.4f}",
        ]
        for pair, dist in sorted(self.centroid_distances.items()):
            lines.append(f"centroid distance  {pair:<12} {dist:.4f}")
        lines.append("status             " + ("COLLAPSED" if self.collapsed else "structured"))
        return "\n".join(lines) + "\n"

    def write_projection(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "action_name"])
            for (x, y), a in zip(self.projection, self.actions):
                w.writerow([repr(float(x)), repr(float(y)), ACTION_NAMES[int(a)]])


def collapse_report(samples, min_samples: int = 10) -> CollapseReport:
    """PCA and action-cluster statistics for a set of latent samples."""
    samples = [s for s in samples if s.action != Action.STOP]
    if len(samples) < min_samples:
        raise ValueError(f"collapse_report needs at least {min_samples} non-STOP samples, got {len(samples)}")
    actions = np.array([int(s.action) for s in samples])
    if len(np.unique(actions)) < 2:
        raise ValueError("collapse_report needs at least two distinct actions")
    z = np.stack([np.asarray(s.z, dtype=np.float64) for s in samples])
    total_var = float(z.var(axis=0, ddof=1).sum())
    k = min(2, z.shape[1])
    with warnings.catch_warnings():
        if total_var == 0:
            warnings.simplefilter("ignore", RuntimeWarning)
        proj, ratios, _ = pca(z, k)
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((len(proj), 1))])
    centroids = {ACTION_NAMES[a]: z[actions == a].mean(axis=0) for a in np.unique(actions)}
    names = sorted(centroids, key=lambda n: Action[n].value)
    dists = {
        f"{a}-{b}": float(np.linalg.norm(centroids[a] - centroids[b]))
        for i, a in enumerate(names)
        for b in names[i + 1 :]
    }
    sil = silhouette(proj, actions)
    if not math.isfinite(sil):
        sil = 0.0
    return CollapseReport(len(samples), total_var, list(ratios), centroids, dists, sil, proj, list(actions))

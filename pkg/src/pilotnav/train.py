"""Future-privileged supervised training.

At training step t the PILOT slot is filled with the pooled encoding of the
next observation and the produced pilot token is regressed onto the pooled
encoding of the observation after that. Action logits are trained with
cross-entropy on the collected actions. Targets are constants.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import ModelParams, encode_patches, pool_tokens, step_batch
from .numerics import Tensor

log = logging.getLogger(__name__)

SUPERVISION_MODES = ("vision", "none")
LABEL_MODES = ("executed", "expert")


@dataclass(frozen=True)
class TrainConfig:
    lambda_pil: float = 0.1
    lr: float = 1e-3
    epochs: int = 4
    batch_episodes: int = 16
    seed: int = 0
    supervision_mode: str = "vision"
    label_mode: str = "executed"
    detach_targets: bool = True
    precision: str = "float32"
    clip_norm: float | None = 1.0
    slot_dropout: float = 0.0

    def __post_init__(self):
        if self.lambda_pil < 0:
            raise ValueError("lambda_pil must be >= 0")
        if self.supervision_mode not in SUPERVISION_MODES:
            raise ValueError(f"supervision_mode must be one of {SUPERVISION_MODES}")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"label_mode must be one of {LABEL_MODES}")
        if self.epochs < 1 or self.batch_episodes < 1:
            raise ValueError("epochs and batch_episodes must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.slot_dropout <= 1:
            raise ValueError("slot_dropout must lie within [0, 1]")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.supervision_mode == "none" else self.lambda_pil


@dataclass
class PrivilegedBatch:
    """Per-step training tensors for one trajectory.

    ``pilot_inputs[t]`` is the pooled encoding of o_{t+1} (o_T on the last
    step); ``pilot_targets[t]`` is the pooled encoding of o_{t+2} and exists
    for the first T-2 steps only.
    """

    instruction: list
    observations: np.ndarray
    pilot_inputs: Tensor
    pilot_targets: Tensor
    labels: np.ndarray

    @property
    def length(self) -> int:
        return len(self.labels)


def training_labels(traj, label_mode: str = "executed") -> np.ndarray:
    if label_mode == "expert":
        return np.asarray(traj.expert_actions, dtype=np.int64)
    return np.asarray(traj.actions, dtype=np.int64)


def build_privileged_batch(params: ModelParams, traj, label_mode: str = "executed", detach_targets: bool = True):
    obs = np.asarray(traj.observations)
    T = len(obs)
    if T == 0:
        raise ValueError("trajectory has no steps")
    pooled = pool_tokens(encode_patches(params, obs))  # (T, d)
    nxt = np.minimum(np.arange(T) + 1, T - 1)
    inputs = pooled[nxt]
    targets = pooled[2:] if T > 2 else pooled[0:0]
    if detach_targets:
        targets = targets.detach()
    return PrivilegedBatch(list(traj.instruction), obs, inputs, targets, training_labels(traj, label_mode))


def loss_action(logits: Tensor, labels) -> Tensor:
    """Summed cross-entropy of the collected actions."""
    return nx.cross_entropy_sum(logits, labels)


def loss_pilot(pilots: Tensor, targets: Tensor) -> Tensor:
    """Summed squared L2 distance between pilot tokens and their two-step-ahead targets."""
    if pilots.shape != targets.shape:
        raise nx.ShapeError(f"loss_pilot: pilots {pilots.shape} vs targets {targets.shape}")
    if pilots.shape[0] == 0:
        return Tensor(0.0)
    return nx.squared_error_sum(pilots, targets)


def total_loss(l_act, l_pil, lambda_pil: float):
    if lambda_pil == 0:
        return l_act
    return l_act + lambda_pil * l_pil


def _drop_slots(params: ModelParams, inputs: Tensor, cfg: TrainConfig, rng) -> Tensor:
    """Replace each privileged slot input by the placeholder z0 with probability ``slot_dropout``.

    Off by default. When on, the policy cannot lean entirely on the
    privileged slot, which it never sees at inference.
    """
    if rng is None or cfg.slot_dropout == 0:
        return inputs
    n, d = inputs.shape
    drop = rng.random(n) < cfg.slot_dropout
    z0 = nx.linear(Tensor(np.ones((n, 1))), nx.reshape(params["z0"], (1, d)))
    return nx.where_rows(drop, z0, inputs)


def _trajectory_losses(params: ModelParams, trajs, cfg: TrainConfig, rng=None):
    """Teacher-forced losses for a group of trajectories, batched over all their steps.

    Returns (total, act, pil) as tensors averaged over trajectories.
    """
    batches = [build_privileged_batch(params, t, cfg.label_mode, cfg.detach_targets) for t in trajs]
    instrs, patches, labels, inputs = [], [], [], []
    for b in batches:
        instrs.extend([b.instruction] * b.length)
        patches.append(b.observations)
        labels.append(b.labels)
        inputs.append(b.pilot_inputs)
    slots = _drop_slots(params, nx.concat(inputs, axis=0), cfg, rng)
    logits, pilots, _, _ = step_batch(params, instrs, np.concatenate(patches), slots)
    labels = np.concatenate(labels)
    l_act = loss_action(logits, labels)
    lam = cfg.effective_lambda
    if lam > 0:
        sel, tgt = [], []
        offset = 0
        for b in batches:
            n = b.pilot_targets.shape[0]
            sel.extend(range(offset, offset + n))
            tgt.append(b.pilot_targets)
            offset += b.length
        l_pil = loss_pilot(pilots[np.asarray(sel, dtype=np.int64)], nx.concat(tgt, axis=0))
    else:
        l_pil = Tensor(0.0)
    scale = 1.0 / len(trajs)
    return total_loss(l_act, l_pil, lam) * scale, l_act * scale, l_pil * scale


def self_fed_losses(params: ModelParams, traj, cfg: TrainConfig):
    """Diagnostic variant filling the PILOT slot with the model's own recurrent pilot.

    Exists to show that the teacher-forced path differs from inference-style
    slot filling; it is never used for optimisation.
    """
    b = build_privileged_batch(params, traj, cfg.label_mode, cfg.detach_targets)
    z = params["z0"]
    logits, pilots = [], []
    for t in range(b.length):
        lg, z, _, _ = step_batch(params, [b.instruction], b.observations[t : t + 1], nx.reshape(z, (1, -1)))
        logits.append(lg)
        pilots.append(z)
        z = z[0]
    logits = nx.concat(logits, axis=0)
    pilots = nx.concat(pilots, axis=0)
    l_act = loss_action(logits, b.labels)
    n = b.pilot_targets.shape[0]
    l_pil = loss_pilot(pilots[0:n], b.pilot_targets) if cfg.effective_lambda > 0 else Tensor(0.0)
    return total_loss(l_act, l_pil, cfg.effective_lambda), l_act, l_pil


def trajectory_loss(params: ModelParams, traj, cfg: TrainConfig, slot: str = "privileged"):
    """Objective for a single trajectory; ``slot='self'`` selects the diagnostic self-fed path."""
    if slot == "privileged":
        return _trajectory_losses(params, [traj], cfg)
    if slot == "self":
        return self_fed_losses(params, traj, cfg)
    raise ValueError(f"unknown slot filling {slot!r}")


@dataclass
class EpochRecord:
    round: int
    epoch: int
    loss_total: float
    loss_act: float
    loss_pil: float


def train_round(params: ModelParams, buffer, cfg: TrainConfig, round_index: int = 0, epochs: int | None = None):
    """Fine-tune ``params`` in place on ``buffer``; returns per-epoch loss records."""
    buffer = list(buffer)
    if not buffer:
        raise ValueError("train_round: empty trajectory buffer")
    n_epochs = cfg.epochs if epochs is None else epochs
    params.cast(cfg.precision)
    try:
        with nx.precision(cfg.precision):
            records = _run_epochs(params, buffer, cfg, round_index, n_epochs)
    finally:
        params.cast(np.float64)
    params.check_finite()
    return records


def _run_epochs(params, buffer, cfg, round_index, n_epochs):
    rng = np.random.default_rng([cfg.seed, round_index])
    records = []
    for epoch in range(n_epochs):
        order = rng.permutation(len(buffer))
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_episodes):
            group = [buffer[i] for i in order[start : start + cfg.batch_episodes]]
            params.zero_grad()
            total, act, pil = _trajectory_losses(params, group, cfg, rng)
            value = float(total.data)
            if not math.isfinite(value):
                raise FloatingPointError(
                    f"non-finite loss in round {round_index}, epoch {epoch}, batch at {start}: "
                    f"act={float(act.data)}, pil={float(pil.data)}"
                )
            nx.backward(total, params)
            nx.adam_step(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
            sums += np.array([value, float(act.data), float(pil.data)]) * len(group)
        mean = sums / len(buffer)
        rec = EpochRecord(round_index, epoch, float(mean[0]), float(mean[1]), float(mean[2]))
        log.debug("round %d epoch %d loss %.4f (act %.4f, pil %.4f)", *[round_index, epoch], *mean)
        records.append(rec)
    return records


LOSS_LOG_COLUMNS = ("round", "epoch", "loss_total", "loss_act", "loss_pil")


def write_loss_log(records, path, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(LOSS_LOG_COLUMNS)
        for r in records:
            w.writerow([r.round, r.epoch, repr(r.loss_total), repr(r.loss_act), repr(r.loss_pil)])


def objective_grad_check(T: int = 2, seed: int = 0, d: int = 4, k: int = 3, eps: float = 1e-5,
                         lambda_pil: float = 0.1) -> float:
    """Finite-difference check of the full training objective on a synthetic trajectory.

    Runs in float64 on a small model whose weights are drawn wide enough to
    keep every gradient well above round-off. Targets are left attached so
    the checked function is the one being differentiated.
    """
    from types import SimpleNamespace

    from .env import NUM_CLASSES, VOCAB_SIZE
    from .model import ModelConfig, init_params

    rng = np.random.default_rng(seed)
    params = init_params(ModelConfig(d=d, n_layers=2, n_heads=2, k=k), seed, std=0.5)
    traj = SimpleNamespace(
        observations=rng.integers(0, NUM_CLASSES, size=(T, k, k)),
        instruction=list(rng.integers(0, VOCAB_SIZE, size=5)),
        actions=list(rng.integers(0, 4, size=T)),
    )
    cfg = TrainConfig(lambda_pil=lambda_pil, precision="float64", detach_targets=False)
    with nx.precision("float64"):
        return nx.grad_check(lambda: _trajectory_losses(params, [traj], cfg)[0], params, eps)

"""Pilot-token navigation policy.

One step consumes ``[instruction tokens; visual tokens; PILOT slot; ACT query]``
through a small pre-norm causal transformer. The ACT-position hidden state
feeds a linear action head; the PILOT-position hidden state is projected by a
single linear layer into the next pilot token, which is the only state carried
between steps.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .env import NUM_CLASSES, VOCAB_SIZE
from .numerics import ParamStore, Tensor

CKPT_FORMAT = "CKPT v1"


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    n_layers: int = 2
    n_heads: int = 2
    vocab: int = VOCAB_SIZE
    k: int = 5
    L_max: int = 24
    action_count: int = 4

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"ModelConfig.{f.name} must be positive")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.vocab > 64:
            raise ValueError("instruction vocabulary is capped at 64 entries")
        if self.k % 2 == 0:
            raise ValueError("patch side k must be odd")
        if self.action_count != 4:
            raise ValueError("the action set has exactly 4 members")

    @property
    def n_visual(self) -> int:
        return self.k * self.k


class ModelParams(ParamStore):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    def copy(self) -> "ModelParams":
        out = ModelParams(self.config)
        for name, t in self.items():
            out.add(name, t.data)
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        out.t = self.t
        return out


@dataclass
class StepOutput:
    action_logits: np.ndarray
    pilot: np.ndarray
    h_act: np.ndarray
    h_pil: np.ndarray


def init_params(config: ModelConfig = ModelConfig(), seed: int = 0, std: float = 0.1) -> ModelParams:
    rng = np.random.default_rng(seed)
    d = config.d
    p = ModelParams(config)

    def normal(*shape):
        return rng.normal(0.0, std, size=shape)

    p.add("instr_emb", normal(config.vocab, d))
    p.add("instr_pos", normal(config.L_max, d))
    p.add("cell_emb", normal(NUM_CLASSES, d))
    p.add("patch_pos", normal(config.n_visual, d))
    p.add("z0", normal(d))
    p.add("act_query", normal(d))
    for i in range(config.n_layers):
        pre = f"blocks.{i}."
        p.add(pre + "ln1.g", np.ones(d))
        p.add(pre + "ln1.b", np.zeros(d))
        for w in ("wq", "wk", "wv", "wo"):
            p.add(pre + f"attn.{w}", normal(d, d))
            if w != "wk":  # a key bias shifts every score in a row equally: no effect
                p.add(pre + f"attn.{w}_b", np.zeros(d))
        p.add(pre + "ln2.g", np.ones(d))
        p.add(pre + "ln2.b", np.zeros(d))
        p.add(pre + "mlp.w1", normal(d, 4 * d))
        p.add(pre + "mlp.b1", np.zeros(4 * d))
        p.add(pre + "mlp.w2", normal(4 * d, d))
        p.add(pre + "mlp.b2", np.zeros(d))
    p.add("ln_f.g", np.ones(d))
    p.add("ln_f.b", np.zeros(d))
    p.add("head.W_a", normal(d, config.action_count))
    p.add("pilot.G", normal(d, d))
    p.add("pilot.b", np.zeros(d))
    return p


# ---------------------------------------------------------------- encoder


def _one_hot(ids: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(ids.shape + (n,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def encode_patches(params: ModelParams, patches) -> Tensor:
    """(B, k, k) class grids -> (B, k*k, d) visual tokens."""
    patches = np.asarray(patches, dtype=np.int64)
    cfg = params.config
    if patches.ndim != 3 or patches.shape[1:] != (cfg.k, cfg.k):
        raise ValueError(f"expected patches of shape (B, {cfg.k}, {cfg.k}), got {patches.shape}")
    if patches.min() < 0 or patches.max() >= NUM_CLASSES:
        raise ValueError(f"cell class out of range 0..{NUM_CLASSES - 1}")
    flat = patches.reshape(patches.shape[0], cfg.n_visual)
    # one-hot product keeps lookups exact and avoids scatter-add in backward
    tokens = nx.linear(Tensor(_one_hot(flat, NUM_CLASSES)), params["cell_emb"])
    return tokens + params["patch_pos"]


def encode_observation(params: ModelParams, obs) -> Tensor:
    """k x k observation -> (k*k, d) visual tokens, row-major patch order."""
    return encode_patches(params, np.asarray(obs)[None])[0]


def pool_tokens(v: Tensor) -> Tensor:
    """Mean over the token axis (second to last)."""
    if v.shape[-2] < 1:
        raise ValueError("pool_tokens: no tokens to pool")
    return nx.mean(v, axis=-2)


# ---------------------------------------------------------------- sequence assembly


def assemble(params: ModelParams, instrs, visual: Tensor, pilot_inputs: Tensor):
    """Batch-assemble ``[instr; visual; PILOT; ACT]``.

    Instructions are right-padded to the longest in the batch; padded
    positions are excluded as attention keys so every real position computes
    the same function as in an unpadded sequence. Returns
    ``(u, key_valid, pilot_pos)`` with ``u`` of shape (B, N, d).
    """
    cfg = params.config
    b = len(instrs)
    lens = [len(s) for s in instrs]
    if min(lens) < 1:
        raise ValueError("instruction must contain at least one token")
    if max(lens) > cfg.L_max:
        raise ValueError(f"instruction of length {max(lens)} exceeds L_max={cfg.L_max}")
    lb = max(lens)
    ids = np.zeros((b, lb), dtype=np.int64)
    valid = np.zeros((b, lb), dtype=bool)
    for i, s in enumerate(instrs):
        ids[i, : len(s)] = s
        valid[i, : len(s)] = True
    if ids.max() >= cfg.vocab or ids.min() < 0:
        raise ValueError(f"instruction token id outside vocabulary of size {cfg.vocab}")
    tok = nx.linear(Tensor(_one_hot(ids, cfg.vocab)), params["instr_emb"])
    tok = tok + nx.index(params["instr_pos"], slice(0, lb))
    pilot = nx.reshape(pilot_inputs, (b, 1, cfg.d))
    act = nx.linear(Tensor(np.ones((b, 1, 1))), nx.reshape(params["act_query"], (1, cfg.d)))
    u = nx.concat([tok, visual, pilot, act], axis=1)
    key_valid = np.concatenate([valid, np.ones((b, cfg.n_visual + 2), dtype=bool)], axis=1)
    return u, key_valid, lb + cfg.n_visual


def build_sequence(params: ModelParams, instr, v_t: Tensor, pilot_input) -> Tensor:
    """Single-step input sequence of length |instr| + k^2 + 2."""
    pilot_input = nx.as_tensor(pilot_input)
    u, _, _ = assemble(params, [list(instr)], nx.reshape(v_t, (1,) + v_t.shape), nx.reshape(pilot_input, (1, -1)))
    return u[0]


# ---------------------------------------------------------------- backbone


def _block(params: ModelParams, i: int, x: Tensor, mask: np.ndarray, tail: int | None = None) -> Tensor:
    """One pre-norm block; with ``tail`` only the last ``tail`` positions are computed."""
    cfg = params.config
    pre = f"blocks.{i}."
    b, n, d = x.shape
    h, dh = cfg.n_heads, cfg.d // cfg.n_heads
    y = nx.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])

    def heads(name, src, rows):
        bias = params[pre + f"attn.{name}_b"] if pre + f"attn.{name}_b" in params else None
        t = nx.linear(src, params[pre + f"attn.{name}"], bias)
        return nx.transpose(nx.reshape(t, (b, rows, h, dh)), (0, 2, 1, 3))

    m = n
    if tail is not None:
        m = tail
        x = x[:, n - m :]
        mask = mask[..., n - m :, :]
    q = heads("wq", y if m == n else y[:, n - m :], m)
    att = nx.attention(q, heads("wk", y, n), heads("wv", y, n), mask)
    att = nx.reshape(nx.transpose(att, (0, 2, 1, 3)), (b, m, d))
    x = x + nx.linear(att, params[pre + "attn.wo"], params[pre + "attn.wo_b"])
    y = nx.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
    y = nx.gelu(nx.linear(y, params[pre + "mlp.w1"], params[pre + "mlp.b1"]))
    return x + nx.linear(y, params[pre + "mlp.w2"], params[pre + "mlp.b2"])


def forward(params: ModelParams, u: Tensor, key_valid: np.ndarray | None = None, tail: int | None = None) -> Tensor:
    """Causal transformer over (N, d) or (B, N, d) inputs.

    Returns hidden states of the same shape, or of the last ``tail``
    positions only (the final block then skips the other rows).
    """
    single = len(u.shape) == 2
    if single:
        u = nx.reshape(u, (1,) + u.shape)
    b, n, _ = u.shape
    mask = nx.causal_mask(n)[None, None]
    if key_valid is not None:
        mask = mask & np.asarray(key_valid, dtype=bool)[:, None, None, :]
    x = u
    last = params.config.n_layers - 1
    for i in range(params.config.n_layers):
        x = _block(params, i, x, mask, tail if i == last else None)
    x = nx.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return x[0] if single else x


# ---------------------------------------------------------------- heads


def action_logits(params: ModelParams, h_act: Tensor) -> Tensor:
    return nx.linear(h_act, params["head.W_a"])


def action_distribution(params: ModelParams, h_act) -> np.ndarray:
    with nx.no_grad():
        return nx.softmax(action_logits(params, nx.as_tensor(h_act))).data


def pilot_update(params: ModelParams, h_pil) -> Tensor:
    return nx.linear(nx.as_tensor(h_pil), params["pilot.G"], params["pilot.b"])


def step_batch(params: ModelParams, instrs, patches, pilot_inputs: Tensor):
    """Batched single-step transition. Returns (logits, pilots, h_act, h_pil) tensors."""
    visual = encode_patches(params, patches)
    u, key_valid, pil = assemble(params, instrs, visual, pilot_inputs)
    # PILOT and ACT are the final two positions
    hidden = forward(params, u, key_valid, tail=2)
    h_pil = hidden[:, 0]
    h_act = hidden[:, 1]
    return action_logits(params, h_act), pilot_update(params, h_pil), h_act, h_pil


def model_step(params: ModelParams, instr, obs, z_prev) -> StepOutput:
    """(instruction, current observation, previous pilot) -> (action logits, new pilot)."""
    with nx.no_grad():
        z_prev = np.asarray(z_prev, dtype=np.float64).reshape(1, -1)
        logits, z, h_act, h_pil = step_batch(params, [list(instr)], np.asarray(obs)[None], Tensor(z_prev))
    return StepOutput(logits.data[0], z.data[0], h_act.data[0], h_pil.data[0])


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


def checkpoint_dict(params: ModelParams) -> dict:
    return {
        "format": CKPT_FORMAT,
        "config": asdict(params.config),
        "params": {
            name: {"shape": list(t.shape), "values": t.data.ravel().tolist()} for name, t in params.items()
        },
    }


def save_checkpoint(params: ModelParams, path) -> None:
    params.check_finite()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(params), fh, separators=(",", ":"))
        fh.write("\n")


def params_from_dict(doc: dict) -> ModelParams:
    if doc.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {doc.get('format')!r}")
    try:
        config = ModelConfig(**doc["config"])
    except TypeError as exc:
        raise CheckpointError(f"bad checkpoint config: {exc}") from None
    reference = init_params(config)
    params = ModelParams(config)
    stored = doc["params"]
    if set(stored) != set(reference.names()):
        missing = set(reference.names()) ^ set(stored)
        raise CheckpointError(f"checkpoint parameter names do not match the model: {sorted(missing)}")
    for name in reference.names():
        entry = stored[name]
        shape = tuple(entry["shape"])
        if shape != reference[name].shape:
            raise CheckpointError(f"parameter {name!r} has shape {shape}, expected {reference[name].shape}")
        params.add(name, np.array(entry["values"], dtype=np.float64).reshape(shape))
    params.check_finite()
    return params


def load_checkpoint(path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        return params_from_dict(json.load(fh))

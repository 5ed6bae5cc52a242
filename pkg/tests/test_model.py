import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL, perturbed
from pilotnav import numerics as nx
from pilotnav.env import CellClass
from pilotnav.model import (
    CheckpointError,
    ModelConfig,
    action_distribution,
    build_sequence,
    checkpoint_dict,
    encode_observation,
    forward,
    init_params,
    load_checkpoint,
    model_step,
    params_from_dict,
    pilot_update,
    save_checkpoint,
    step_batch,
)
from pilotnav.numerics import Tensor
from pilotnav.train import TrainConfig, _trajectory_losses

FLOOR_OBS = np.full((5, 5), int(CellClass.FLOOR))


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(d=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab=65)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)


def test_encode_all_wall_patch(small_params):
    v = encode_observation(small_params, np.zeros((5, 5), dtype=int)).data
    expected = small_params["cell_emb"].data[CellClass.WALL] + small_params["patch_pos"].data
    assert v.shape == (25, SMALL.d)
    assert np.allclose(v, expected)


def test_encode_locality(small_params):
    a = FLOOR_OBS.copy()
    b = FLOOR_OBS.copy()
    b[1, 3] = int(CellClass.WALL)
    diff = np.any(encode_observation(small_params, a).data != encode_observation(small_params, b).data, axis=1)
    assert np.flatnonzero(diff).tolist() == [1 * 5 + 3]


def test_encode_rejects_bad_class(small_params):
    with pytest.raises(ValueError):
        encode_observation(small_params, np.full((5, 5), 99))


def test_sequence_length_and_slots(small_params):
    v = encode_observation(small_params, FLOOR_OBS)
    z0 = small_params["z0"].data
    u = build_sequence(small_params, [1, 2, 3, 4, 5, 6], v, z0).data
    assert u.shape == (33, SMALL.d)
    assert np.array_equal(u[31], z0)
    assert np.array_equal(u[32], small_params["act_query"].data)


def test_swapping_instruction_tokens_is_local(small_params):
    v = encode_observation(small_params, FLOOR_OBS)
    z0 = small_params["z0"].data
    a = build_sequence(small_params, [1, 2, 3, 4], v, z0).data
    b = build_sequence(small_params, [1, 4, 3, 2], v, z0).data
    assert np.flatnonzero(np.any(a != b, axis=1)).tolist() == [1, 3]


def test_instruction_too_long(small_params):
    v = encode_observation(small_params, FLOOR_OBS)
    with pytest.raises(ValueError, match="L_max"):
        build_sequence(small_params, [1] * (SMALL.L_max + 1), v, small_params["z0"].data)


def _hidden(params, u):
    with nx.no_grad():
        return forward(params, Tensor(u)).data


def test_forward_shape_and_act_does_not_reach_pilot(small_params):
    v = encode_observation(small_params, FLOOR_OBS)
    u = build_sequence(small_params, [3, 4, 5], v, small_params["z0"].data).data
    h = _hidden(small_params, u)
    assert h.shape == u.shape
    u2 = u.copy()
    u2[-1] += 1.0
    h2 = _hidden(small_params, u2)
    assert np.array_equal(h[:-1], h2[:-1])
    assert not np.array_equal(h[-1], h2[-1])
    u3 = u.copy()
    u3[-2] += 1.0
    assert not np.array_equal(h[-2], _hidden(small_params, u3)[-2])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_strict_causality(seed, j):
    params = init_params(SMALL, seed % 7)
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(31, SMALL.d))
    h = _hidden(params, u)
    u[j:] += rng.normal(size=u[j:].shape)
    assert np.array_equal(h[:j], _hidden(params, u)[:j])


def test_tail_forward_matches_full(small_params):
    rng = np.random.default_rng(0)
    u = Tensor(rng.normal(size=(2, 20, SMALL.d)))
    with nx.no_grad():
        full = forward(small_params, u).data
        tail = forward(small_params, u, tail=2).data
    assert np.allclose(full[:, -2:], tail, atol=1e-12)


def test_padding_does_not_change_real_rows(small_params):
    obs = np.stack([FLOOR_OBS, FLOOR_OBS])
    z = Tensor(np.tile(small_params["z0"].data, (2, 1)))
    with nx.no_grad():
        solo = step_batch(small_params, [[1, 2]], obs[:1], z[0:1])
        padded = step_batch(small_params, [[1, 2], [1, 2, 3, 4, 5]], obs, z)
    assert np.allclose(solo[0].data[0], padded[0].data[0], atol=1e-12)
    assert np.allclose(solo[1].data[0], padded[1].data[0], atol=1e-12)


def test_action_distribution_examples(small_params):
    h = np.random.default_rng(1).normal(size=SMALL.d)
    p = action_distribution(small_params, h)
    assert p.sum() == pytest.approx(1.0)
    logits = h @ small_params["head.W_a"].data
    assert np.argmax(p) == np.argmax(logits)
    small_params["head.W_a"].data[:] = 0
    assert np.allclose(action_distribution(small_params, h), 0.25)


def test_softmax_shift_invariance():
    x = np.array([0.3, -1.0, 2.0, 0.5])
    assert np.allclose(nx.softmax(Tensor(x)).data, nx.softmax(Tensor(x + 7.5)).data)


def test_pilot_update_identity_and_linearity(small_params):
    h = np.random.default_rng(2).normal(size=SMALL.d)
    small_params["pilot.G"].data[:] = np.eye(SMALL.d)
    assert np.allclose(pilot_update(small_params, h).data, h)
    small_params["pilot.G"].data[:] = np.random.default_rng(3).normal(size=(SMALL.d, SMALL.d))
    z = pilot_update(small_params, h).data
    assert z.shape == (SMALL.d,)
    assert np.allclose(pilot_update(small_params, 2.5 * h).data, 2.5 * z)


def test_model_step_deterministic_and_finite(small_params):
    a = model_step(small_params, [1, 2, 3], FLOOR_OBS, small_params["z0"].data)
    b = model_step(small_params, [1, 2, 3], FLOOR_OBS, small_params["z0"].data)
    assert np.array_equal(a.action_logits, b.action_logits)
    assert np.array_equal(a.pilot, b.pilot)
    assert np.all(np.isfinite(a.action_logits)) and np.all(np.isfinite(a.pilot))


def test_model_step_depends_on_previous_pilot(small_params):
    a = model_step(small_params, [1, 2, 3], FLOOR_OBS, small_params["z0"].data)
    # a constant shift across features would vanish under layer norm
    b = model_step(small_params, [1, 2, 3], FLOOR_OBS, perturbed(small_params["z0"].data, 0.5))
    assert not np.allclose(a.action_logits, b.action_logits)


def test_no_dead_parameters(small_params, expert_trajs):
    # slot dropout is what routes gradient into z0; teacher forcing alone never reads it
    cfg = TrainConfig(slot_dropout=0.5, precision="float64")
    total, _, _ = _trajectory_losses(small_params, expert_trajs, cfg, np.random.default_rng(0))
    nx.backward(total, small_params)
    dead = [n for n, t in small_params.items() if not np.any(t.grad)]
    assert dead == []


def test_z0_disconnected_without_slot_dropout(small_params, expert_trajs):
    total, _, _ = _trajectory_losses(small_params, expert_trajs, TrainConfig(precision="float64"))
    nx.backward(total, small_params)
    dead = [n for n, t in small_params.items() if not np.any(t.grad)]
    assert dead == ["z0"]


def test_checkpoint_round_trip(tmp_path, small_params):
    path = tmp_path / "m.ckpt.json"
    save_checkpoint(small_params, path)
    loaded = load_checkpoint(path)
    assert loaded.config == small_params.config
    for name, t in small_params.items():
        assert np.array_equal(loaded[name].data, t.data)
    assert json.loads(path.read_text())["format"] == "CKPT v1"


def test_checkpoint_rejects_unknown_format(small_params):
    doc = checkpoint_dict(small_params)
    doc["format"] = "CKPT v2"
    with pytest.raises(CheckpointError, match="format"):
        params_from_dict(doc)
    doc = checkpoint_dict(small_params)
    del doc["params"]["z0"]
    with pytest.raises(CheckpointError, match="z0"):
        params_from_dict(doc)
    doc = checkpoint_dict(small_params)
    doc["params"]["z0"]["shape"] = [SMALL.d + 1]
    with pytest.raises(CheckpointError):
        params_from_dict(doc)

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from geocorr import diffengine as de
from geocorr import trainer as trainer_mod
from geocorr.errors import ConfigError, DatasetLeakage, DivergedTraining, NonFiniteGradient
from geocorr.language import split_next_token
from geocorr.losses import LossConfig, build_correspondence_batch, geometric_losses
from geocorr.model import init_model
from geocorr.trainer import (
    OptimizerState,
    TrainConfig,
    clip_gradients,
    global_norm,
    lr_at,
    optimizer_step,
    step_plan,
    total_steps,
    train,
)

from conftest import tiny_data_config, tiny_model_config

GRAMMAR = tiny_data_config().grammar


def tiny_train(**kw) -> TrainConfig:
    base = dict(epochs=1, batch_size=2, fine_grid="12x12", seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- schedule


def test_lr_examples():
    cfg = TrainConfig(peak_lr=1e-4, warmup_frac=0.1)
    assert lr_at(10, 100, cfg) == 1e-4
    assert lr_at(10, 100, cfg, 4.0) == pytest.approx(4e-4, abs=1e-20)
    assert abs(lr_at(100, 100, cfg)) < 1e-18
    assert lr_at(0, 100, cfg) == 0.0
    assert lr_at(5, 100, cfg) == pytest.approx(0.5e-4)
    # halfway through the cosine
    assert lr_at(55, 100, cfg) == pytest.approx(0.5e-4)


def test_lr_schedule_is_unimodal():
    cfg = TrainConfig(warmup_frac=0.1)
    lrs = [lr_at(s, 237, cfg) for s in range(238)]
    peak = int(np.argmax(lrs))
    assert all(a <= b for a, b in zip(lrs[:peak], lrs[1 : peak + 1]))
    assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1 :]))


@pytest.mark.parametrize(
    "kw", [dict(warmup_frac=1.0), dict(clip_norm=0.0), dict(peak_lr=0.0), dict(epochs=0), dict(attention_dtype="float16")]
)
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_train_config_round_trip():
    cfg = TrainConfig(head_layers=(2, 3), betas=(0.8, 0.99))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# ---------------------------------------------------------------- clipping


def test_clip_leaves_small_gradients():
    g = {"a": np.array([0.3, 0.4]), "b": np.zeros(2)}
    out, pre = clip_gradients(g, 1.0)
    assert pre == pytest.approx(0.5)
    np.testing.assert_array_equal(out["a"], g["a"])


def test_clip_scales_to_norm_and_keeps_direction():
    g = {"a": np.array([2.4, 0.0]), "b": np.array([[0.0, 3.2]])}
    out, pre = clip_gradients(g, 1.0)
    assert pre == pytest.approx(4.0)
    assert abs(global_norm(out) - 1.0) < 1e-12
    for k in g:
        np.testing.assert_allclose(out[k], g[k] / 4.0, rtol=1e-15)


def test_clip_names_non_finite_parameter():
    with pytest.raises(NonFiniteGradient) as e:
        clip_gradients({"ok": np.ones(2), "layers.1.attn.q.lora_B": np.array([np.nan])}, 1.0)
    assert "layers.1.attn.q.lora_B" in str(e.value)


# ---------------------------------------------------------------- AdamW


def test_zero_gradient_leaves_params_bit_exact():
    p = {"w": np.array([1.5, -2.0])}
    before = p["w"].copy()
    cfg = TrainConfig(weight_decay=0.0)
    optimizer_step(p, {"w": np.zeros(2)}, OptimizerState(), {"w": 0.1}, cfg, {"w"})
    np.testing.assert_array_equal(p["w"], before)


def test_hand_computed_adam_steps():
    cfg = TrainConfig(weight_decay=0.0, betas=(0.9, 0.999), adam_eps=1e-8)
    p, g, lr = {"w": np.array([1.0])}, 0.5, 0.01
    state = OptimizerState()
    optimizer_step(p, {"w": np.array([g])}, state, {"w": lr}, cfg)
    # bias-corrected first step: m̂ = g, v̂ = g^2
    assert p["w"][0] == pytest.approx(1.0 - lr * g / (abs(g) + 1e-8), abs=1e-15)
    # second step with gradient -g
    m = 0.9 * 0.1 * g + 0.1 * (-g)
    v = 0.999 * 0.001 * g * g + 0.001 * g * g
    expected = p["w"][0] - lr * (m / (1 - 0.9**2)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    optimizer_step(p, {"w": np.array([-g])}, state, {"w": lr}, cfg)
    assert p["w"][0] == pytest.approx(expected, abs=1e-15)
    assert state.step == 2 and state.m["w"].shape == (1,)


def test_weight_decay_only_shrinks_geometrically():
    cfg = TrainConfig(weight_decay=0.1)
    p = {"w": np.array([2.0]), "n": np.array([2.0])}
    state = OptimizerState()
    for _ in range(5):
        optimizer_step(p, {}, state, {"w": 0.01, "n": 0.01}, cfg, {"w"})
    assert p["w"][0] == pytest.approx(2.0 * (1 - 0.01 * 0.1) ** 5, abs=1e-15)
    assert p["n"][0] == 2.0


# ---------------------------------------------------------------- step plan


def test_step_count_arithmetic():
    cfg = TrainConfig(epochs=2, batch_size=2, interleave_ratio=(1, 1))
    assert total_steps(10, cfg) == 2 * math.ceil(10 / 2) * 2 == 20
    plan = step_plan(10, cfg)
    assert [k for k, _ in plan[0]] == ["geo", "lang"] * 5
    assert sorted(i for k, b in plan[0] if k == "geo" for i in b) == list(range(10))
    assert total_steps(10, TrainConfig(epochs=1, batch_size=3, interleave_ratio=(2, 1))) == 4 + 2


# ---------------------------------------------------------------- training loop


@pytest.fixture(scope="module")
def train_split(tiny_dataset):
    return tiny_dataset.split("train")


def test_zero_weights_leave_heads_untouched(train_split):
    model = init_model(tiny_model_config(), 0)
    heads = {k: v.values.copy() for k, v in model.params.items() if k.startswith("heads.")}
    lora = model.params["layers.1.attn.q.lora_B"].values.copy()
    train(model, train_split, tiny_train(), LossConfig(lambda_c=0.0, lambda_d=0.0), GRAMMAR)
    for k, v in heads.items():
        np.testing.assert_array_equal(model.params[k].values, v)
    assert not np.array_equal(model.params["layers.1.attn.q.lora_B"].values, lora)


def test_training_is_deterministic(train_split, tmp_path):
    outs = []
    for run in ("a", "b"):
        model = init_model(tiny_model_config(), 7)
        res = train(model, train_split, tiny_train(epochs=2), LossConfig(), GRAMMAR, out_dir=tmp_path / run)
        outs.append(res)
    for name in ("train_log.jsonl", "epoch1.gckpt", "epoch2.gckpt", "final.gckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    log = outs[0].log
    assert len(log) == total_steps(len(train_split), tiny_train(epochs=2))
    assert all(r["grad_norm_postclip"] <= 1.0 + 1e-9 for r in log)
    geo = [r for r in log if r["kind"] == "geo"]
    assert all(r["L_corr"] is not None and len(r["per_layer_corr"]) == 2 for r in geo)
    assert all(r["L_corr"] is None for r in log if r["kind"] == "lang")
    first = json.loads((tmp_path / "a" / "train_log.jsonl").read_text().splitlines()[0])
    for key in ("step", "lr_base", "lr_head", "grad_norm_preclip", "L_LM", "L_corr", "L_depth", "L_total", "per_layer_corr"):
        assert key in first


def test_divergence_reports_last_checkpoint(train_split, tmp_path, monkeypatch):
    model = init_model(tiny_model_config(), 0)

    def trip(entry):
        if entry["epoch"] == 1:
            monkeypatch.setattr(trainer_mod, "DIVERGENCE_LIMIT", -1.0)

    with pytest.raises(DivergedTraining) as e:
        train(model, train_split, tiny_train(epochs=2), LossConfig(), GRAMMAR, out_dir=tmp_path, on_step=trip)
    assert e.value.last_checkpoint == str(tmp_path / "epoch1.gckpt")


def test_divergence_before_any_checkpoint(train_split, monkeypatch):
    monkeypatch.setattr(trainer_mod, "DIVERGENCE_LIMIT", -1.0)
    with pytest.raises(DivergedTraining) as e:
        train(init_model(tiny_model_config(), 0), train_split, tiny_train(), LossConfig(), GRAMMAR)
    assert e.value.last_checkpoint is None and e.value.step == 0


def test_training_rejects_test_split(tiny_dataset):
    with pytest.raises(DatasetLeakage):
        train(init_model(tiny_model_config(), 0), tiny_dataset.split("test"), tiny_train(), LossConfig(), GRAMMAR)


def test_geometric_batch_reaches_query_and_key_lora(train_split):
    model = init_model(tiny_model_config(), 0)
    rec = train_split[0]
    batch = build_correspondence_batch(rec.tracks["12x12"], rec.patch_depths, LossConfig())
    model.zero_grad()
    with de.Tape() as tape:
        trace = model.forward(rec.visual_tokens, None)
        terms = geometric_losses(batch, trace.embeddings, LossConfig())
    tape.backward(terms.corr)
    for l in model.config.head_layers:
        for p in "qk":
            g = model.params[f"layers.{l}.attn.{p}.lora_B"].grad
            assert g is not None and np.abs(g).max() > 1e-12
    model.zero_grad()
    # the instruction string splits into aligned next-token pairs
    inputs, targets = split_next_token(rec.text)
    np.testing.assert_array_equal(inputs[1:], targets[:-1])

from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from geocorr.errors import ConfigError, DatasetLeakage
from geocorr.evaluation import (
    EvalConfig,
    ablation_sweep,
    argmax_match,
    build_tracks,
    calibration_rho,
    chance_level,
    cosine_matrix,
    evaluate,
    format_value,
    lattice_count,
    monte_carlo_chance,
    patch_centers,
    pck,
    qk_similarity,
    random_embedding_control,
    softmax_max,
    temporal_robustness,
    to_rc,
    write_ablation_csv,
)
from geocorr.geometry import pixel_to_patch
from geocorr.model import ForwardTrace, init_model

from conftest import tiny_model_config

TINY_EVAL = EvalConfig(query_grid=(4, 4), delta_t_range=tuple(range(1, 9)), num_sequences=3)


def fake_trace(q, k, heads=1, patches=None):
    n = q.shape[0]
    patches = patches or n
    return ForwardTrace(num_frames=n // patches, patches_per_frame=patches, num_heads=heads, q_visual=[q], k_visual=[k])


# ---------------------------------------------------------------- similarity and matching


def test_self_similarity_diagonal_is_one():
    x = np.random.default_rng(0).standard_normal((16, 8))
    S, zero = qk_similarity(fake_trace(x, x), 1, 0, 0)
    np.testing.assert_allclose(np.diag(S), 1.0, atol=1e-12)
    assert zero == 0 and np.abs(S).max() <= 1.0


def test_identical_heads_average_to_single_head():
    rng = np.random.default_rng(1)
    q1, k1 = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
    multi = fake_trace(np.tile(q1, 4), np.tile(k1, 4), heads=4)
    single = fake_trace(q1, k1, heads=1)
    np.testing.assert_array_equal(qk_similarity(multi, 1, 0, 0)[0], qk_similarity(single, 1, 0, 0)[0])


def test_zero_descriptor_rows_are_flagged():
    x = np.random.default_rng(2).standard_normal((6, 4))
    x[2] = 0.0
    S, zero = cosine_matrix(x, x)
    assert zero == 2 and not S[2].any() and not S[:, 2].any()


def test_argmax_identity_and_tie_rule():
    assert argmax_match(np.eye(5), range(5)).tolist() == list(range(5))
    S = np.zeros((1, 10))
    S[0, [3, 7]] = 0.9
    assert argmax_match(S, [0])[0] == 3


def test_argmax_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        S = rng.integers(0, 4, (3, 9)).astype(float)  # small alphabet forces ties
        pred = argmax_match(S, [0, 1, 2])
        for i in range(3):
            best, arg = -np.inf, -1
            for j in range(9):
                if S[i, j] > best:
                    best, arg = S[i, j], j
            assert pred[i] == arg


def test_patch_centers_and_tracks():
    assert patch_centers(0, (16, 16), (256, 256)).tolist() == [8.0, 8.0]
    assert patch_centers(17, (16, 16), (64, 64)).tolist() == [6.0, 6.0]
    tracks = build_tracks(np.array([[0, 5], [1, 6], [2, 7]]), (16, 16), (64, 64))
    assert tracks.shape == (2, 3, 2)
    rng = np.random.default_rng(4)
    for uv in rng.uniform(0, 64, (200, 2)):
        c = patch_centers(pixel_to_patch(uv, (64, 64), (16, 16)), (16, 16), (64, 64))
        assert np.abs(c - uv).max() <= 2.0


# ---------------------------------------------------------------- PCK, chance, calibration, Y


def test_pck_examples():
    gt = to_rc(np.arange(50, 70), (16, 16))
    assert pck(gt, gt, 2.0)[0] == 1.0
    assert pck(gt + [0, 3], gt, 2.0)[0] == 0.0
    val, flags = pck([[0, 0], [2, 0], [1, 2]], [[0, 0], [0, 0], [0, 0]], 2.0)
    assert flags.tolist() == [True, True, False] and val == pytest.approx(2 / 3)
    assert math.isnan(pck(np.zeros((0, 2)), np.zeros((0, 2)), 2.0)[0])


def test_chance_level_closed_form_and_monte_carlo():
    assert lattice_count(2.0) == 13 and lattice_count(1.0) == 5
    assert chance_level((16, 16), 2.0) == 13 / 256
    draws = 10000
    p = 13 / 256
    est = monte_carlo_chance((16, 16), 2.0, draws, seed=0)
    assert abs(est - p) <= 3 * math.sqrt(p * (1 - p) / draws)
    assert abs(est - p) <= 0.02


def test_calibration_rho_examples():
    y = np.array([1, 0, 1, 1, 0, 0, 1], dtype=bool)
    assert calibration_rho(y.astype(float), y).rho == pytest.approx(1.0, abs=1e-12)
    assert calibration_rho(1.0 - y, y).rho == pytest.approx(-1.0, abs=1e-12)
    flat = calibration_rho(np.full(7, 0.3), y)
    assert not flat.defined and math.isnan(flat.rho)
    assert not calibration_rho([0.1, 0.2], [True, True]).defined
    rng = np.random.default_rng(5)
    c, yy = rng.random(50), rng.random(50) > 0.5
    assert calibration_rho(c, yy).rho == pytest.approx(np.corrcoef(c, yy)[0, 1], abs=1e-12)


def test_temporal_robustness_examples():
    flat, ok = temporal_robustness({d: 0.4 for d in range(1, 25)})
    assert ok and len(flat) == 24 and all(v == 1.0 for v in flat.values())
    curve, _ = temporal_robustness({1: 0.6, 8: 0.3})
    assert curve[1] == 1.0 and curve[8] == 0.5
    _, ok = temporal_robustness({1: 0.0, 2: 0.1})
    assert not ok


def test_softmax_max():
    s = np.array([[0.0, 0.0, 0.0, 0.0], [1.0, 0.0, -1.0, 0.5]])
    out = softmax_max(s, 2.0)
    assert out[0] == pytest.approx(0.25)
    e = np.exp(2 * s[1])
    assert out[1] == pytest.approx(e.max() / e.sum())


@pytest.mark.parametrize("kw", [dict(pck_threshold=0.0), dict(delta_t_range=()), dict(delta_t_range=(0, 1)), dict(confidence_source="x")])
def test_eval_config_validation(kw):
    with pytest.raises(ConfigError):
        EvalConfig(**kw)


# ---------------------------------------------------------------- end to end on the tiny dataset


@pytest.fixture(scope="module")
def tiny_report(tiny_dataset):
    return evaluate(init_model(tiny_model_config(), 0), tiny_dataset.split("test"), TINY_EVAL)


def test_evaluate_report_invariants(tiny_report):
    rep = tiny_report
    assert rep.chance == 13 / 64
    assert [s.layer for s in rep.qk.layers] == [1, 2]
    assert [s.layer for s in rep.head.layers] == [1, 2]
    for src in (rep.qk, rep.head):
        for s in src.layers:
            assert 0.0 <= s.pck_mean <= 1.0
            assert s.pck_at["1.0"] <= s.pck_at["2.0"] <= s.pck_at["3.0"]
            assert not s.rho_defined or -1.0 <= s.rho <= 1.0
        if src.y_defined:
            assert src.y_curve[1] == 1.0


def test_evaluate_writes_reports(tiny_report, tmp_path):
    paths = tiny_report.write(tmp_path)
    data = json.loads(paths[0].read_text())
    assert data["chance_pck"] == 13 / 64
    rows = list(csv.DictReader(paths[1].open()))
    assert {r["source"] for r in rows} == {"qk", "head"}
    dts = [r for r in csv.DictReader(paths[2].open()) if r["source"] == "qk"]
    assert [int(r["delta_t"]) for r in dts] == list(range(1, 9))


def test_evaluate_rejects_train_split(tiny_dataset):
    with pytest.raises(DatasetLeakage):
        evaluate(init_model(tiny_model_config(), 0), tiny_dataset.split("train"), TINY_EVAL)


def test_qk_descriptors_ignore_language(tiny_dataset):
    model = init_model(tiny_model_config(), 0)
    rec = tiny_dataset.split("test")[0]
    a = model.forward(rec.visual_tokens, None)
    b = model.forward(rec.visual_tokens, rec.text[:6])
    for l in (1, 2):
        np.testing.assert_allclose(qk_similarity(a, l, 0, 2)[0], qk_similarity(b, l, 0, 2)[0], atol=1e-12)


def test_random_embedding_control_runs(tiny_dataset):
    src = random_embedding_control(tiny_dataset.split("test"), TINY_EVAL, emb_dim=8, seed=0)
    assert [s.layer for s in src.layers] == [0]
    assert src.layers[0].num_predictions > 0


def test_ablation_sweep_rows_and_determinism(tiny_dataset, tmp_path):
    def fake_train(value):
        cfg = tiny_model_config(lora_rank=value)
        return init_model(cfg, 0), [{"L_corr": None}, {"L_corr": 1.5 + value}]

    test = tiny_dataset.split("test")
    rows = ablation_sweep("lora_rank", [2, 4, 8], fake_train, test, TINY_EVAL)
    again = ablation_sweep("lora_rank", [2, 4, 8], fake_train, test, TINY_EVAL)
    assert len(rows) == 3 and rows == again
    assert rows[1].final_l_corr == 5.5
    path = write_ablation_csv(rows, tmp_path / "a.csv", "lora_rank")
    assert path.read_text().splitlines()[0] == "lora_rank,avg_pck,final_l_corr"
    with pytest.raises(ConfigError):
        ablation_sweep("depth", [1], fake_train, test, TINY_EVAL)
    assert format_value((1, 2, 3, 4)) == "1-4" and format_value((4,)) == "4" and format_value((1, 4)) == "1,4"

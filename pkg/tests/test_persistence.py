from __future__ import annotations

import json

import numpy as np
import pytest

from geocorr.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from geocorr.data import (
    DataConfig,
    Dataset,
    build_dataset,
    decode_record,
    encode_record,
    generate_sequence,
    read_dataset,
    read_manifest,
    write_dataset,
)
from geocorr.errors import ConfigMismatch, CorruptCheckpoint, CorruptDataset, DatasetLeakage
from geocorr.language import Grammar, split_next_token
from geocorr.model import init_model

from conftest import tiny_data_config, tiny_model_config

# ---------------------------------------------------------------- datasets


def test_dataset_round_trip_is_byte_identical(tiny_dataset, tmp_path):
    write_dataset(tiny_dataset, tmp_path / "a")
    back = read_dataset(tmp_path / "a")
    write_dataset(back, tmp_path / "b")
    for name in ("manifest.json", "records.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert back.config == tiny_dataset.config
    r0, r1 = tiny_dataset.records[0], back.records[0]
    np.testing.assert_array_equal(r0.tokens, r1.tokens)
    np.testing.assert_array_equal(r0.tracks["12x12"].uv, r1.tracks["12x12"].uv)
    np.testing.assert_array_equal(r0.text, r1.text)


def test_dataset_generation_is_deterministic(tmp_path):
    cfg = tiny_data_config(num_train=2, num_test=1, seed=3)
    write_dataset(build_dataset(cfg), tmp_path / "a")
    write_dataset(build_dataset(cfg), tmp_path / "b")
    assert (tmp_path / "a" / "records.bin").read_bytes() == (tmp_path / "b" / "records.bin").read_bytes()
    other = build_dataset(tiny_data_config(num_train=2, num_test=1, seed=4))
    assert encode_record(other.records[0]) != (tmp_path / "a" / "records.bin").read_bytes()[: len(encode_record(other.records[0]))]


def test_splits_are_disjoint_and_filterable(tiny_dataset, tmp_path):
    assert {r.split for r in tiny_dataset.split("train")} == {"train"}
    ids_train = {r.id for r in tiny_dataset.split("train")}
    ids_test = {r.id for r in tiny_dataset.split("test")}
    assert not ids_train & ids_test
    write_dataset(tiny_dataset, tmp_path)
    only_test = read_dataset(tmp_path, splits=("test",))
    assert {r.split for r in only_test.records} == {"test"}


def test_record_contents(tiny_dataset):
    rec = tiny_dataset.records[0]
    assert rec.num_frames == 4 and rec.patch_grid == (8, 8) and rec.image_size == (32, 32)
    assert rec.visual_tokens.shape == (4, 64, 16)
    assert set(rec.tracks) == {"12x12", "4x4"}
    assert (np.diff(rec.frame_times) > 0).all()
    assert rec.frame_times[-1] - rec.frame_times[0] <= 8
    assert len(rec.frames()) == 4
    assert rec.text[0] == 0 and rec.text.max() < 16
    back = decode_record(encode_record(rec), rec.id, rec.split, rec.seed)
    assert encode_record(back) == encode_record(rec)


def test_leaky_manifest_is_rejected(tiny_dataset, tmp_path):
    write_dataset(tiny_dataset, tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["sequences"][-1]["id"] = m["sequences"][0]["id"]
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetLeakage):
        read_manifest(tmp_path)
    dup = Dataset(tiny_dataset.config, [tiny_dataset.records[0], generate_sequence(tiny_dataset.config, 0, "test")])
    with pytest.raises(DatasetLeakage):
        write_dataset(dup, tmp_path / "dup")


def test_corrupt_dataset_detected(tiny_dataset, tmp_path):
    write_dataset(tiny_dataset, tmp_path)
    raw = bytearray((tmp_path / "records.bin").read_bytes())
    raw[100] ^= 0xFF
    (tmp_path / "records.bin").write_bytes(bytes(raw))
    with pytest.raises(CorruptDataset):
        read_dataset(tmp_path)
    with pytest.raises(CorruptDataset):
        read_dataset(tmp_path / "missing")


def test_data_config_round_trip():
    cfg = tiny_data_config()
    assert DataConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_grammar_is_seeded():
    g = Grammar(vocab_size=16, length=8)
    a, b = g.sample(5), g.sample(5)
    np.testing.assert_array_equal(a, b)
    assert len(a) == 8 and a[0] == 0
    inputs, targets = split_next_token(a)
    np.testing.assert_array_equal(inputs, a[:-1])
    np.testing.assert_array_equal(targets, a[1:])


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    model = init_model(tiny_model_config(), 2)
    p1 = save_checkpoint(model, tmp_path / "a.gckpt", {"epoch": 1})
    loaded, meta = load_checkpoint(p1, tiny_model_config())
    assert meta == {"epoch": 1}
    p2 = save_checkpoint(loaded, tmp_path / "b.gckpt", meta)
    assert p1.read_bytes() == p2.read_bytes()
    for k in model.params:
        np.testing.assert_array_equal(model.params[k].values, loaded.params[k].values)
        assert model.params[k].requires_grad == loaded.params[k].requires_grad


def test_checkpoint_corruption_detected():
    buf = bytearray(encode_checkpoint(init_model(tiny_model_config(), 0)))
    for mutate in (lambda b: b.__setitem__(0, 0), lambda b: b.__setitem__(len(b) // 2, b[len(b) // 2] ^ 1)):
        bad = bytearray(buf)
        mutate(bad)
        with pytest.raises(CorruptCheckpoint):
            decode_checkpoint(bytes(bad))
    with pytest.raises(CorruptCheckpoint):
        decode_checkpoint(bytes(buf[:20]))


def test_checkpoint_config_mismatch(tmp_path):
    p = save_checkpoint(init_model(tiny_model_config(), 0), tmp_path / "m.gckpt")
    with pytest.raises(ConfigMismatch):
        load_checkpoint(p, tiny_model_config(lora_rank=2))
    with pytest.raises(ConfigMismatch):
        load_checkpoint(p, tiny_model_config(lora_alpha=8.0))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "nope.gckpt")

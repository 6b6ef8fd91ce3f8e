from __future__ import annotations

import json

import pytest
import yaml

from geocorr.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main
from geocorr.config import Paths, RunConfig, dump_config, load_config, parse_layers
from geocorr.errors import ConfigError
from geocorr.evaluation import EvalConfig
from geocorr.trainer import TrainConfig

from conftest import tiny_data_config, tiny_model_config


@pytest.fixture(scope="module")
def tiny_config_file(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = RunConfig(
        seed=0,
        data=tiny_data_config(num_train=2, num_test=2),
        model=tiny_model_config(),
        train=TrainConfig(epochs=1, fine_grid="12x12"),
        eval=EvalConfig(query_grid=(4, 4), delta_t_range=tuple(range(1, 9))),
        paths=Paths(str(root / "data"), str(root / "runs"), str(root / "reports")),
    )
    path = root / "tiny.yaml"
    path.write_text(dump_config(cfg))
    return path, root


def test_config_file_round_trip(tiny_config_file):
    path, _ = tiny_config_file
    cfg = load_config(path)
    # data-tied model fields are re-derived from the data section on load
    mcfg = cfg.model_config()
    assert mcfg == tiny_model_config(max_text_len=mcfg.max_text_len)
    assert mcfg.max_text_len >= cfg.data.grammar.length - 1
    again = path.with_name("again.yaml")
    again.write_text(dump_config(cfg))
    assert dump_config(load_config(again)) == again.read_text()


def test_precedence_defaults_file_flags(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"seed": 5, "train": {"epochs": 7, "peak_lr": 0.01}}))
    assert main(["config", "--config", str(path), "--epochs", "2"]) == EXIT_OK
    out = yaml.safe_load(capsys.readouterr().out)
    assert out["train"]["epochs"] == 2  # flag beats file
    assert out["train"]["peak_lr"] == 0.01  # file beats default
    assert out["train"]["batch_size"] == 2  # default
    assert out["seed"] == out["data"]["seed"] == out["train"]["seed"] == 5


def test_unknown_config_key_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("train: {epocs: 3}\n")
    assert main(["config", "--config", str(path)]) == EXIT_VALIDATION
    assert "epocs" in capsys.readouterr().err
    assert main(["config", "--config", str(tmp_path / "missing.yaml")]) == EXIT_VALIDATION


def test_parse_layers():
    assert parse_layers("22-28") == tuple(range(22, 29))
    assert parse_layers("1,4") == (1, 4)
    for bad in ("", "4-2", "a"):
        with pytest.raises(ConfigError):
            parse_layers(bad)


def test_end_to_end_datagen_train_eval(tiny_config_file, capsys):
    path, root = tiny_config_file
    c = ["--config", str(path)]
    assert main(["datagen", *c]) == EXIT_OK
    assert (root / "data" / "manifest.json").exists()
    assert main(["train", *c]) == EXIT_OK
    ckpt = root / "runs" / "final.gckpt"
    assert ckpt.exists() and (root / "runs" / "train_log.jsonl").exists()
    assert main(["eval", *c, "--checkpoint", str(ckpt)]) == EXIT_OK
    report = json.loads((root / "reports" / "report.json").read_text())
    assert report["num_sequences"] == 2
    assert main(["eval", *c, "--untrained", "--out", str(root / "untrained")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "chance PCK=0.2031" in out
    # eval without a model source is a validation failure
    assert main(["eval", *c]) == EXIT_VALIDATION


def test_eval_rejects_mismatched_checkpoint(tiny_config_file, tmp_path):
    path, root = tiny_config_file
    assert main(["eval", "--config", str(path), "--checkpoint", str(tmp_path / "none.gckpt")]) == EXIT_VALIDATION


def test_ablate_lora_rank(tiny_config_file, capsys):
    path, root = tiny_config_file
    if not (root / "data" / "manifest.json").exists():
        assert main(["datagen", "--config", str(path)]) == EXIT_OK
    out_dir = root / "ablate"
    assert main(["ablate", "--config", str(path), "--axis", "lora_rank", "--values", "2", "4", "--out", str(out_dir)]) == EXIT_OK
    lines = (out_dir / "ablation_lora_rank.csv").read_text().splitlines()
    assert lines[0] == "lora_rank,avg_pck,final_l_corr" and len(lines) == 3


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--loss", "depth"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--loss", "depth", "--wrong-sign"]) == EXIT_NUMERICAL
    assert "FAIL" in capsys.readouterr().out

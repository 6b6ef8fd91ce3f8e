"""Run configuration: one YAML file, defaults for every field, flags on top.

Schema (all sections optional)::

    seed: 0                  # global seed; overrides data.seed and train.seed
    data:  {num_train, num_test, clip_length, fine_grid, coarse_grid,
            scene: {...}, render: {...}, policy: {...}, grammar: {...}}
    model: {num_layers, hidden_dim, num_heads, emb_dim, lora_rank, lora_alpha,
            head_layers, mlp_ratio, head_hidden}
    loss:  {temperature, lambda_c, lambda_d, eps, negatives_policy,
            min_visible_frames, max_anchors}
    train: {peak_lr, warmup_frac, epochs, batch_size, clip_norm, betas,
            weight_decay, adam_eps, head_lr_mult, interleave_ratio,
            language_batch_size, lora_rank, head_layers, attention_dtype}
    eval:  {pck_threshold, query_grid, delta_t_range, num_sequences,
            head_average, confidence_source, head_temperature}
    paths: {data_dir, checkpoint_dir, report_dir}

Model fields tied to the data (feature_dim, patches_per_frame, max_frames,
vocab_size, max_text_len) are derived from the data section.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .data import DataConfig
from .errors import ConfigError
from .evaluation import EvalConfig
from .losses import LossConfig
from .model import ModelConfig
from .trainer import TrainConfig, apply_overrides

_DERIVED_MODEL = ("feature_dim", "patches_per_frame", "max_frames", "vocab_size", "max_text_len")


@dataclass(frozen=True)
class Paths:
    data_dir: str = "data"
    checkpoint_dir: str = "runs"
    report_dir: str = "reports"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: Paths = field(default_factory=Paths)

    def model_config(self) -> ModelConfig:
        """Model config with data-tied fields derived and trainer overrides applied."""
        d = self.data
        derived = replace(
            self.model,
            feature_dim=d.scene.feature_dim,
            patches_per_frame=d.render.patch_grid[0] * d.render.patch_grid[1],
            max_frames=d.policy.seq_len_range[1],
            vocab_size=d.grammar.vocab_size,
            max_text_len=max(self.model.max_text_len, d.grammar.length - 1),
        )
        return apply_overrides(derived, self.train)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "loss": asdict(self.loss),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
            "paths": asdict(self.paths),
        }


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = dict(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(v, dict) and isinstance(base[k], dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def from_dict(d: dict) -> RunConfig:
    """Build a RunConfig from a (possibly partial) nested dict over the defaults."""
    merged = _merge(RunConfig().to_dict(), d or {})
    seed = int(merged["seed"])
    merged["data"]["seed"] = seed
    merged["train"]["seed"] = seed
    model = {k: v for k, v in merged["model"].items() if k not in _DERIVED_MODEL}
    try:
        return RunConfig(
            seed=seed,
            data=DataConfig.from_dict(merged["data"]),
            model=ModelConfig.from_dict({**ModelConfig().to_dict(), **model}),
            loss=LossConfig(**merged["loss"]),
            train=TrainConfig.from_dict(merged["train"]),
            eval=EvalConfig.from_dict(merged["eval"]),
            paths=Paths(**merged["paths"]),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the YAML file at ``path``, then ``overrides`` (nested dict)."""
    d: dict = {}
    if path is not None:
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config file is not valid YAML: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a mapping")
    if overrides:
        d = _deep_update(d, overrides)
    return from_dict(d)


def _deep_update(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=False)


def parse_layers(spec: str) -> tuple[int, ...]:
    """``"22-28"`` -> (22, ..., 28); ``"1,3,4"`` -> (1, 3, 4); ``"all"`` is rejected here."""
    out: list[int] = []
    try:
        for part in spec.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                if hi < lo:
                    raise ValueError
                out.extend(range(lo, hi + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise ConfigError(f"bad layer spec {spec!r}") from None
    if not out:
        raise ConfigError(f"bad layer spec {spec!r}")
    return tuple(sorted(set(out)))

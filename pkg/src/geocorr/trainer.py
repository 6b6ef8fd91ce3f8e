"""AdamW training loop with warmup-cosine schedule, clipping and checkpoints.

Geometric steps draw ``batch_size`` sequences and optimise
``L_LM + lambda_c * L_corr + lambda_d * L_depth``, where ``L_LM`` is taken on
the sequence's instruction string. Language steps optimise ``L_LM`` alone on
freshly sampled grammar strings. Each sequence in a batch runs its own
forward/backward and gradients accumulate, which keeps one attention map in
memory at a time.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffengine as de
from .checkpoint import save_checkpoint
from .data import SequenceRecord
from .errors import ConfigError, DatasetLeakage, DivergedTraining, EmptyBatch, NonFiniteGradient, NonFiniteLoss
from .language import Grammar, split_next_token
from .losses import LossConfig, build_correspondence_batch, geometric_losses, surrogate_lm_loss, total_loss
from .model import ModelConfig, ParamGroup, ToyModel, trainable_parameters

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e4


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 3e-3
    warmup_frac: float = 0.1
    epochs: int = 3
    batch_size: int = 2
    clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    head_lr_mult: float = 4.0
    seed: int = 0
    interleave_ratio: tuple[int, int] = (1, 1)  # geometric : language steps
    language_batch_size: int = 2
    lora_rank: int | None = None  # overrides ModelConfig.lora_rank when set
    head_layers: tuple[int, ...] | None = None  # overrides ModelConfig.head_layers when set
    fine_grid: str = "24x24"  # track set used for training anchors
    attention_dtype: str = "float32"

    def __post_init__(self):
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("warmup_frac must lie in [0, 1)")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if not self.peak_lr > 0:
            raise ConfigError("peak_lr must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.language_batch_size < 1:
            raise ConfigError("epochs and batch sizes must be >= 1")
        g, l = self.interleave_ratio
        if g < 1 or l < 0:
            raise ConfigError("interleave_ratio needs >= 1 geometric and >= 0 language steps")
        if self.attention_dtype not in ("float32", "float64"):
            raise ConfigError("attention_dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("betas", "interleave_ratio", "head_layers"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def apply_overrides(model_cfg: ModelConfig, cfg: TrainConfig) -> ModelConfig:
    """Model config with the trainer's ``lora_rank``/``head_layers`` overrides applied."""
    changes = {}
    if cfg.lora_rank is not None:
        changes["lora_rank"] = cfg.lora_rank
    if cfg.head_layers is not None:
        changes["head_layers"] = tuple(cfg.head_layers)
    return replace(model_cfg, **changes) if changes else model_cfg


# ---------------------------------------------------------------- schedule, clipping, AdamW


def lr_at(step: float, total_steps: int, cfg: TrainConfig, group_mult: float = 1.0) -> float:
    """Linear warmup to ``peak_lr`` over ``warmup_frac * total_steps``, then cosine to 0."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    step = min(max(step, 0), total_steps)
    warm = cfg.warmup_frac * total_steps
    if step < warm:
        frac = step / warm
    else:
        span = total_steps - warm
        frac = 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span)) if span > 0 else 0.0
    return cfg.peak_lr * frac * group_mult


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by ``clip_norm / norm`` when the global norm exceeds ``clip_norm``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    norm = global_norm(grads)
    if norm <= clip_norm:
        return dict(grads), norm
    s = clip_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lrs: dict[str, float],
    cfg: TrainConfig,
    decay: set[str] | frozenset[str] = frozenset(),
) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay.

    ``lrs`` maps each parameter to its learning rate; parameters in ``decay``
    are shrunk by ``1 - lr * weight_decay`` before the Adam step. Missing
    gradients count as zero.
    """
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        lr = lrs[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if name in decay and cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------- step plan


def step_plan(num_sequences: int, cfg: TrainConfig) -> list[list[tuple[str, object]]]:
    """Per epoch, the ordered list of ``("geo", [seq idx...])`` / ``("lang", k)`` steps."""
    if num_sequences < 1:
        raise EmptyBatch("no training sequences")
    g, l = cfg.interleave_ratio
    plan = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 101, epoch]).permutation(num_sequences)
        batches = [order[i : i + cfg.batch_size].tolist() for i in range(0, num_sequences, cfg.batch_size)]
        steps: list[tuple[str, object]] = []
        lang_k = 0
        for i, b in enumerate(batches):
            steps.append(("geo", b))
            if (i + 1) % g == 0 or i == len(batches) - 1:
                for _ in range(l):
                    steps.append(("lang", lang_k))
                    lang_k += 1
        plan.append(steps)
    return plan


def total_steps(num_sequences: int, cfg: TrainConfig) -> int:
    return sum(len(e) for e in step_plan(num_sequences, cfg))


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: ToyModel
    log: list[dict]
    checkpoints: list[str]
    state: OptimizerState


def _grads(groups: dict[str, ParamGroup]) -> dict[str, np.ndarray]:
    return {n: t.grad for g in groups.values() for n, t in g.params.items() if t.grad is not None}


def _geo_sequence_loss(model, rec, loss_cfg, cfg, batch_seed, weight):
    """Forward/backward one sequence; returns its LossReport."""
    inputs, targets = split_next_token(rec.text)
    need_geo = bool(loss_cfg.lambda_c or loss_cfg.lambda_d)
    with de.Tape() as tape:
        trace = model.forward(rec.visual_tokens, inputs, with_heads=need_geo)
        l_lm = surrogate_lm_loss(trace.logits, targets)
        if need_geo:
            batch = build_correspondence_batch(rec.tracks[cfg.fine_grid], rec.patch_depths, loss_cfg, batch_seed)
            terms = geometric_losses(batch, trace.embeddings, loss_cfg)
            l_c, l_d = terms.corr, terms.depth
        else:
            terms, l_c, l_d = None, 0.0, 0.0
        total, report = total_loss(l_lm, l_c, l_d, loss_cfg)
        if terms is not None:
            report.per_layer_corr = terms.per_layer_corr
            report.per_layer_depth = terms.per_layer_depth
        if report.L_total > DIVERGENCE_LIMIT:
            return report
        tape.backward(total * weight)
    return report


def _lang_loss(model, grammar, seed, weight) -> float:
    inputs, targets = split_next_token(grammar.sample(seed))
    with de.Tape() as tape:
        trace = model.forward(None, inputs)
        loss = surrogate_lm_loss(trace.logits, targets)
        if not math.isfinite(loss.item()):
            raise NonFiniteLoss("L_LM", loss.item())
        tape.backward(loss * weight)
    return loss.item()


def _mean_dict(dicts: list[dict[int, float]]) -> list[float]:
    if not dicts or not dicts[0]:
        return []
    keys = sorted(dicts[0])
    return [float(np.mean([d[k] for d in dicts])) for k in keys]


def train(
    model: ToyModel,
    sequences: list[SequenceRecord],
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    grammar: Grammar | None = None,
    out_dir=None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train ``model`` in place on ``sequences`` (train split only).

    With ``out_dir`` set, writes ``train_log.jsonl`` plus a checkpoint per
    epoch and ``final.gckpt``.
    """
    if not sequences:
        raise EmptyBatch("no training sequences")
    if any(r.split != "train" for r in sequences):
        raise DatasetLeakage("training received sequences outside the train split")
    grammar = grammar or Grammar(vocab_size=model.config.vocab_size)
    groups = trainable_parameters(model, cfg.head_lr_mult)
    params = {n: t.values for g in groups.values() for n, t in g.params.items()}
    decay = set().union(*(g.decay for g in groups.values()))
    mult = {n: g.lr_mult for g in groups.values() for n in g.params}
    plan = step_plan(len(sequences), cfg)
    n_total = sum(len(e) for e in plan)
    state = OptimizerState()
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")
    records: list[dict] = []
    ckpts: list[str] = []
    last_ckpt = None
    step = 0
    try:
        with de.attention_precision(np.dtype(cfg.attention_dtype)):
            for epoch, steps in enumerate(plan):
                for kind, arg in steps:
                    model.zero_grad()
                    if kind == "geo":
                        reports = []
                        for idx in arg:
                            rec = sequences[idx]
                            seed = [cfg.seed, 202, epoch, rec.id]
                            try:
                                rep = _geo_sequence_loss(model, rec, loss_cfg, cfg, seed, 1.0 / len(arg))
                            except NonFiniteLoss as e:
                                raise DivergedTraining(step, float("nan"), last_ckpt) from e
                            if rep.L_total > DIVERGENCE_LIMIT:
                                raise DivergedTraining(step, rep.L_total, last_ckpt)
                            reports.append(rep)
                        rec_log = {
                            "L_LM": float(np.mean([r.L_LM for r in reports])),
                            "L_corr": float(np.mean([r.L_corr for r in reports])),
                            "L_depth": float(np.mean([r.L_depth for r in reports])),
                            "per_layer_corr": _mean_dict([r.per_layer_corr for r in reports]),
                            "per_layer_depth": _mean_dict([r.per_layer_depth for r in reports]),
                        }
                        rec_log["L_total"] = float(np.mean([r.L_total for r in reports]))
                    else:
                        n = cfg.language_batch_size
                        try:
                            vals = [_lang_loss(model, grammar, [cfg.seed, 303, epoch, arg, j], 1.0 / n) for j in range(n)]
                        except NonFiniteLoss as e:
                            raise DivergedTraining(step, float("nan"), last_ckpt) from e
                        lm = float(np.mean(vals))
                        if lm > DIVERGENCE_LIMIT:
                            raise DivergedTraining(step, lm, last_ckpt)
                        rec_log = {
                            "L_LM": lm,
                            "L_corr": None,
                            "L_depth": None,
                            "per_layer_corr": [],
                            "per_layer_depth": [],
                            "L_total": lm,
                        }
                    grads, pre = clip_gradients(_grads(groups), cfg.clip_norm)
                    base_lr = lr_at(step + 1, n_total, cfg)
                    lrs = {n: base_lr * mult[n] for n in params}
                    optimizer_step(params, grads, state, lrs, cfg, decay)
                    entry = {
                        "step": step,
                        "epoch": epoch,
                        "kind": kind,
                        "lr_base": base_lr,
                        "lr_head": base_lr * cfg.head_lr_mult,
                        "grad_norm_preclip": pre,
                        "grad_norm_postclip": global_norm(grads),
                        **rec_log,
                    }
                    records.append(entry)
                    if log_fh is not None:
                        log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                        log_fh.flush()
                    if on_step is not None:
                        on_step(entry)
                    step += 1
                if out is not None:
                    last_ckpt = str(save_checkpoint(model, out / f"epoch{epoch + 1}.gckpt", {"epoch": epoch + 1, "step": step}))
                    ckpts.append(last_ckpt)
                log.info("epoch %d done at step %d", epoch + 1, step)
        if out is not None:
            last_ckpt = str(save_checkpoint(model, out / "final.gckpt", {"epoch": cfg.epochs, "step": step}))
            ckpts.append(last_ckpt)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.zero_grad()
    return TrainResult(model, records, ckpts, state)

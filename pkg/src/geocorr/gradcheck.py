"""Finite-difference verification of every loss term on a micro model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffengine as de
from .diffengine import GradCheckReport, Tensor
from .errors import ConfigError
from .losses import CorrespondenceBatch, LossConfig, geometric_losses, similarity_logits, surrogate_lm_loss, total_loss
from .model import ModelConfig, ToyModel, init_model

LOSS_NAMES = ("corr", "depth", "lm", "total")
TOLERANCE = 1e-4


def micro_config() -> ModelConfig:
    return ModelConfig(
        num_layers=2,
        hidden_dim=16,
        num_heads=2,
        emb_dim=4,
        lora_rank=2,
        lora_alpha=4.0,
        head_layers=(1, 2),
        vocab_size=8,
        max_frames=3,
        patches_per_frame=16,
        feature_dim=8,
        max_text_len=6,
    )


@dataclass
class MicroProblem:
    model: ToyModel
    tokens: np.ndarray
    text_in: np.ndarray
    text_out: np.ndarray
    batch: CorrespondenceBatch
    loss_cfg: LossConfig


def micro_problem(seed: int = 0) -> MicroProblem:
    """Micro model with nonzero LoRA ``B`` plus a random correspondence batch."""
    cfg = micro_config()
    model = init_model(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    for name, t in model.params.items():
        if name.endswith("lora_B"):
            t.values[...] = 0.1 * rng.standard_normal(t.shape)
    F, Np = cfg.max_frames, cfg.patches_per_frame
    tokens = rng.standard_normal((F, Np, cfg.feature_dim)) / np.sqrt(cfg.feature_dim)
    text = rng.integers(0, cfg.vocab_size, cfg.max_text_len)
    n = 10
    a = rng.integers(0, F, n)
    b = (a + rng.integers(1, F, n)) % F
    anchor_rows = a * Np + rng.integers(0, Np, n)
    positive_rows = b * Np + rng.integers(0, Np, n)
    mask = np.ones((n, F * Np), dtype=bool)
    mask[np.arange(n), anchor_rows] = False
    depth = rng.uniform(1.0, 5.0, (n, Np))
    valid_c = rng.random((n, Np)) > 0.2
    batch = CorrespondenceBatch(
        anchor_rows=anchor_rows,
        positive_rows=positive_rows,
        candidate_mask=mask,
        target_rows=b[:, None] * Np + np.arange(Np)[None, :],
        candidate_depth=depth,
        candidate_valid=valid_c,
        gt_depth=rng.uniform(1.0, 5.0, n),
        valid=np.ones(n, dtype=bool),
        num_rows=F * Np,
    )
    # a moderate temperature keeps the soft matching away from saturation
    return MicroProblem(model, tokens, text[:-1], text[1:], batch, LossConfig(temperature=0.5))


def loss_fn(problem: MicroProblem, which: str) -> Callable[[], Tensor]:
    if which not in LOSS_NAMES:
        raise ConfigError(f"unknown loss {which!r}; choose from {LOSS_NAMES}")
    p = problem

    def f() -> Tensor:
        trace = p.model.forward(p.tokens, p.text_in)
        if which == "lm":
            return surrogate_lm_loss(trace.logits, p.text_out)
        terms = geometric_losses(p.batch, trace.embeddings, p.loss_cfg)
        if which == "corr":
            return terms.corr
        if which == "depth":
            return terms.depth
        return total_loss(surrogate_lm_loss(trace.logits, p.text_out), terms.corr, terms.depth, p.loss_cfg)[0]

    return f


def wrong_sign_hook(name: str, grad: np.ndarray) -> np.ndarray:
    """Negative control: flips every analytic gradient."""
    return -grad


def closed_form_check(seed: int = 0, tau: float = 0.07) -> float:
    """Max absolute gap between the analytic single-anchor InfoNCE gradient and autodiff."""
    rng = np.random.default_rng([seed, 2])
    anchor = rng.standard_normal(6)
    cands = rng.standard_normal((7, 6))
    positive = 2
    e = Tensor(anchor[None, :], requires_grad=True)
    c = de.l2_normalize(Tensor(cands))
    with de.Tape() as tape:
        logits = similarity_logits(de.l2_normalize(e), c, tau)
        loss = -de.mean(de.take_along_rows(de.log_softmax(logits), np.array([[positive]])))
    tape.backward(loss)
    oracle = de.closed_form_infonce_grad(anchor, cands, positive, tau)
    return float(np.abs(oracle - e.grad[0]).max())


@dataclass
class GradCheckResult:
    reports: dict[str, GradCheckReport]
    closed_form_gap: float | None
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        ok = all(r.passed(self.tolerance) for r in self.reports.values())
        return ok and (self.closed_form_gap is None or self.closed_form_gap < 1e-8)


def run_gradcheck(
    losses=LOSS_NAMES,
    seed: int = 0,
    sample_size: int = 24,
    h: float = 1e-5,
    analytic_hook=None,
    include_closed_form: bool = True,
) -> GradCheckResult:
    """Finite-difference check of the selected losses against all trainable parameters."""
    problem = micro_problem(seed)
    params = {n: t for n, t in problem.model.params.items() if t.requires_grad}
    reports = {}
    with de.attention_precision(np.float64):
        for which in losses:
            reports[which] = de.finite_diff_check(
                loss_fn(problem, which), params, h=h, sample_size=sample_size, seed=seed, analytic_hook=analytic_hook
            )
    gap = closed_form_check(seed) if include_closed_form else None
    return GradCheckResult(reports, gap)

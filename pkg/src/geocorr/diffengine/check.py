"""Finite-difference gradient checking and closed-form gradient oracles."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..errors import InvalidTemperature
from .core import Tape, Tensor

REL_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    per_param: dict[str, tuple[float, float]] = field(default_factory=dict)  # name -> (max, mean)

    @property
    def max_rel_error(self) -> float:
        return max((m for m, _ in self.per_param.values()), default=0.0)

    @property
    def mean_rel_error(self) -> float:
        vals = [m for _, m in self.per_param.values()]
        return float(np.mean(vals)) if vals else 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    sample_size: int | None = 64,
    seed: int = 0,
    analytic_hook: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` with central differences.

    Each parameter tensor is probed on at most ``sample_size`` coordinates
    (all of them when ``None``). ``analytic_hook`` may rewrite the analytic
    gradient before comparison; it exists for negative-control tests.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        if analytic_hook is not None:
            analytic = analytic_hook(name, analytic)
        flat = p.values.reshape(-1)
        n = flat.size
        coords = np.arange(n) if sample_size is None or n <= sample_size else rng.choice(n, sample_size, replace=False)
        errs = []
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = f().item()
            flat[c] = orig - h
            fm = f().item()
            flat[c] = orig
            numeric = (fp - fm) / (2 * h)
            errs.append(relative_error(np.array(analytic.reshape(-1)[c]), np.array(numeric)))
        errs = np.array(errs, dtype=np.float64)
        report.per_param[name] = (float(errs.max()), float(errs.mean()))
    return report


def cosine_grad(e_i: np.ndarray, e_k: np.ndarray) -> np.ndarray:
    """d cos(e_i, e_k) / d e_i."""
    ni, nk = np.linalg.norm(e_i), np.linalg.norm(e_k)
    u_i, u_k = e_i / ni, e_k / nk
    return (u_k - (u_i @ u_k) * u_i) / ni


def closed_form_infonce_grad(
    anchor: np.ndarray, candidates: np.ndarray, positive: int, tau: float
) -> np.ndarray:
    """Analytic gradient of the single-anchor InfoNCE loss w.r.t. the raw anchor.

    ``(1/τ) [Σ_k p_k ∂sim_k/∂e_i − ∂sim_pos/∂e_i]`` with cosine similarity
    and ``p`` the softmax of ``sim/τ`` over all candidate rows.
    """
    if not tau > 0:
        raise InvalidTemperature(f"temperature must be positive, got {tau}")
    candidates = np.atleast_2d(candidates)
    if len(candidates) < 2:
        raise ValueError("need at least two candidates")
    anchor = np.asarray(anchor, dtype=np.float64)
    u_i = anchor / np.linalg.norm(anchor)
    u_c = candidates / np.linalg.norm(candidates, axis=1, keepdims=True)
    sims = u_c @ u_i
    logits = sims / tau
    p = np.exp(logits - logits.max())
    p /= p.sum()
    dsims = np.stack([cosine_grad(anchor, c) for c in candidates])
    return (p @ dsims - dsims[positive]) / tau

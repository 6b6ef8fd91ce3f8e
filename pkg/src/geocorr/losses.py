"""Correspondence, depth-consistency and language losses.

Embedding rows are indexed over the flattened visual block: row
``f * N_p + p`` is patch ``p`` of frame ``f``. One similarity matrix per head
layer feeds both the contrastive term and the soft matching behind the depth
term.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffengine as de
from .diffengine import Tensor
from .errors import ConfigError, EmptyBatch, InvalidTemperature, NonFiniteLoss, ShapeError
from .geometry import TrackSet

log = logging.getLogger(__name__)

NEGATIVES_POLICIES = ("all-frames-except-anchor-patch",)


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    lambda_c: float = 0.3
    lambda_d: float = 1.0
    eps: float = 1e-6
    negatives_policy: str = "all-frames-except-anchor-patch"
    min_visible_frames: int = 2
    max_anchors: int = 512

    def __post_init__(self):
        _check_tau(self.temperature)
        if self.lambda_c < 0 or self.lambda_d < 0:
            raise ConfigError("loss weights must be non-negative")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.negatives_policy not in NEGATIVES_POLICIES:
            raise ConfigError(f"unknown negatives policy {self.negatives_policy!r}")
        if self.min_visible_frames < 2 or self.max_anchors < 1:
            raise ConfigError("need min_visible_frames >= 2 and max_anchors >= 1")


def _check_tau(tau: float) -> None:
    if not (isinstance(tau, (int, float)) and math.isfinite(tau) and tau > 0):
        raise InvalidTemperature(f"temperature must be positive and finite, got {tau}")


@dataclass
class CorrespondenceBatch:
    """Anchor/positive pairs plus the candidate sets of both loss terms.

    ``candidate_mask[i]`` marks the contrastive candidates of anchor ``i``
    over all ``num_rows`` embedding rows. ``target_rows[i]`` lists the rows of
    the positive's frame used for soft matching, with pooled depths
    ``candidate_depth`` and validity ``candidate_valid``.
    """

    anchor_rows: np.ndarray  # (n,)
    positive_rows: np.ndarray  # (n,)
    candidate_mask: np.ndarray  # (n, num_rows) bool
    target_rows: np.ndarray  # (n, K)
    candidate_depth: np.ndarray  # (n, K)
    candidate_valid: np.ndarray  # (n, K) bool
    gt_depth: np.ndarray  # (n,)
    valid: np.ndarray  # (n,) bool
    num_rows: int

    def __len__(self) -> int:
        return int(self.anchor_rows.shape[0])

    def validate(self) -> None:
        n = len(self)
        if n == 0:
            raise EmptyBatch("correspondence batch has no anchors")
        idx = np.arange(n)
        if not self.candidate_mask[idx, self.positive_rows].all():
            raise ShapeError("every positive must be a candidate")
        if self.candidate_mask[idx, self.anchor_rows].any():
            raise ShapeError("an anchor may not be its own candidate")
        if (self.candidate_mask.sum(axis=1) < 2).any():
            raise ShapeError("every anchor needs at least one negative")


def build_correspondence_batch(
    tracks: TrackSet,
    patch_depths: np.ndarray,
    cfg: LossConfig,
    rng_seed: int = 0,
) -> CorrespondenceBatch:
    """Ordered visible pairs ``(track, a, b)`` with ``a != b`` as anchors.

    ``patch_depths`` is ``(F, P, Q)`` of pooled depths (0 = no depth). At most
    ``cfg.max_anchors`` pairs are kept, chosen uniformly without replacement
    and returned in (track, a, b) order.
    """
    F = tracks.num_frames
    pd = np.asarray(patch_depths, dtype=np.float64).reshape(F, -1)
    Np = pd.shape[1]
    keep = tracks.visibility_count >= cfg.min_visible_frames
    t_idx, a_idx, b_idx = [], [], []
    for t in np.flatnonzero(keep):
        vis = np.flatnonzero(tracks.visible[t])
        for a in vis:
            for b in vis:
                if a != b:
                    t_idx.append(t)
                    a_idx.append(a)
                    b_idx.append(b)
    if not t_idx:
        raise EmptyBatch("no track is visible in two frames")
    t_idx, a_idx, b_idx = map(np.asarray, (t_idx, a_idx, b_idx))
    if len(t_idx) > cfg.max_anchors:
        sel = np.sort(np.random.default_rng(rng_seed).choice(len(t_idx), cfg.max_anchors, replace=False))
        t_idx, a_idx, b_idx = t_idx[sel], a_idx[sel], b_idx[sel]

    n, N = len(t_idx), F * Np
    anchor_rows = a_idx * Np + tracks.patch[t_idx, a_idx]
    positive_rows = b_idx * Np + tracks.patch[t_idx, b_idx]
    candidate_mask = np.ones((n, N), dtype=bool)
    candidate_mask[np.arange(n), anchor_rows] = False
    target_rows = b_idx[:, None] * Np + np.arange(Np)[None, :]
    candidate_depth = pd[b_idx]
    candidate_valid = candidate_depth > 0
    gt = tracks.depth[t_idx, b_idx]
    valid = np.isfinite(gt) & (gt > 0) & candidate_valid.any(axis=1)
    batch = CorrespondenceBatch(
        anchor_rows=anchor_rows,
        positive_rows=positive_rows,
        candidate_mask=candidate_mask,
        target_rows=target_rows,
        candidate_depth=candidate_depth,
        candidate_valid=candidate_valid,
        gt_depth=gt,
        valid=valid,
        num_rows=N,
    )
    batch.validate()
    return batch


# ---------------------------------------------------------------- elementary terms


def similarity_logits(anchors: Tensor, candidates: Tensor, tau: float) -> Tensor:
    """``anchors @ candidatesᵀ / tau``."""
    _check_tau(tau)
    return (anchors @ de.transpose(candidates)) * (1.0 / tau)


def infonce_from_logits(logits: Tensor, positive_cols, mask: np.ndarray | None = None) -> Tensor:
    """Mean of ``-log softmax(logits)[i, positive_cols[i]]`` over candidates in ``mask``."""
    pos = np.asarray(positive_cols, dtype=np.int64)
    if logits.shape[0] == 0:
        raise EmptyBatch("no anchors")
    lp = de.log_softmax(logits, mask)
    return -de.mean(de.take_along_rows(lp, pos[:, None]))


def soft_matching(anchors: Tensor, candidates: Tensor, tau: float) -> Tensor:
    """Row-stochastic match probabilities of each anchor over ``candidates``."""
    return de.softmax(similarity_logits(anchors, candidates, tau))


def expected_depth(A: Tensor, depths, valid: np.ndarray | None = None) -> Tensor:
    """Soft-argmax depth ``sum_j A_ij d_j`` with ``A`` renormalised over valid ``j``.

    Rows without any valid candidate come out as NaN; callers drop them.
    """
    d = np.broadcast_to(np.asarray(depths, dtype=np.float64), A.shape)
    w = np.ones(A.shape) if valid is None else np.broadcast_to(np.asarray(valid, dtype=np.float64), A.shape)
    Aw = de.mul(A, w)
    num = de.row_sum(de.mul(Aw, np.where(w > 0, d, 0.0)))
    den = de.row_sum(Aw)
    with np.errstate(invalid="ignore", divide="ignore"):
        return de.div(num, den)


def depth_loss(d_gt, d_hat: Tensor, valid: np.ndarray | None = None, eps: float = 1e-6) -> Tensor:
    """Mean of ``|d - d̂| / (d + d̂ + eps)`` over valid anchors; 0 when none are valid."""
    d_gt = np.asarray(d_gt, dtype=np.float64)
    if d_gt.shape != d_hat.shape or d_gt.ndim != 1:
        raise ShapeError(f"depth shapes {d_gt.shape} vs {d_hat.shape}")
    keep = np.ones(len(d_gt), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        log.warning("depth loss has no valid anchors; contributing 0")
        return Tensor(0.0)
    if idx.size < len(d_gt):
        d_hat = de.reshape(de.gather_rows(de.reshape(d_hat, (-1, 1)), idx), (-1,))
        d_gt = d_gt[idx]
    diff = de.absolute(d_hat - Tensor(d_gt))
    return de.mean(de.div(diff, d_hat + Tensor(d_gt + eps)))


def surrogate_lm_loss(logits: Tensor, targets) -> Tensor:
    """Mean next-token cross-entropy."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.values.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"{logits.shape[0] if logits.values.ndim else 0} logit rows vs {targets.shape} targets")
    return de.cross_entropy(logits, targets)


# ---------------------------------------------------------------- per-layer aggregation


@dataclass
class GeometricTerms:
    corr: Tensor
    depth: Tensor
    per_layer_corr: dict[int, float] = field(default_factory=dict)
    per_layer_depth: dict[int, float] = field(default_factory=dict)
    num_depth_valid: int = 0


def _as_layer_dict(embeddings) -> dict[int, Tensor]:
    if isinstance(embeddings, Tensor):
        return {0: embeddings}
    if not embeddings:
        raise ShapeError("no head embeddings")
    return dict(embeddings)


def geometric_losses(batch: CorrespondenceBatch, embeddings, cfg: LossConfig) -> GeometricTerms:
    """Contrastive and depth terms, each averaged over head layers.

    The ``(n, N)`` logits are computed once per layer; the depth term reads
    the positive frame's columns from them.
    """
    batch.validate()
    layers = _as_layer_dict(embeddings)
    dv = np.flatnonzero(batch.valid)
    corr_terms, depth_terms = [], []
    out = GeometricTerms(Tensor(0.0), Tensor(0.0), num_depth_valid=int(dv.size))
    for l, E in sorted(layers.items()):
        if E.shape[0] != batch.num_rows:
            raise ShapeError(f"layer {l}: {E.shape[0]} embedding rows, batch expects {batch.num_rows}")
        logits = similarity_logits(de.gather_rows(E, batch.anchor_rows), E, cfg.temperature)
        lc = infonce_from_logits(logits, batch.positive_rows, batch.candidate_mask)
        corr_terms.append(lc)
        out.per_layer_corr[l] = lc.item()
        if dv.size:
            frame_logits = de.take_along_rows(de.gather_rows(logits, dv), batch.target_rows[dv])
            A = de.softmax(frame_logits)
            d_hat = expected_depth(A, batch.candidate_depth[dv], batch.candidate_valid[dv])
            ld = depth_loss(batch.gt_depth[dv], d_hat, eps=cfg.eps)
        else:
            log.warning("depth loss has no valid anchors; contributing 0")
            ld = Tensor(0.0)
        depth_terms.append(ld)
        out.per_layer_depth[l] = ld.item()
    k = 1.0 / len(layers)
    out.corr = _sum(corr_terms) * k
    out.depth = _sum(depth_terms) * k
    return out


def _sum(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


def infonce_loss(batch: CorrespondenceBatch, embeddings, cfg: LossConfig) -> tuple[Tensor, dict[int, float]]:
    """``L_corr`` averaged over head layers, plus the per-layer values."""
    batch.validate()
    layers = _as_layer_dict(embeddings)
    terms, per = [], {}
    for l, E in sorted(layers.items()):
        logits = similarity_logits(de.gather_rows(E, batch.anchor_rows), E, cfg.temperature)
        t = infonce_from_logits(logits, batch.positive_rows, batch.candidate_mask)
        terms.append(t)
        per[l] = t.item()
    return _sum(terms) * (1.0 / len(layers)), per


# ---------------------------------------------------------------- weighted total


@dataclass
class LossReport:
    L_LM: float
    L_corr: float
    L_depth: float
    L_total: float
    lambda_c: float
    lambda_d: float
    per_layer_corr: dict[int, float] = field(default_factory=dict)
    per_layer_depth: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_layer_corr"] = {str(k): v for k, v in self.per_layer_corr.items()}
        d["per_layer_depth"] = {str(k): v for k, v in self.per_layer_depth.items()}
        return d


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(L_LM, L_corr, L_depth, cfg: LossConfig) -> tuple[Tensor, LossReport]:
    """``L_LM + lambda_c * L_corr + lambda_d * L_depth``.

    Components may be Tensors (gradients flow) or plain floats. A weight of
    zero drops its term entirely, so ``L_total`` equals ``L_LM`` exactly when
    both weights vanish.
    """
    for name, comp in (("L_LM", L_LM), ("L_corr", L_corr), ("L_depth", L_depth)):
        v = _value(comp)
        if not math.isfinite(v):
            raise NonFiniteLoss(name, v)
    total = de.as_tensor(L_LM)
    if cfg.lambda_c:
        total = total + de.as_tensor(L_corr) * cfg.lambda_c
    if cfg.lambda_d:
        total = total + de.as_tensor(L_depth) * cfg.lambda_d
    report = LossReport(
        L_LM=_value(L_LM),
        L_corr=_value(L_corr),
        L_depth=_value(L_depth),
        L_total=total.item(),
        lambda_c=cfg.lambda_c,
        lambda_d=cfg.lambda_d,
    )
    return total, report

"""Correspondence diagnostics: PCK from raw query/key states and head embeddings,
confidence calibration, temporal robustness, chance levels and ablation sweeps.

PCK is measured in patch units: a prediction is correct when its patch lies
within ``delta`` patches (Euclidean, on the row/col lattice) of the ground
truth patch. Queries are the coarse track set seeded on the first frame of
each sequence; every ordered frame pair ``a < b`` where a track is visible in
both frames contributes one prediction at ``dt = t_b - t_a`` clip frames.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffengine as de
from .data import SequenceRecord
from .errors import ConfigError, DatasetLeakage, ShapeError
from .geometry import SamplingPolicy, project_points, validate_correspondence, pixel_to_patch
from .model import ForwardTrace, ToyModel

log = logging.getLogger(__name__)

CONFIDENCE_SOURCES = ("attention-prob", "head-similarity-softmax")


@dataclass(frozen=True)
class EvalConfig:
    pck_threshold: float = 2.0
    query_grid: tuple[int, int] = (8, 8)
    delta_t_range: tuple[int, ...] = tuple(range(1, 25))
    num_sequences: int = 200
    head_average: bool = True
    confidence_source: str = "attention-prob"  # for QK predictions
    head_temperature: float = 0.07  # softmax temperature for head-similarity confidence
    extra_thresholds: tuple[float, ...] = (1.0, 3.0)
    attention_dtype: str = "float32"

    def __post_init__(self):
        if not self.pck_threshold > 0:
            raise ConfigError("pck_threshold must be positive")
        if not self.delta_t_range or min(self.delta_t_range) < 1:
            raise ConfigError("delta_t_range must be nonempty with min >= 1")
        if self.confidence_source not in CONFIDENCE_SOURCES:
            raise ConfigError(f"confidence_source must be one of {CONFIDENCE_SOURCES}")
        if self.num_sequences < 1:
            raise ConfigError("num_sequences must be >= 1")

    @property
    def grid_key(self) -> str:
        return f"{self.query_grid[0]}x{self.query_grid[1]}"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        d = dict(d)
        for k in ("query_grid", "delta_t_range", "extra_thresholds"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------- elementary operations


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    """Row-wise cosine similarities; zero-norm rows give zero rows. Returns the zero-row count."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero = int((na == 0).sum() + (nb == 0).sum())
    a = np.divide(a, na[:, None], out=np.zeros_like(a), where=na[:, None] > 0)
    b = np.divide(b, nb[:, None], out=np.zeros_like(b), where=nb[:, None] > 0)
    return np.clip(a @ b.T, -1.0, 1.0), zero


def qk_descriptors(trace: ForwardTrace, layer: int, frame: int, kind: str, head_average: bool = True) -> np.ndarray:
    """Per-patch query (``kind="q"``) or key descriptors of one frame at 1-indexed ``layer``."""
    if not 1 <= layer <= len(trace.q_visual):
        raise ShapeError(f"layer {layer} not in trace")
    if not 0 <= frame < trace.num_frames:
        raise ShapeError(f"frame {frame} not in trace")
    src = trace.q_visual if kind == "q" else trace.k_visual
    x = src[layer - 1][trace.frame_rows(frame)]
    return trace.per_head(x).mean(axis=1) if head_average else x


def qk_similarity(
    trace: ForwardTrace, layer: int, source: int, target: int, head_average: bool = True
) -> tuple[np.ndarray, int]:
    """``S[i, j] = cos(q_i of source frame, k_j of target frame)`` and the zero-norm count."""
    q = qk_descriptors(trace, layer, source, "q", head_average)
    k = qk_descriptors(trace, layer, target, "k", head_average)
    S, zero = cosine_matrix(q, k)
    if zero:
        log.warning("layer %d: %d zero-norm descriptors", layer, zero)
    return S, zero


def argmax_match(S: np.ndarray, queries) -> np.ndarray:
    """Row argmax for each query; ties go to the lowest index."""
    return np.argmax(np.asarray(S)[np.asarray(queries, dtype=np.int64)], axis=1)


def patch_centers(indices, patch_grid: tuple[int, int], image_size: tuple[int, int]) -> np.ndarray:
    """Pixel ``(x, y)`` centers of flat patch indices."""
    idx = np.asarray(indices, dtype=np.int64)
    P, Q = patch_grid
    H, W = image_size
    r, c = idx // Q, idx % Q
    return np.stack([(c + 0.5) * W / Q, (r + 0.5) * H / P], axis=-1)


def build_tracks(predictions, patch_grid: tuple[int, int], image_size: tuple[int, int]) -> np.ndarray:
    """``(F, n)`` predicted patch indices -> ``(n, F, 2)`` pixel tracks at patch centers."""
    pred = np.asarray(predictions, dtype=np.int64)
    if pred.ndim != 2:
        raise ShapeError("predictions must be (frames, points)")
    return np.transpose(patch_centers(pred, patch_grid, image_size), (1, 0, 2))


def pck(pred_rc, gt_rc, delta: float) -> tuple[float, np.ndarray]:
    """Fraction of predictions within ``delta`` patches, plus the per-point flags.

    Returns NaN (undefined) when there are no points.
    """
    p = np.asarray(pred_rc, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(gt_rc, dtype=np.float64).reshape(-1, 2)
    if p.shape != g.shape:
        raise ShapeError(f"{p.shape} predictions vs {g.shape} ground truth")
    if len(p) == 0:
        return float("nan"), np.zeros(0, dtype=bool)
    flags = np.linalg.norm(p - g, axis=1) <= delta
    return float(flags.mean()), flags


def to_rc(indices, patch_grid: tuple[int, int]) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    return np.stack([idx // patch_grid[1], idx % patch_grid[1]], axis=-1)


@dataclass(frozen=True)
class Correlation:
    rho: float
    defined: bool
    n: int


def calibration_rho(confidences, correct) -> Correlation:
    """Pearson correlation of confidence with binary correctness; undefined on zero variance."""
    c = np.asarray(confidences, dtype=np.float64)
    y = np.asarray(correct, dtype=np.float64)
    if c.shape != y.shape:
        raise ShapeError("confidences and flags differ in length")
    n = len(c)
    if n < 2:
        return Correlation(float("nan"), False, n)
    cc, yc = c - c.mean(), y - y.mean()
    sc, sy = math.sqrt(float(cc @ cc)), math.sqrt(float(yc @ yc))
    if sc == 0 or sy == 0:
        return Correlation(float("nan"), False, n)
    rho = float(cc @ yc) / (sc * sy)
    return Correlation(min(1.0, max(-1.0, rho)), True, n)


def temporal_robustness(pck_by_dt: dict[int, float]) -> tuple[dict[int, float], bool]:
    """``Y(dt) = PCK(dt) / PCK(1)``; returns ``(curve, defined)``."""
    base = pck_by_dt.get(1, float("nan"))
    if not (math.isfinite(base) and base > 0):
        return {dt: float("nan") for dt in pck_by_dt}, False
    return {dt: (v / base if math.isfinite(v) else float("nan")) for dt, v in pck_by_dt.items()}, True


def lattice_count(delta: float) -> int:
    """Integer lattice points within Euclidean distance ``delta`` of the origin."""
    r = int(math.floor(delta))
    return sum(1 for i in range(-r, r + 1) for j in range(-r, r + 1) if i * i + j * j <= delta * delta)


def chance_level(patch_grid: tuple[int, int], delta: float = 2.0) -> float:
    """Expected PCK of uniform random matching for an interior ground-truth patch."""
    return lattice_count(delta) / (patch_grid[0] * patch_grid[1])


def monte_carlo_chance(patch_grid: tuple[int, int], delta: float, draws: int, seed: int = 0) -> float:
    """Empirical PCK of uniform random predictions against interior ground truth."""
    P, Q = patch_grid
    r = int(math.ceil(delta))
    rng = np.random.default_rng(seed)
    gt = np.stack([rng.integers(r, P - r, draws), rng.integers(r, Q - r, draws)], axis=1)
    pred = np.stack([rng.integers(0, P, draws), rng.integers(0, Q, draws)], axis=1)
    return pck(pred, gt, delta)[0]


def softmax_max(scores: np.ndarray, scale: float) -> np.ndarray:
    """Row-wise maximum of ``softmax(scores * scale)``."""
    z = scores * scale
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return 1.0 / e.sum(axis=1)  # the max entry has exp(0) = 1


# ---------------------------------------------------------------- prediction collection


@dataclass
class Predictions:
    """Flat per-prediction arrays for one source (QK or head) and one layer."""

    seq: list[np.ndarray] = field(default_factory=list)
    dt: list[np.ndarray] = field(default_factory=list)
    dist: list[np.ndarray] = field(default_factory=list)
    conf: list[np.ndarray] = field(default_factory=list)

    def add(self, seq: int, dt: int, dist: np.ndarray, conf: np.ndarray) -> None:
        self.seq.append(np.full(len(dist), seq))
        self.dt.append(np.full(len(dist), dt))
        self.dist.append(dist)
        self.conf.append(conf)

    def arrays(self):
        if not self.dist:
            z = np.zeros(0)
            return z.astype(int), z.astype(int), z, z
        return (np.concatenate(self.seq), np.concatenate(self.dt), np.concatenate(self.dist), np.concatenate(self.conf))


def frame_pairs(rec: SequenceRecord, grid_key: str):
    """``(a, b, dt, query patches in a, gt patches in b)`` over visible tracks, ``a < b``."""
    ts = rec.tracks[grid_key]
    for a in range(rec.num_frames):
        for b in range(a + 1, rec.num_frames):
            vis = ts.visible[:, a] & ts.visible[:, b] & (ts.patch[:, a] >= 0) & (ts.patch[:, b] >= 0)
            if vis.any():
                dt = int(rec.frame_times[b] - rec.frame_times[a])
                yield a, b, dt, ts.patch[vis, a], ts.patch[vis, b]


def collect_predictions(
    model: ToyModel, rec: SequenceRecord, seq_index: int, cfg: EvalConfig, qk: dict, heads: dict,
    embeddings_override: dict[int, np.ndarray] | None = None,
) -> None:
    """Append this sequence's QK and head predictions into ``qk``/``heads`` (layer -> Predictions)."""
    grid = rec.patch_grid
    with de.attention_precision(np.dtype(cfg.attention_dtype)):
        trace = model.forward(rec.visual_tokens, None) if model is not None else None
    if embeddings_override is not None:
        emb = embeddings_override
    else:
        emb = {l: t.values for l, t in trace.embeddings.items()} if trace is not None else {}
    Np = grid[0] * grid[1]
    scale_qk = 1.0 / math.sqrt(model.config.head_dim) if model is not None else 1.0
    for a, b, dt, qp, gp in frame_pairs(rec, cfg.grid_key):
        gt_rc = to_rc(gp, grid)
        if trace is not None:
            for l in range(1, len(trace.q_visual) + 1):
                S, _ = qk_similarity(trace, l, a, b, cfg.head_average)
                pred = argmax_match(S, qp)
                rows = S[qp]
                conf = softmax_max(rows, scale_qk) if cfg.confidence_source == "attention-prob" else softmax_max(rows, 1.0 / cfg.head_temperature)
                qk.setdefault(l, Predictions()).add(seq_index, dt, np.linalg.norm(to_rc(pred, grid) - gt_rc, axis=1), conf)
        for l, E in emb.items():
            Ea, Eb = E[a * Np : (a + 1) * Np], E[b * Np : (b + 1) * Np]
            S, _ = cosine_matrix(Ea, Eb)
            pred = argmax_match(S, qp)
            conf = softmax_max(S[qp], 1.0 / cfg.head_temperature)
            heads.setdefault(l, Predictions()).add(seq_index, dt, np.linalg.norm(to_rc(pred, grid) - gt_rc, axis=1), conf)


# ---------------------------------------------------------------- aggregation


@dataclass
class LayerSummary:
    layer: int
    pck_mean: float
    pck_std: float
    num_sequences: int
    rho: float
    rho_defined: bool
    num_predictions: int
    conf_correct: float
    conf_incorrect: float
    pck_at: dict[str, float]  # pooled PCK at each threshold, keyed by str(delta)
    dt_mean: dict[int, float]
    dt_std: dict[int, float]
    dt_count: dict[int, int]


def summarize(preds: Predictions, layer: int, cfg: EvalConfig) -> LayerSummary:
    seq, dt, dist, conf = preds.arrays()
    correct = dist <= cfg.pck_threshold
    per_seq = [correct[seq == s].mean() for s in np.unique(seq)]
    corr = calibration_rho(conf, correct)
    dt_mean, dt_std, dt_count = {}, {}, {}
    for d in cfg.delta_t_range:
        m = dt == d
        dt_count[d] = int(m.sum())
        if not m.any():
            dt_mean[d], dt_std[d] = float("nan"), float("nan")
            continue
        dt_mean[d] = float(correct[m].mean())  # visibility-weighted: pooled over points
        vals = [correct[m & (seq == s)].mean() for s in np.unique(seq[m])]
        dt_std[d] = float(np.std(vals))
    thresholds = sorted({cfg.pck_threshold, *cfg.extra_thresholds})
    return LayerSummary(
        layer=layer,
        pck_mean=float(np.mean(per_seq)) if per_seq else float("nan"),
        pck_std=float(np.std(per_seq)) if per_seq else float("nan"),
        num_sequences=len(per_seq),
        rho=corr.rho,
        rho_defined=corr.defined,
        num_predictions=int(len(dist)),
        conf_correct=float(conf[correct].mean()) if correct.any() else float("nan"),
        conf_incorrect=float(conf[~correct].mean()) if (~correct).any() else float("nan"),
        pck_at={str(t): (float((dist <= t).mean()) if len(dist) else float("nan")) for t in thresholds},
        dt_mean=dt_mean,
        dt_std=dt_std,
        dt_count=dt_count,
    )


@dataclass
class SourceReport:
    layers: list[LayerSummary]
    best_layer: int | None
    y_curve: dict[int, float]
    y_defined: bool

    def layer(self, l: int) -> LayerSummary:
        return next(s for s in self.layers if s.layer == l)

    @property
    def best(self) -> LayerSummary | None:
        return None if self.best_layer is None else self.layer(self.best_layer)


def _source_report(by_layer: dict[int, Predictions], cfg: EvalConfig) -> SourceReport:
    layers = [summarize(by_layer[l], l, cfg) for l in sorted(by_layer)]
    finite = [s for s in layers if math.isfinite(s.pck_mean)]
    if not finite:
        return SourceReport(layers, None, {}, False)
    best = max(finite, key=lambda s: (s.pck_mean, -s.layer))
    y, ok = temporal_robustness(best.dt_mean)
    return SourceReport(layers, best.layer, y, ok)


@dataclass
class EvalReport:
    qk: SourceReport
    head: SourceReport
    chance: float
    num_sequences: int
    config: EvalConfig

    def to_dict(self) -> dict:
        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return None
            if isinstance(x, dict):
                return {str(k): clean(v) for k, v in x.items()}
            if isinstance(x, list):
                return [clean(v) for v in x]
            return x

        return clean(
            {
                "chance_pck": self.chance,
                "num_sequences": self.num_sequences,
                "config": self.config.to_dict(),
                "qk": asdict(self.qk),
                "head": asdict(self.head),
            }
        )

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "report.json", out / "layers.csv", out / "delta_t.csv"]
        paths[0].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "layer", "mean", "std", "rho"])
            for name, src in (("qk", self.qk), ("head", self.head)):
                for s in src.layers:
                    w.writerow([name, s.layer, _fmt(s.pck_mean), _fmt(s.pck_std), _fmt(s.rho)])
        with open(paths[2], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "delta_t", "mean", "std", "count", "Y"])
            for name, src in (("qk", self.qk), ("head", self.head)):
                if src.best is None:
                    continue
                b = src.best
                for d in self.config.delta_t_range:
                    w.writerow([name, d, _fmt(b.dt_mean[d]), _fmt(b.dt_std[d]), b.dt_count[d], _fmt(src.y_curve.get(d, float("nan")))])
        return paths


def _fmt(x: float) -> str:
    return "" if not math.isfinite(x) else repr(float(x))


def _check_split(sequences: list[SequenceRecord]) -> None:
    bad = [r.id for r in sequences if r.split != "test"]
    if bad:
        raise DatasetLeakage(f"evaluation received non-test sequences: {bad[:10]}")


def evaluate(model: ToyModel, sequences: list[SequenceRecord], cfg: EvalConfig) -> EvalReport:
    """QK-based and head-based PCK per layer, calibration and Y(dt) over held-out sequences."""
    _check_split(sequences)
    seqs = sequences[: cfg.num_sequences]
    qk: dict[int, Predictions] = {}
    heads: dict[int, Predictions] = {}
    for i, rec in enumerate(seqs):
        collect_predictions(model, rec, i, cfg, qk, heads)
    grid = seqs[0].patch_grid if seqs else (16, 16)
    return EvalReport(_source_report(qk, cfg), _source_report(heads, cfg), chance_level(grid, cfg.pck_threshold), len(seqs), cfg)


def random_embedding_control(
    sequences: list[SequenceRecord], cfg: EvalConfig, emb_dim: int = 16, seed: int = 0
) -> SourceReport:
    """Head-style evaluation with random unit embeddings in place of a trained head."""
    _check_split(sequences)
    heads: dict[int, Predictions] = {}
    rng = np.random.default_rng(seed)
    for i, rec in enumerate(sequences[: cfg.num_sequences]):
        N = rec.num_frames * rec.patch_grid[0] * rec.patch_grid[1]
        E = rng.standard_normal((N, emb_dim))
        E /= np.linalg.norm(E, axis=1, keepdims=True)
        collect_predictions(None, rec, i, cfg, {}, heads, embeddings_override={0: E})
    return _source_report(heads, cfg)


# ---------------------------------------------------------------- twin disambiguation


def twin_pairs(fixture, policy: SamplingPolicy | None = None) -> np.ndarray:
    """Rows ``(frame k, anchor patch in frame 0, true patch in k, twin patch in k)``.

    Uses twin point pairs whose near point is visible in frames 0 and ``k``
    and whose far twin is visible in ``k``; rows where the true and twin
    patches coincide are dropped; duplicates are merged.
    """
    policy = policy or SamplingPolicy()
    seq = fixture.sequence
    frames = seq.frames
    grid = seq.patch_grid
    fg, bg = fixture.twin_points[:, 0], fixture.twin_points[:, 1]

    def visible_patches(k, pts):
        uv, depth = project_points(frames[k].camera, pts)
        out = np.full(len(pts), -1)
        for i in range(len(pts)):
            if np.isfinite(uv[i]).all() and depth[i] > 0 and validate_correspondence(frames[k], uv[i], depth[i], policy):
                out[i] = pixel_to_patch(uv[i], frames[k].image_size, grid)
        return out

    anchor = visible_patches(0, fg)
    rows = []
    for k in range(1, len(frames)):
        true = visible_patches(k, fg)
        twin = visible_patches(k, bg)
        ok = (anchor >= 0) & (true >= 0) & (twin >= 0) & (true != twin)
        rows.append(np.stack([np.full(ok.sum(), k), anchor[ok], true[ok], twin[ok]], axis=1))
    rows = np.concatenate(rows) if rows else np.zeros((0, 4), int)
    return np.unique(rows, axis=0)


def twin_margin(model: ToyModel, fixture, pairs: np.ndarray | None = None, attention_dtype: str = "float32") -> dict[int, float]:
    """Per head layer, mean ``cos(anchor, true) - cos(anchor, twin)`` over twin pairs."""
    pairs = twin_pairs(fixture) if pairs is None else pairs
    if len(pairs) == 0:
        raise ShapeError("twin fixture yields no usable pairs")
    seq = fixture.sequence
    F, P, Q, D = seq.token_grids.shape
    Np = P * Q
    with de.attention_precision(np.dtype(attention_dtype)):
        trace = model.forward(seq.token_grids.reshape(F, Np, D), None)
    out = {}
    k, a, t, w = pairs.T
    for l, E in trace.embeddings.items():
        e = E.values
        ea, et, ew = e[a], e[k * Np + t], e[k * Np + w]
        out[l] = float(np.mean(np.sum(ea * et, axis=1) - np.sum(ea * ew, axis=1)))
    return out


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    value: str
    avg_pck: float
    final_l_corr: float


def ablation_sweep(
    axis: str,
    values: list,
    train_fn: Callable[[object], tuple[ToyModel, list[dict]]],
    test_sequences: list[SequenceRecord],
    cfg: EvalConfig,
) -> list[AblationRow]:
    """Train one model per value via ``train_fn(value)`` and score it.

    ``avg_pck`` is the best head layer's PCK averaged over test sequences;
    ``final_l_corr`` is the last geometric step's logged ``L_corr``.
    """
    if axis not in ("lora_rank", "head_layers"):
        raise ConfigError(f"unknown ablation axis {axis!r}")
    if not values:
        raise ConfigError("ablation needs at least one value")
    rows = []
    for v in values:
        model, step_log = train_fn(v)
        report = evaluate(model, test_sequences, cfg)
        geo = [r["L_corr"] for r in step_log if r.get("L_corr") is not None]
        best = report.head.best
        rows.append(
            AblationRow(
                value=format_value(v),
                avg_pck=best.pck_mean if best else float("nan"),
                final_l_corr=float(geo[-1]) if geo else float("nan"),
            )
        )
    return rows


def format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        vals = sorted(int(x) for x in v)
        if vals == list(range(vals[0], vals[-1] + 1)) and len(vals) > 1:
            return f"{vals[0]}-{vals[-1]}"
        return ",".join(str(x) for x in vals)
    return str(v)


def write_ablation_csv(rows: list[AblationRow], path, axis: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([axis, "avg_pck", "final_l_corr"])
        for r in rows:
            w.writerow([r.value, _fmt(r.avg_pck), _fmt(r.final_l_corr)])
    return path

"""Toy vision-language transformer with LoRA adapters and correspondence heads.

Input layout is ``[visual tokens; language tokens]``. Visual tokens attend
bidirectionally within the visual block only, so visual states never depend
on the language channel; language tokens see every visual token and earlier
language tokens. Base attention projections, MLPs and block norms are frozen;
the LoRA deltas, the correspondence heads and the input/output embeddings
train.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffengine as de
from .diffengine import Tensor
from .errors import ConfigError, ShapeError, VocabError

PROJECTIONS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    emb_dim: int = 16
    lora_rank: int = 8
    lora_alpha: float = 16.0
    head_layers: tuple[int, ...] = (1, 2, 3, 4)
    vocab_size: int = 32
    max_frames: int = 8
    patches_per_frame: int = 256
    feature_dim: int = 32
    max_text_len: int = 32
    mlp_ratio: int = 4
    head_hidden: int | None = None  # width of the head's first layer; None -> 2 * emb_dim

    def __post_init__(self):
        object.__setattr__(self, "head_layers", tuple(sorted(int(l) for l in self.head_layers)))
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        if not 1 <= self.lora_rank <= self.hidden_dim:
            raise ConfigError("lora_rank must lie in [1, hidden_dim]")
        if any(not 1 <= l <= self.num_layers for l in self.head_layers):
            raise ConfigError(f"head_layers {self.head_layers} outside [1, {self.num_layers}]")
        if self.emb_dim > self.hidden_dim:
            raise ConfigError("emb_dim must not exceed hidden_dim")
        if self.hidden_width < self.emb_dim:
            raise ConfigError("head_hidden must be at least emb_dim")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def hidden_width(self) -> int:
        return self.head_hidden if self.head_hidden is not None else 2 * self.emb_dim

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_layers"] = list(self.head_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "head_layers" in d:
            d["head_layers"] = tuple(d["head_layers"])
        return cls(**d)


@dataclass
class ForwardTrace:
    num_frames: int
    patches_per_frame: int
    num_heads: int
    hidden: list[np.ndarray] = field(default_factory=list)  # V^(l) visual rows, l = 1..L
    q_visual: list[np.ndarray] = field(default_factory=list)
    k_visual: list[np.ndarray] = field(default_factory=list)
    q_full: list[np.ndarray] = field(default_factory=list)  # all rows, kept only on request
    k_full: list[np.ndarray] = field(default_factory=list)
    embeddings: dict[int, Tensor] = field(default_factory=dict)  # layer -> (N, d_emb)
    logits: Tensor | None = None

    @property
    def num_visual(self) -> int:
        return self.num_frames * self.patches_per_frame

    def per_head(self, arr: np.ndarray) -> np.ndarray:
        """``(N, d) -> (N, n_h, d_k)``."""
        n, d = arr.shape
        return arr.reshape(n, self.num_heads, d // self.num_heads)

    def frame_rows(self, frame: int) -> slice:
        return slice(frame * self.patches_per_frame, (frame + 1) * self.patches_per_frame)


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _fix_signs(U: np.ndarray, Vt: np.ndarray, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    U, Vt = U.copy(), Vt.copy()
    for k in range(U.shape[1]):
        col = U[:, k]
        nz = np.flatnonzero(np.abs(col) > tol)
        if len(nz) and col[nz[0]] < 0:
            U[:, k] = -col
            if k < Vt.shape[0]:
                Vt[k] = -Vt[k]
    return U, Vt


def init_head_svd(w_q: np.ndarray, config: ModelConfig) -> dict[str, np.ndarray]:
    """Correspondence-head weights from the SVD of a query projection.

    Projections act on row vectors (``q = x @ W_q``), so the input directions
    that ``W_q`` reads from are the left singular vectors ``U``; in the
    transposed (output x input) convention these are the right singular
    vectors. The first layer keeps the top ``hidden_width`` of them scaled by
    ``sqrt(sigma)``; directions beyond the numerical rank come from the null
    space and reuse the smallest nonzero scale. The second layer selects the
    first ``emb_dim`` hidden units. Signs are fixed so each singular vector's
    first nonzero entry is positive.
    """
    d = config.hidden_dim
    hidden = config.hidden_width
    if w_q.shape != (d, d):
        raise ShapeError(f"W_Q must be {d}x{d}, got {w_q.shape}")
    if d < hidden:
        raise ConfigError(f"hidden_dim {d} < head width {hidden}")
    U, S, Vt = np.linalg.svd(w_q)
    U, Vt = _fix_signs(U, Vt)
    tol = S.max(initial=0.0) * d * np.finfo(np.float64).eps
    rank = int((S > tol).sum())
    scales = np.sqrt(S[:hidden])
    if rank < hidden:
        scales[rank:] = math.sqrt(S[rank - 1]) if rank > 0 else 1.0
    return {
        "fc1.weight": U[:, :hidden] * scales,
        "fc1.bias": np.zeros(hidden),
        "fc2.weight": np.eye(hidden, config.emb_dim),
        "fc2.bias": np.zeros(config.emb_dim),
    }


class ToyModel:
    """Parameters live in ``self.params`` (ordered name -> Tensor)."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # ------------------------------------------------------------ construction

    @staticmethod
    def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
        d, r, h = config.hidden_dim, config.lora_rank, config.mlp_ratio * config.hidden_dim
        shapes: dict[str, tuple[int, ...]] = {
            "visual_proj.weight": (config.feature_dim, d),
            "pos.frame": (config.max_frames, d),
            "pos.patch": (config.patches_per_frame, d),
            "pos.text": (config.max_text_len, d),
            "tok_emb": (config.vocab_size, d),
        }
        for i in range(1, config.num_layers + 1):
            p = f"layers.{i}"
            shapes[f"{p}.ln1.gain"] = (d,)
            shapes[f"{p}.ln1.bias"] = (d,)
            for name in PROJECTIONS:
                shapes[f"{p}.attn.{name}.weight"] = (d, d)
                shapes[f"{p}.attn.{name}.lora_A"] = (d, r)
                shapes[f"{p}.attn.{name}.lora_B"] = (r, d)
            shapes[f"{p}.ln2.gain"] = (d,)
            shapes[f"{p}.ln2.bias"] = (d,)
            shapes[f"{p}.mlp.fc1.weight"] = (d, h)
            shapes[f"{p}.mlp.fc1.bias"] = (h,)
            shapes[f"{p}.mlp.fc2.weight"] = (h, d)
            shapes[f"{p}.mlp.fc2.bias"] = (d,)
        for l in config.head_layers:
            shapes[f"heads.{l}.fc1.weight"] = (d, config.hidden_width)
            shapes[f"heads.{l}.fc1.bias"] = (config.hidden_width,)
            shapes[f"heads.{l}.fc2.weight"] = (config.hidden_width, config.emb_dim)
            shapes[f"heads.{l}.fc2.bias"] = (config.emb_dim,)
        shapes["ln_f.gain"] = (d,)
        shapes["ln_f.bias"] = (d,)
        shapes["lm_head.weight"] = (d, config.vocab_size)
        return shapes

    @staticmethod
    def is_frozen(name: str) -> bool:
        if not name.startswith("layers."):
            return False
        if ".attn." in name:
            return name.endswith(".weight")
        return True  # block MLPs and norms

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "ToyModel":
        params = {}
        for name, shape in cls.parameter_shapes(config).items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {arr.shape}")
            params[name] = Tensor(arr.copy(), requires_grad=not cls.is_frozen(name), name=name)
        return cls(config, params)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.values for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # ------------------------------------------------------------ forward

    def _proj(self, x: Tensor, layer: int, name: str, use_lora: bool) -> Tensor:
        p = f"layers.{layer}.attn.{name}"
        out = x @ self.params[f"{p}.weight"]
        if use_lora:
            delta = (x @ self.params[f"{p}.lora_A"]) @ self.params[f"{p}.lora_B"]
            out = out + delta * self.config.lora_scale
        return out

    def head(self, layer: int, hidden: Tensor) -> Tensor:
        p = f"heads.{layer}"
        h = de.gelu(hidden @ self.params[f"{p}.fc1.weight"] + self.params[f"{p}.fc1.bias"])
        e = h @ self.params[f"{p}.fc2.weight"] + self.params[f"{p}.fc2.bias"]
        return de.l2_normalize(e)

    def forward(
        self,
        visual_tokens: np.ndarray | None = None,
        language_tokens=None,
        use_lora: bool = True,
        keep_full_qk: bool = False,
        with_heads: bool = True,
    ) -> ForwardTrace:
        """Run the stack; ``visual_tokens`` is ``(F, N_p, feature_dim)``."""
        cfg = self.config
        P = self.params
        parts = []
        F, Np = 0, cfg.patches_per_frame
        if visual_tokens is not None and np.size(visual_tokens) > 0:
            vt = np.asarray(visual_tokens, dtype=np.float64)
            if vt.ndim != 3 or vt.shape[1] != Np or vt.shape[2] != cfg.feature_dim:
                raise ShapeError(f"visual tokens {vt.shape} do not match (F, {Np}, {cfg.feature_dim})")
            F = vt.shape[0]
            if F > cfg.max_frames:
                raise ShapeError(f"{F} frames exceed max_frames={cfg.max_frames}")
            xv = Tensor(vt.reshape(F * Np, cfg.feature_dim)) @ P["visual_proj.weight"]
            xv = xv + de.gather_rows(P["pos.frame"], np.repeat(np.arange(F), Np))
            xv = xv + de.gather_rows(P["pos.patch"], np.tile(np.arange(Np), F))
            parts.append(xv)
        N = F * Np
        M = 0
        if language_tokens is not None and len(language_tokens) > 0:
            ids = np.asarray(language_tokens, dtype=np.int64)
            if ids.min() < 0 or ids.max() >= cfg.vocab_size:
                raise VocabError(f"token ids must lie in [0, {cfg.vocab_size})")
            M = len(ids)
            if M > cfg.max_text_len:
                raise ShapeError(f"{M} language tokens exceed max_text_len={cfg.max_text_len}")
            parts.append(de.gather_rows(P["tok_emb"], ids) + de.gather_rows(P["pos.text"], np.arange(M)))
        if not parts:
            raise ShapeError("empty input")

        x = parts[0] if len(parts) == 1 else de.concat(parts)
        # Visual rows see the visual block only; language rows see all visual
        # rows and earlier language rows.
        mask, prefix = None, None
        if M and N:
            prefix = N
        elif M:
            mask = np.tril(np.ones((M, M), dtype=bool))

        trace = ForwardTrace(num_frames=F, patches_per_frame=Np, num_heads=cfg.num_heads)
        for l in range(1, cfg.num_layers + 1):
            p = f"layers.{l}"
            h = de.layer_norm(x, P[f"{p}.ln1.gain"], P[f"{p}.ln1.bias"])
            q = self._proj(h, l, "q", use_lora)
            k = self._proj(h, l, "k", use_lora)
            v = self._proj(h, l, "v", use_lora)
            trace.q_visual.append(q.values[:N].copy())
            trace.k_visual.append(k.values[:N].copy())
            if keep_full_qk:
                trace.q_full.append(q.values.copy())
                trace.k_full.append(k.values.copy())
            z = de.multi_head_attention(q, k, v, cfg.num_heads, mask=mask, prefix=prefix)
            x = x + self._proj(z, l, "o", use_lora)
            h2 = de.layer_norm(x, P[f"{p}.ln2.gain"], P[f"{p}.ln2.bias"])
            m = de.gelu(h2 @ P[f"{p}.mlp.fc1.weight"] + P[f"{p}.mlp.fc1.bias"])
            x = x + (m @ P[f"{p}.mlp.fc2.weight"] + P[f"{p}.mlp.fc2.bias"])
            if N:
                trace.hidden.append(x.values[:N].copy())
                if with_heads and l in cfg.head_layers:
                    vis = x if not M else de.slice_rows(x, 0, N)
                    trace.embeddings[l] = self.head(l, vis)
        if M:
            lang = x if not N else de.slice_rows(x, N, N + M)
            trace.logits = de.layer_norm(lang, P["ln_f.gain"], P["ln_f.bias"]) @ P["lm_head.weight"]
        return trace


def init_model(config: ModelConfig, rng_seed: int = 0) -> ToyModel:
    """Random-orthogonal frozen base, zero LoRA ``B``, SVD-initialised heads."""
    rng = np.random.default_rng(rng_seed)
    d, h = config.hidden_dim, config.mlp_ratio * config.hidden_dim
    arrays: dict[str, np.ndarray] = {}
    semi = random_orthogonal(d, rng)[: config.feature_dim] if config.feature_dim <= d else (
        rng.standard_normal((config.feature_dim, d)) / math.sqrt(config.feature_dim)
    )
    arrays["visual_proj.weight"] = semi * math.sqrt(d)
    arrays["pos.frame"] = 0.3 * rng.standard_normal((config.max_frames, d))
    arrays["pos.patch"] = 0.3 * rng.standard_normal((config.patches_per_frame, d))
    arrays["pos.text"] = 0.3 * rng.standard_normal((config.max_text_len, d))
    arrays["tok_emb"] = rng.standard_normal((config.vocab_size, d))
    for i in range(1, config.num_layers + 1):
        p = f"layers.{i}"
        arrays[f"{p}.ln1.gain"] = np.ones(d)
        arrays[f"{p}.ln1.bias"] = np.zeros(d)
        for name in PROJECTIONS:
            arrays[f"{p}.attn.{name}.weight"] = random_orthogonal(d, rng)
            arrays[f"{p}.attn.{name}.lora_A"] = rng.standard_normal((d, config.lora_rank)) / math.sqrt(d)
            arrays[f"{p}.attn.{name}.lora_B"] = np.zeros((config.lora_rank, d))
        arrays[f"{p}.ln2.gain"] = np.ones(d)
        arrays[f"{p}.ln2.bias"] = np.zeros(d)
        arrays[f"{p}.mlp.fc1.weight"] = rng.standard_normal((d, h)) / math.sqrt(d)
        arrays[f"{p}.mlp.fc1.bias"] = np.zeros(h)
        arrays[f"{p}.mlp.fc2.weight"] = 0.5 * rng.standard_normal((h, d)) / math.sqrt(h)
        arrays[f"{p}.mlp.fc2.bias"] = np.zeros(d)
    for l in config.head_layers:
        for k, v in init_head_svd(arrays[f"layers.{l}.attn.q.weight"], config).items():
            arrays[f"heads.{l}.{k}"] = v
    arrays["ln_f.gain"] = np.ones(d)
    arrays["ln_f.bias"] = np.zeros(d)
    arrays["lm_head.weight"] = 0.02 * rng.standard_normal((d, config.vocab_size))
    return ToyModel.from_arrays(config, arrays)


@dataclass
class ParamGroup:
    name: str
    params: dict[str, Tensor]
    lr_mult: float = 1.0
    decay: frozenset[str] = frozenset()  # names that receive weight decay


HEAD_LR_MULT = 4.0
_DECAYED_OTHER = ("visual_proj.weight", "tok_emb", "lm_head.weight")


def trainable_parameters(model: ToyModel, head_lr_mult: float = HEAD_LR_MULT) -> dict[str, ParamGroup]:
    """Groups ``head`` (4x learning rate), ``lora`` and ``other``; frozen base excluded."""
    groups = {
        "head": ParamGroup("head", {}, head_lr_mult),
        "lora": ParamGroup("lora", {}, 1.0),
        "other": ParamGroup("other", {}, 1.0),
    }
    for name, t in model.params.items():
        if not t.requires_grad:
            continue
        if name.startswith("heads."):
            groups["head"].params[name] = t
        elif ".lora_" in name:
            groups["lora"].params[name] = t
        else:
            groups["other"].params[name] = t
    groups["lora"].decay = frozenset(groups["lora"].params)
    groups["other"].decay = frozenset(n for n in groups["other"].params if n in _DECAYED_OTHER)
    return groups

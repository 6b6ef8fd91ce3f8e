"""Dense tape-based reverse-mode autodiff over float64 numpy arrays.

Ops record themselves on the active :class:`Tape` when any input requires a
gradient. Broadcasting is limited to scalar constants and a per-column bias
added to every row; all other shapes must match exactly.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from ..errors import NonScalarLoss, ShapeError

LN_EPS = 1e-5
NORM_EPS = 1e-12

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "_node")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else _raise_nonscalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    @property
    def T(self):
        return transpose(self)


def _raise_nonscalar(t: Tensor):
    raise NonScalarLoss(f"expected a scalar, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of operations; parents always precede children.

    Use as a context manager; ops executed inside are recorded.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        """Accumulate d(seed * loss)/d(leaf) into ``.grad`` of every leaf on the tape.

        The tape is consumed: nodes are released as they are visited.
        """
        if loss.values.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        if loss._node is None:
            if loss.requires_grad:
                _accumulate_leaf(loss, np.full(loss.shape, seed))
            return
        grads: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, float(seed))}
        nodes = self.nodes
        while nodes:
            node = nodes.pop()
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    _accumulate_leaf(p, pg)
                else:
                    key = id(p)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
            node.out._node = None
        grads.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} != parameter shape {t.shape}")
    t.grad = g.copy() if t.grad is None else t.grad + g


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _make(values: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        node = _Node(out, tuple(parents), backward)
        out._node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("no tape recorded this computation")
    tape.backward(loss)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def bw(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _make(av @ bv, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")
    return _make(a.values.T.copy(), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    """``a + b`` for equal shapes, a scalar ``b``, or a row-bias ``b`` of shape ``(n,)``."""
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return _make(a.values + float(b), (a,), lambda g: (g,))
    b = as_tensor(b)
    if a.shape == b.shape:
        return _make(a.values + b.values, (a, b), lambda g: (g, g))
    if a.values.ndim == 2 and b.values.ndim == 1 and b.shape[0] == a.shape[1]:
        return _make(a.values + b.values, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add shapes {a.shape} + {b.shape}")


def sub(a, b) -> Tensor:
    return add(a, neg(as_tensor(b)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.values, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    """Elementwise product; one side may be a constant array of the same shape."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} * {b.shape}")
    av, bv = a.values, b.values
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"div shapes {a.shape} / {b.shape}")
    av, bv = a.values, b.values
    out = av / bv
    return _make(out, (a, b), lambda g: (g / bv, -g * out / bv))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.values
    return _make(np.log(av), (a,), lambda g: (g / av,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.values)
    return _make(np.abs(a.values), (a,), lambda g: (g * sign,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.values
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * d_inner),)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------- reductions


def total(a: Tensor) -> Tensor:
    return _make(np.array(a.values.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.values.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return _make(np.array(a.values.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def row_sum(a: Tensor) -> Tensor:
    """Sum over the last axis of a matrix: ``(m, n) -> (m,)``."""
    if a.values.ndim != 2:
        raise ShapeError(f"row_sum needs a matrix, got {a.shape}")
    n = a.shape[1]
    return _make(a.values.sum(axis=1), (a,), lambda g: (np.repeat(g[:, None], n, axis=1),))


# ---------------------------------------------------------------- row-wise nonlinearities


def _masked_fill(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return x
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} != input shape {x.shape}")
    return np.where(mask, x, -np.inf)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax; ``mask`` (bool, same shape) marks admissible entries."""
    if a.values.ndim != 2:
        raise ShapeError(f"softmax needs a matrix, got {a.shape}")
    x = _masked_fill(a.values, mask)
    x = x - x.max(axis=1, keepdims=True)
    out = np.exp(x)
    out /= out.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise log-softmax; masked entries come out as ``-inf`` and get no gradient."""
    if a.values.ndim != 2:
        raise ShapeError(f"log_softmax needs a matrix, got {a.shape}")
    x = _masked_fill(a.values, mask)
    x = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=1, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def bw(g):
        g = np.where(np.isfinite(out), g, 0.0)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(out, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    if x.values.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm shapes {x.shape}, {gain.shape}, {bias.shape}")
    xv = x.values
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.values
    out = xhat * gv + bias.values

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gv
            gx = inv * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return (gx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _make(out, (x, gain, bias), bw)


def l2_normalize(a: Tensor) -> Tensor:
    """Row-wise unit normalisation; all-zero rows stay zero."""
    if a.values.ndim != 2:
        raise ShapeError(f"l2_normalize needs a matrix, got {a.shape}")
    norm = np.sqrt((a.values**2).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, NORM_EPS)
    out = a.values / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norm,)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------- indexing and assembly


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if a.values.ndim != 2:
        raise ShapeError(f"gather_rows needs a matrix, got {a.shape}")

    def bw(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.values[idx], (a,), bw)


def take_along_rows(a: Tensor, idx) -> Tensor:
    """``out[i, k] = a[i, idx[i, k]]``."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.values.ndim != 2 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"take_along_rows shapes {a.shape}, {idx.shape}")

    def bw(g):
        out = np.zeros(a.shape)
        rows = np.repeat(np.arange(a.shape[0]), idx.shape[1])
        np.add.at(out, (rows, idx.ravel()), g.ravel())
        return (out,)

    return _make(np.take_along_axis(a.values, idx, axis=1), (a,), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        out = np.zeros(a.shape)
        out[start:stop] = g
        return (out,)

    return _make(a.values[start:stop].copy(), (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(parts), bw)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.values.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------- fused attention


class attention_precision:
    """Context manager selecting the dtype of attention scores and probabilities.

    Everything outside the score matrices stays float64. Float32 halves the
    cost of the ``N x N`` softmax during training; finite-difference checks
    need the float64 default.
    """

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)
        self._prev = None

    def __enter__(self):
        global _ATTN_DTYPE
        self._prev, _ATTN_DTYPE = _ATTN_DTYPE, self.dtype
        return self

    def __exit__(self, *exc):
        global _ATTN_DTYPE
        _ATTN_DTYPE = self._prev


_ATTN_DTYPE = np.dtype(np.float64)


def _softmax_rows_(s: np.ndarray) -> np.ndarray:
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    num_heads: int,
    mask: np.ndarray | None = None,
    prefix: int | None = None,
) -> Tensor:
    """Scaled dot-product attention over ``num_heads`` column blocks.

    Equivalent to ``softmax(q_h k_hᵀ / sqrt(d_k), mask) v_h`` per head with
    the head outputs concatenated, but stores only the attention
    probabilities for the backward pass.

    ``prefix=n`` is a structured mask: the first ``n`` rows attend to the
    first ``n`` columns only, later rows attend to the prefix and causally to
    each other. It avoids materialising the full boolean mask.
    """
    n, d = q.shape
    if k.shape != (n, d) or v.shape != (n, d) or d % num_heads:
        raise ShapeError(f"attention shapes {q.shape}, {k.shape}, {v.shape}, heads={num_heads}")
    if mask is not None and prefix is not None:
        raise ShapeError("pass either mask or prefix, not both")
    if prefix is not None and not 0 < prefix <= n:
        raise ShapeError(f"prefix {prefix} outside (0, {n}]")
    dk = d // num_heads
    sc = 1.0 / math.sqrt(dk)
    dt = _ATTN_DTYPE
    qv, kv, vv = q.values, k.values, v.values
    qc, kc, vc = qv.astype(dt, copy=False), kv.astype(dt, copy=False), vv.astype(dt, copy=False)
    # Row blocks: (row slice, number of visible leading columns, additive mask or None).
    if prefix is None or prefix == n:
        additive = None
        if mask is not None:
            if mask.shape != (n, n):
                raise ShapeError(f"attention mask shape {mask.shape} != {(n, n)}")
            additive = np.where(mask, 0.0, -np.inf).astype(dt)
        blocks = [(slice(0, n), n, additive)]
    else:
        m = n - prefix
        tail = np.zeros((m, n), dtype=dt)
        tail[:, prefix:] = np.where(np.tril(np.ones((m, m), dtype=bool)), 0.0, -np.inf)
        blocks = [(slice(0, prefix), prefix, None), (slice(prefix, n), n, tail)]

    out = np.empty((n, d))
    probs: list[list[np.ndarray]] = []
    for h in range(num_heads):
        sl = slice(h * dk, (h + 1) * dk)
        per_block = []
        for rows, cols, add in blocks:
            s = qc[rows, sl] @ kc[:cols, sl].T
            s *= sc
            if add is not None:
                s += add
            _softmax_rows_(s)
            out[rows, sl] = s @ vc[:cols, sl]
            per_block.append(s)
        probs.append(per_block)

    def bw(g):
        gq, gk, gv = np.empty((n, d)), np.zeros((n, d)), np.zeros((n, d))
        gc = g.astype(dt, copy=False)
        for h in range(num_heads):
            sl = slice(h * dk, (h + 1) * dk)
            for (rows, cols, _), a in zip(blocks, probs[h]):
                gh = gc[rows, sl]
                gv[:cols, sl] += a.T @ gh
                ds = gh @ vc[:cols, sl].T
                ds -= (ds * a).sum(axis=1, keepdims=True)
                ds *= a
                ds *= sc
                gq[rows, sl] = ds @ kc[:cols, sl]
                gk[:cols, sl] += ds.T @ qc[rows, sl]
        probs.clear()
        return gq, gk, gv

    return _make(out, (q, k, v), bw)


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean token cross-entropy of ``(m, V)`` logits against ``m`` integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.values.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy shapes {logits.shape} vs targets {targets.shape}")
    lp = log_softmax(logits)
    picked = take_along_rows(lp, targets[:, None])
    return neg(mean(picked))

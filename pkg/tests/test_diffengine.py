from __future__ import annotations

import math
import zlib

import numpy as np
import pytest

from geocorr import diffengine as de
from geocorr.diffengine import Tape, Tensor
from geocorr.errors import InvalidTemperature, NonScalarLoss, ShapeError


def leaf(rng, *shape, low=None):
    v = rng.standard_normal(shape)
    if low is not None:
        v = np.abs(v) + low
    return Tensor(v, requires_grad=True)


def check(f, params, tol=1e-6):
    report = de.finite_diff_check(f, params, h=1e-6, sample_size=None)
    assert report.max_rel_error < tol, report.per_param


def grad_of(f, t):
    t.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    return t.grad


# ---------------------------------------------------------------- per-op gradients

OPS = {
    "matmul": lambda a, b: de.total(de.mul(de.matmul(a, de.transpose(b)), de.matmul(a, de.transpose(a)))),
    "transpose": lambda a, b: de.total(de.mul(de.transpose(a) @ a, de.transpose(b) @ b)),
    "add_sub_mul": lambda a, b: de.total(de.mul(de.sub(a, de.scale(b, 0.3)), de.add(a, b))),
    "div": lambda a, b: de.total(de.div(a, de.add(de.mul(b, b), 1.0))),
    "exp_log": lambda a, b: de.total(de.log(de.add(de.exp(a), de.exp(b)))),
    "absolute": lambda a, b: de.total(de.absolute(de.add(a, 5.0))),
    "gelu": lambda a, b: de.total(de.mul(de.gelu(a), b)),
    "softmax": lambda a, b: de.total(de.mul(de.softmax(a), b)),
    "log_softmax": lambda a, b: de.total(de.mul(de.log_softmax(a), b)),
    "l2_normalize": lambda a, b: de.total(de.mul(de.l2_normalize(a), b)),
    "row_sum": lambda a, b: de.total(de.mul(de.row_sum(a), de.row_sum(b))),
    "mean": lambda a, b: de.mul(de.mean(a), de.mean(de.mul(b, b))),
    "gather_rows": lambda a, b: de.total(de.mul(de.gather_rows(a, [2, 0, 2]), de.gather_rows(b, [1, 1, 3]))),
    "take_along_rows": lambda a, b: de.total(de.mul(de.take_along_rows(a, [[0, 2]] * 4), de.take_along_rows(b, [[1, 1]] * 4))),
    "slice_concat": lambda a, b: de.total(de.mul(de.concat([de.slice_rows(a, 1, 3), de.slice_rows(b, 0, 2)]), b)),
    "reshape": lambda a, b: de.total(de.mul(de.reshape(a, (2, 10)), de.reshape(b, (2, 10)))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a, b = leaf(rng, 4, 5), leaf(rng, 4, 5)
    check(lambda: OPS[name](a, b), {"a": a, "b": b})


def test_layer_norm_gradient():
    rng = np.random.default_rng(0)
    x, g, b = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
    w = rng.standard_normal((3, 6))
    check(lambda: de.total(de.mul(de.layer_norm(x, g, b), w)), {"x": x, "g": g, "b": b})


def test_cross_entropy_gradient_and_value():
    rng = np.random.default_rng(1)
    z = leaf(rng, 5, 7)
    t = rng.integers(0, 7, 5)
    check(lambda: de.cross_entropy(z, t), {"z": z})
    ref = -np.mean([z.values[i, t[i]] - math.log(np.exp(z.values[i]).sum()) for i in range(5)])
    assert de.cross_entropy(z, t).item() == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("use_prefix", [False, True])
def test_attention_gradient(use_prefix):
    rng = np.random.default_rng(2)
    q, k, v = leaf(rng, 6, 4), leaf(rng, 6, 4), leaf(rng, 6, 4)
    w = rng.standard_normal((6, 4))
    kw = {"prefix": 4} if use_prefix else {}
    check(lambda: de.total(de.mul(de.multi_head_attention(q, k, v, 2, **kw), w)), {"q": q, "k": k, "v": v})


def test_attention_matches_explicit_softmax():
    rng = np.random.default_rng(3)
    n, d, H = 7, 6, 3
    q, k, v = (Tensor(rng.standard_normal((n, d))) for _ in range(3))
    out = de.multi_head_attention(q, k, v, H).values
    dk = d // H
    for h in range(H):
        sl = slice(h * dk, (h + 1) * dk)
        s = q.values[:, sl] @ k.values[:, sl].T / math.sqrt(dk)
        a = np.exp(s - s.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        np.testing.assert_allclose(out[:, sl], a @ v.values[:, sl], atol=1e-12)


def test_prefix_mask_equals_explicit_mask():
    rng = np.random.default_rng(4)
    n, p = 9, 5
    mask = np.zeros((n, n), dtype=bool)
    mask[:p, :p] = True
    mask[p:, :p] = True
    mask[p:, p:] = np.tril(np.ones((n - p, n - p), dtype=bool))
    q, k, v = leaf(rng, n, 4), leaf(rng, n, 4), leaf(rng, n, 4)
    w = rng.standard_normal((n, 4))
    a = de.multi_head_attention(q, k, v, 2, prefix=p).values
    b = de.multi_head_attention(q, k, v, 2, mask=mask).values
    np.testing.assert_allclose(a, b, atol=1e-13)
    ga = grad_of(lambda: de.total(de.mul(de.multi_head_attention(q, k, v, 2, prefix=p), w)), q)
    gb = grad_of(lambda: de.total(de.mul(de.multi_head_attention(q, k, v, 2, mask=mask), w)), q)
    np.testing.assert_allclose(ga, gb, atol=1e-13)


def test_float32_attention_is_close_to_float64():
    rng = np.random.default_rng(5)
    q, k, v = (Tensor(rng.standard_normal((20, 8))) for _ in range(3))
    ref = de.multi_head_attention(q, k, v, 2, prefix=12).values
    with de.attention_precision(np.float32):
        low = de.multi_head_attention(q, k, v, 2, prefix=12).values
    assert low.dtype == np.float64
    np.testing.assert_allclose(low, ref, atol=1e-5)
    # the context manager restores the default
    np.testing.assert_array_equal(de.multi_head_attention(q, k, v, 2, prefix=12).values, ref)


def test_attention_shape_errors():
    q = Tensor(np.zeros((4, 6)))
    with pytest.raises(ShapeError):
        de.multi_head_attention(q, q, q, 4)
    with pytest.raises(ShapeError):
        de.multi_head_attention(q, q, q, 2, mask=np.ones((4, 4), bool), prefix=2)
    with pytest.raises(ShapeError):
        de.matmul(q, q)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = de.mul(x, x)
    with pytest.raises(NonScalarLoss):
        tape.backward(y)
    with pytest.raises(NonScalarLoss):
        y.item()


def test_gradients_accumulate_for_reused_inputs():
    x = Tensor(np.array([[2.0, -1.0]]), requires_grad=True)
    g = grad_of(lambda: de.total(de.mul(x, de.mul(x, x))), x)
    np.testing.assert_allclose(g, 3 * x.values**2)


def test_frozen_tensors_get_no_gradient():
    rng = np.random.default_rng(6)
    w = Tensor(rng.standard_normal((3, 3)))
    x = leaf(rng, 2, 3)
    grad_of(lambda: de.total(de.matmul(x, w)), x)
    assert w.grad is None


def test_closed_form_infonce_gradient_matches_autodiff():
    rng = np.random.default_rng(7)
    anchor, cands, pos, tau = rng.standard_normal(5), rng.standard_normal((6, 5)), 3, 0.2
    e = Tensor(anchor[None, :], requires_grad=True)

    def f():
        u = de.l2_normalize(e)
        c = de.l2_normalize(Tensor(cands))
        logits = de.scale(de.matmul(u, de.transpose(c)), 1 / tau)
        return de.neg(de.mean(de.take_along_rows(de.log_softmax(logits), [[pos]])))

    g = grad_of(f, e)[0]
    np.testing.assert_allclose(de.closed_form_infonce_grad(anchor, cands, pos, tau), g, atol=1e-12)
    with pytest.raises(InvalidTemperature):
        de.closed_form_infonce_grad(anchor, cands, pos, 0.0)


def test_finite_diff_check_flags_wrong_sign():
    rng = np.random.default_rng(8)
    a = leaf(rng, 3, 3)
    f = lambda: de.total(de.mul(a, a))  # noqa: E731
    ok = de.finite_diff_check(f, {"a": a})
    bad = de.finite_diff_check(f, {"a": a}, analytic_hook=lambda n, g: -g)
    assert ok.passed(1e-6)
    assert not bad.passed(1e-4)
    with pytest.raises(ValueError):
        de.finite_diff_check(f, {"a": a}, h=0.0)

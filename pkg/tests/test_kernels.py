"""Backend agreement: the numba kernels must match the pure-numpy fallback."""

import numpy as np
import pytest

from molrl import kernels

pytestmark = pytest.mark.skipif(
    kernels.numba_impl is None, reason="numba not available; single backend only"
)

IMPLS = lambda: (kernels.numpy_impl, kernels.numba_impl)


def _tol(dtype):
    return dict(rtol=1e-10, atol=1e-12) if dtype == np.float64 else dict(rtol=1e-4, atol=1e-6)


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_softmax_and_log_softmax_agree(dtype):
    rng = np.random.default_rng(0)
    x = (rng.standard_normal((17, 23)) * 3).astype(dtype)
    a, b = IMPLS()
    np.testing.assert_allclose(a.softmax(x), b.softmax(x), **_tol(dtype))
    np.testing.assert_allclose(a.log_softmax(x), b.log_softmax(x), **_tol(dtype))


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_ce_rows_agree(dtype):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((13, 9)).astype(dtype)
    t = rng.integers(0, 9, 13)
    w = rng.random(13).astype(np.float64)
    a, b = IMPLS()
    ta, da = a.ce_rows(x, t, w)
    tb, db = b.ce_rows(x, t.astype(np.int64), w)
    np.testing.assert_allclose(ta, tb, **_tol(dtype))
    np.testing.assert_allclose(da, db, **_tol(dtype))


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_kl_rows_agree(dtype):
    rng = np.random.default_rng(2)
    ref = rng.standard_normal((11, 7)).astype(dtype)
    a, b = IMPLS()
    ref_logp = a.log_softmax(ref)
    x = rng.standard_normal((11, 7)).astype(dtype)
    w = rng.random(11).astype(np.float64)
    ka, da = a.kl_rows(ref_logp, x, w)
    kb, db = b.kl_rows(ref_logp, x, w)
    np.testing.assert_allclose(ka, kb, **_tol(dtype))
    np.testing.assert_allclose(da, db, **_tol(dtype))


def test_logp_rows_agree():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((10, 6))
    t = rng.integers(0, 6, 10)
    a, b = IMPLS()
    np.testing.assert_allclose(a.logp_rows(x, t), b.logp_rows(x, t.astype(np.int64)), rtol=1e-12)


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_attention_forward_backward_agree(dtype):
    rng = np.random.default_rng(4)
    shape = (2, 3, 7, 4)
    q, k, v = (rng.standard_normal(shape).astype(dtype) for _ in range(3))
    a, b = IMPLS()
    oa, pa = a.attn_forward(q, k, v, 0.5)
    ob, pb = b.attn_forward(q, k, v, 0.5)
    np.testing.assert_allclose(oa, ob, **_tol(dtype))
    np.testing.assert_allclose(pa, pb, **_tol(dtype))
    dout = rng.standard_normal(shape).astype(dtype)
    ga = a.attn_backward(pa, q, k, v, dout, 0.5)
    gb = b.attn_backward(pb, q, k, v, dout, 0.5)
    for x, y in zip(ga, gb):
        np.testing.assert_allclose(x, y, **_tol(dtype))


def test_attention_is_causal():
    rng = np.random.default_rng(5)
    q, k, v = (rng.standard_normal((1, 1, 6, 4)) for _ in range(3))
    for impl in IMPLS():
        out1, _ = impl.attn_forward(q, k, v, 0.5)
        v2 = v.copy()
        v2[:, :, 4:] += 100.0  # future positions must not affect position 2
        out2, _ = impl.attn_forward(q, k, v2, 0.5)
        np.testing.assert_allclose(out1[:, :, :3], out2[:, :, :3], rtol=1e-12)


def test_attn_decode_matches_forward_last_row():
    rng = np.random.default_rng(6)
    b_, h_, t_, d_ = 3, 2, 5, 4
    q, k, v = (rng.standard_normal((b_, h_, t_, d_)) for _ in range(3))
    for impl in IMPLS():
        full, _ = impl.attn_forward(q, k, v, 0.7)
        dec = impl.attn_decode(np.ascontiguousarray(q[:, :, -1]), k, v, 0.7)
        np.testing.assert_allclose(dec, full[:, :, -1], rtol=1e-10)


def test_adamw_step_agrees():
    rng = np.random.default_rng(7)
    n = 101
    args = dict(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.1, bc1=0.1, bc2=0.001)
    p0 = rng.standard_normal(n)
    g = rng.standard_normal(n)
    states = []
    for impl in IMPLS():
        p, m, v = p0.copy(), np.zeros(n), np.zeros(n)
        impl.adamw_step(p, g, m, v, args["lr"], args["beta1"], args["beta2"], args["eps"],
                        args["weight_decay"], args["bc1"], args["bc2"])
        states.append((p, m, v))
    for x, y in zip(states[0], states[1]):
        np.testing.assert_allclose(x, y, rtol=1e-12)


def test_backend_selection_exposed():
    assert kernels.BACKEND in ("numba", "numpy")
    assert kernels.log_softmax is getattr(
        kernels.numba_impl if kernels.BACKEND == "numba" else kernels.numpy_impl, "log_softmax"
    )

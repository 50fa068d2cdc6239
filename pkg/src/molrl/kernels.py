"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The active backend is chosen once at import time from the MOLRL_BACKEND
environment variable ("numba" or "numpy"). Default is numba when it is
importable, numpy otherwise. Both implementations are kept importable side
by side so tests and the benchmark can compare them.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def _np_log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    return s - lse


def _np_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _np_ce_rows(logits, targets, weights):
    """Weighted cross-entropy per row plus gradient w.r.t. logits.

    terms[n] = -w[n] * log_softmax(logits[n])[targets[n]]
    dlogits[n] = w[n] * (softmax(logits[n]) - onehot(targets[n]))
    """
    n = logits.shape[0]
    logp = _np_log_softmax(logits)
    rows = np.arange(n)
    terms = -weights * logp[rows, targets]
    dlogits = np.exp(logp) * weights[:, None]
    dlogits[rows, targets] -= weights
    return terms, dlogits


def _np_kl_rows(ref_logp, logits, weights):
    """Weighted KL(ref || model) per row plus gradient w.r.t. model logits.

    terms[n] = w[n] * sum_v exp(ref_logp[n,v]) * (ref_logp[n,v] - logp[n,v])
    dlogits[n] = w[n] * (softmax(logits[n]) - exp(ref_logp[n]))
    """
    logp = _np_log_softmax(logits)
    p_ref = np.exp(ref_logp)
    terms = weights * (p_ref * (ref_logp - logp)).sum(axis=-1)
    dlogits = (np.exp(logp) - p_ref) * weights[:, None]
    return terms, dlogits


def _np_logp_rows(logits, targets):
    logp = _np_log_softmax(logits)
    return logp[np.arange(logits.shape[0]), targets]


def _np_attn_forward(q, k, v, scale):
    """Causal attention. q,k,v: (B,H,T,D). Returns out (B,H,T,D), probs (B,H,T,T)."""
    t = q.shape[2]
    scores = np.einsum("bhid,bhjd->bhij", q, k) * scale
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores[..., mask] = -np.inf
    probs = _np_softmax(scores)
    out = np.einsum("bhij,bhjd->bhid", probs, v)
    return out, probs


def _np_attn_backward(probs, q, k, v, dout, scale):
    dv = np.einsum("bhij,bhid->bhjd", probs, dout)
    dprobs = np.einsum("bhid,bhjd->bhij", dout, v)
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    dscores = probs * (dprobs - inner)
    dq = np.einsum("bhij,bhjd->bhid", dscores, k) * scale
    dk = np.einsum("bhij,bhid->bhjd", dscores, q) * scale
    return dq, dk, dv


def _np_attn_decode(q, kcache, vcache, scale):
    """Single-position attention against a cache. q: (B,H,D), caches: (B,H,T,D)."""
    scores = np.einsum("bhd,bhtd->bht", q, kcache) * scale
    probs = _np_softmax(scores)
    return np.einsum("bht,bhtd->bhd", probs, vcache)


def _np_adamw_step(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * weight_decay * p
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


numpy_impl = SimpleNamespace(
    name="numpy",
    log_softmax=_np_log_softmax,
    softmax=_np_softmax,
    ce_rows=_np_ce_rows,
    kl_rows=_np_kl_rows,
    logp_rows=_np_logp_rows,
    attn_forward=_np_attn_forward,
    attn_backward=_np_attn_backward,
    attn_decode=_np_attn_decode,
    adamw_step=_np_adamw_step,
)

# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

numba_impl = None

try:
    from numba import njit

    _JIT = dict(cache=True, fastmath=False)  # fastmath off: keep runs reproducible

    @njit(**_JIT)
    def _nb_log_softmax(x):
        n, vsz = x.shape
        out = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, vsz):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(vsz):
                s += np.exp(x[i, j] - m)
            lse = m + np.log(s)
            for j in range(vsz):
                out[i, j] = x[i, j] - lse
        return out

    @njit(**_JIT)
    def _nb_softmax(x):
        n, vsz = x.shape
        out = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, vsz):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(vsz):
                e = np.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(vsz):
                out[i, j] /= s
        return out

    @njit(**_JIT)
    def _nb_ce_rows(logits, targets, weights):
        n, vsz = logits.shape
        terms = np.empty(n, dtype=logits.dtype)
        dlogits = np.empty_like(logits)
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, vsz):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(vsz):
                s += np.exp(logits[i, j] - m)
            lse = m + np.log(s)
            w = weights[i]
            t = targets[i]
            terms[i] = -w * (logits[i, t] - lse)
            for j in range(vsz):
                dlogits[i, j] = w * np.exp(logits[i, j] - lse)
            dlogits[i, t] -= w
        return terms, dlogits

    @njit(**_JIT)
    def _nb_kl_rows(ref_logp, logits, weights):
        n, vsz = logits.shape
        terms = np.empty(n, dtype=logits.dtype)
        dlogits = np.empty_like(logits)
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, vsz):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(vsz):
                s += np.exp(logits[i, j] - m)
            lse = m + np.log(s)
            w = weights[i]
            acc = 0.0
            for j in range(vsz):
                p_ref = np.exp(ref_logp[i, j])
                logp = logits[i, j] - lse
                acc += p_ref * (ref_logp[i, j] - logp)
                dlogits[i, j] = w * (np.exp(logp) - p_ref)
            terms[i] = w * acc
        return terms, dlogits

    @njit(**_JIT)
    def _nb_logp_rows(logits, targets):
        n, vsz = logits.shape
        out = np.empty(n, dtype=logits.dtype)
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, vsz):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(vsz):
                s += np.exp(logits[i, j] - m)
            out[i] = logits[i, targets[i]] - (m + np.log(s))
        return out

    @njit(**_JIT)
    def _nb_attn_forward(q, k, v, scale):
        b, h, t, d = q.shape
        out = np.zeros((b, h, t, d), dtype=q.dtype)
        probs = np.zeros((b, h, t, t), dtype=q.dtype)
        for bi in range(b):
            for hi in range(h):
                for i in range(t):
                    m = -np.inf
                    for j in range(i + 1):
                        s = 0.0
                        for di in range(d):
                            s += q[bi, hi, i, di] * k[bi, hi, j, di]
                        s *= scale
                        probs[bi, hi, i, j] = s
                        if s > m:
                            m = s
                    z = 0.0
                    for j in range(i + 1):
                        e = np.exp(probs[bi, hi, i, j] - m)
                        probs[bi, hi, i, j] = e
                        z += e
                    for j in range(i + 1):
                        p = probs[bi, hi, i, j] / z
                        probs[bi, hi, i, j] = p
                        for di in range(d):
                            out[bi, hi, i, di] += p * v[bi, hi, j, di]
        return out, probs

    @njit(**_JIT)
    def _nb_attn_backward(probs, q, k, v, dout, scale):
        b, h, t, d = q.shape
        dq = np.zeros_like(q)
        dk = np.zeros_like(k)
        dv = np.zeros_like(v)
        dprow = np.empty(t, dtype=q.dtype)
        for bi in range(b):
            for hi in range(h):
                for i in range(t):
                    inner = 0.0
                    for j in range(i + 1):
                        dp = 0.0
                        for di in range(d):
                            dp += dout[bi, hi, i, di] * v[bi, hi, j, di]
                            dv[bi, hi, j, di] += probs[bi, hi, i, j] * dout[bi, hi, i, di]
                        dprow[j] = dp
                        inner += dp * probs[bi, hi, i, j]
                    for j in range(i + 1):
                        ds = probs[bi, hi, i, j] * (dprow[j] - inner) * scale
                        for di in range(d):
                            dq[bi, hi, i, di] += ds * k[bi, hi, j, di]
                            dk[bi, hi, j, di] += ds * q[bi, hi, i, di]
        return dq, dk, dv

    @njit(**_JIT)
    def _nb_attn_decode(q, kcache, vcache, scale):
        b, h, d = q.shape
        t = kcache.shape[2]
        out = np.zeros((b, h, d), dtype=q.dtype)
        scores = np.empty(t, dtype=q.dtype)
        for bi in range(b):
            for hi in range(h):
                m = -np.inf
                for j in range(t):
                    s = 0.0
                    for di in range(d):
                        s += q[bi, hi, di] * kcache[bi, hi, j, di]
                    s *= scale
                    scores[j] = s
                    if s > m:
                        m = s
                z = 0.0
                for j in range(t):
                    e = np.exp(scores[j] - m)
                    scores[j] = e
                    z += e
                for j in range(t):
                    p = scores[j] / z
                    for di in range(d):
                        out[bi, hi, di] += p * vcache[bi, hi, j, di]
        return out

    @njit(**_JIT)
    def _nb_adamw_step(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
        n = p.shape[0]
        for i in range(n):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            p[i] -= lr * weight_decay * p[i]
            p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)

    numba_impl = SimpleNamespace(
        name="numba",
        log_softmax=_nb_log_softmax,
        softmax=_nb_softmax,
        ce_rows=_nb_ce_rows,
        kl_rows=_nb_kl_rows,
        logp_rows=_nb_logp_rows,
        attn_forward=_nb_attn_forward,
        attn_backward=_nb_attn_backward,
        attn_decode=_nb_attn_decode,
        adamw_step=_nb_adamw_step,
    )
except ImportError:  # pragma: no cover - exercised only without numba installed
    numba_impl = None


def _select_backend() -> SimpleNamespace:
    requested = os.environ.get("MOLRL_BACKEND", "").strip().lower()
    if requested == "numpy":
        return numpy_impl
    if requested == "numba":
        if numba_impl is None:
            raise RuntimeError("MOLRL_BACKEND=numba requested but numba is not importable")
        return numba_impl
    if requested not in ("", "auto"):
        raise RuntimeError(f"unknown MOLRL_BACKEND value: {requested!r}")
    return numba_impl if numba_impl is not None else numpy_impl


_active = _select_backend()

BACKEND = _active.name
log_softmax = _active.log_softmax
softmax = _active.softmax
ce_rows = _active.ce_rows
kl_rows = _active.kl_rows
logp_rows = _active.logp_rows
attn_forward = _active.attn_forward
attn_backward = _active.attn_backward
attn_decode = _active.attn_decode
adamw_step = _active.adamw_step

"""Tiny decoder-only autoregressive model with exact, hand-derived gradients.

Pure numpy parameter tensors; the attention and softmax inner loops go
through molrl.kernels, which carries the numba/numpy backend switch. The
backward pass consumes a cache captured during the forward pass, so any
scalar loss expressed as a gradient w.r.t. the logits gets exact parameter
gradients that finite differences can verify.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .tokenizer import EOS, SPECIAL_TOKENS

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
DEFAULT_EOS_ID = SPECIAL_TOKENS.index(EOS)


class SequenceTooLong(ValueError):
    pass


class NonFiniteGradient(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_length: int = 512
    layer_count: int = 2
    model_width: int = 64
    head_count: int = 4
    ff_width: int = 256
    param_seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.model_width % self.head_count != 0:
            raise ValueError("model_width must be divisible by head_count")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def head_dim(self) -> int:
        return self.model_width // self.head_count

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "context_length": self.context_length,
            "layer_count": self.layer_count,
            "model_width": self.model_width,
            "head_count": self.head_count,
            "ff_width": self.ff_width,
            "param_seed": self.param_seed,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 0.6
    top_p: float = 0.95
    top_k: int = 20
    max_new_tokens: int = 96
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class SampleResult:
    tokens: List[int]
    truncated: bool
    old_logps: Optional[np.ndarray] = None  # raw model log-probs of emitted tokens


def init_params(cfg: ModelConfig) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.param_seed)
    dt = cfg.np_dtype()
    d, ff, v = cfg.model_width, cfg.ff_width, cfg.vocab_size

    def normal(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(dt)

    params: Dict[str, np.ndarray] = {
        "tok_emb": normal(v, d),
        "pos_emb": normal(cfg.context_length, d),
        "lnf.g": np.ones(d, dtype=dt),
        "lnf.b": np.zeros(d, dtype=dt),
        "head.w": normal(d, v),
        "head.b": np.zeros(v, dtype=dt),
    }
    for layer in range(cfg.layer_count):
        p = f"l{layer}."
        params[p + "ln1.g"] = np.ones(d, dtype=dt)
        params[p + "ln1.b"] = np.zeros(d, dtype=dt)
        params[p + "attn.wqkv"] = normal(d, 3 * d)
        params[p + "attn.bqkv"] = np.zeros(3 * d, dtype=dt)
        params[p + "attn.wo"] = normal(d, d) / math.sqrt(2 * cfg.layer_count)
        params[p + "attn.bo"] = np.zeros(d, dtype=dt)
        params[p + "ln2.g"] = np.ones(d, dtype=dt)
        params[p + "ln2.b"] = np.zeros(d, dtype=dt)
        params[p + "mlp.w1"] = normal(d, ff)
        params[p + "mlp.b1"] = np.zeros(ff, dtype=dt)
        params[p + "mlp.w2"] = normal(ff, d) / math.sqrt(2 * cfg.layer_count)
        params[p + "mlp.b2"] = np.zeros(d, dtype=dt)
    return params


def param_count(params: Dict[str, np.ndarray]) -> int:
    return int(sum(a.size for a in params.values()))


# ---------------------------------------------------------------------------
# layer primitives (vectorized numpy; hot kernels live in molrl.kernels)
# ---------------------------------------------------------------------------


def _layernorm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy, cache, g):
    xhat, inv = cache
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dg, db


def _gelu_forward(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def _gelu_backward(dy, x, t):
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


class Model:
    def __init__(self, cfg: ModelConfig, params: Dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig) -> "Model":
        return cls(cfg, init_params(cfg))

    # -- forward / backward ------------------------------------------------

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.shape[1] > self.cfg.context_length:
            raise SequenceTooLong(
                f"sequence length {tokens.shape[1]} exceeds context {self.cfg.context_length}"
            )
        return tokens.astype(np.int64)

    def forward(self, tokens: np.ndarray, want_cache: bool = False):
        """Logits (B, T, V); optionally also the backward-pass cache."""
        p = self.params
        cfg = self.cfg
        tokens = self._check_tokens(tokens)
        bsz, t = tokens.shape
        h_count, hd = cfg.head_count, cfg.head_dim
        scale = 1.0 / math.sqrt(hd)

        x = p["tok_emb"][tokens] + p["pos_emb"][:t]
        cache: dict = {"tokens": tokens, "layers": []}
        for layer in range(cfg.layer_count):
            pre = f"l{layer}."
            lc: dict = {"x_in": x}
            h, lc["ln1"] = _layernorm_forward(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            lc["h"] = h
            qkv = h @ p[pre + "attn.wqkv"] + p[pre + "attn.bqkv"]
            q, k, v = np.split(qkv, 3, axis=-1)
            q = np.ascontiguousarray(q.reshape(bsz, t, h_count, hd).transpose(0, 2, 1, 3))
            k = np.ascontiguousarray(k.reshape(bsz, t, h_count, hd).transpose(0, 2, 1, 3))
            v = np.ascontiguousarray(v.reshape(bsz, t, h_count, hd).transpose(0, 2, 1, 3))
            att, probs = kernels.attn_forward(q, k, v, scale)
            lc.update(q=q, k=k, v=v, probs=probs)
            merged = att.transpose(0, 2, 1, 3).reshape(bsz, t, cfg.model_width)
            lc["merged"] = merged
            x = x + merged @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
            lc["x_mid"] = x
            h2, lc["ln2"] = _layernorm_forward(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            lc["h2"] = h2
            z1 = h2 @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]
            g1, tanh_c = _gelu_forward(z1)
            lc.update(z1=z1, g1=g1, tanh=tanh_c)
            x = x + g1 @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
            cache["layers"].append(lc)
        hf, lnf_cache = _layernorm_forward(x, p["lnf.g"], p["lnf.b"])
        cache["hf"] = hf
        cache["lnf"] = lnf_cache
        logits = hf @ p["head.w"] + p["head.b"]
        if want_cache:
            return logits, cache
        return logits

    def backward(self, cache: dict, dlogits: np.ndarray) -> Dict[str, np.ndarray]:
        """Parameter gradients from d(loss)/d(logits)."""
        p = self.params
        cfg = self.cfg
        tokens = cache["tokens"]
        bsz, t = tokens.shape
        d = cfg.model_width
        h_count, hd = cfg.head_count, cfg.head_dim
        scale = 1.0 / math.sqrt(hd)
        grads: Dict[str, np.ndarray] = {}

        hf = cache["hf"]
        grads["head.w"] = hf.reshape(-1, d).T @ dlogits.reshape(-1, cfg.vocab_size)
        grads["head.b"] = dlogits.reshape(-1, cfg.vocab_size).sum(axis=0)
        dhf = dlogits @ p["head.w"].T
        dx, grads["lnf.g"], grads["lnf.b"] = _layernorm_backward(dhf, cache["lnf"], p["lnf.g"])

        for layer in reversed(range(cfg.layer_count)):
            pre = f"l{layer}."
            lc = cache["layers"][layer]
            # mlp block
            dz2 = dx
            grads[pre + "mlp.w2"] = lc["g1"].reshape(-1, cfg.ff_width).T @ dz2.reshape(-1, d)
            grads[pre + "mlp.b2"] = dz2.reshape(-1, d).sum(axis=0)
            dg1 = dz2 @ p[pre + "mlp.w2"].T
            dz1 = _gelu_backward(dg1, lc["z1"], lc["tanh"])
            grads[pre + "mlp.w1"] = lc["h2"].reshape(-1, d).T @ dz1.reshape(-1, cfg.ff_width)
            grads[pre + "mlp.b1"] = dz1.reshape(-1, cfg.ff_width).sum(axis=0)
            dh2 = dz1 @ p[pre + "mlp.w1"].T
            dx_ln2, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _layernorm_backward(
                dh2, lc["ln2"], p[pre + "ln2.g"]
            )
            dx = dx + dx_ln2
            # attention block
            dproj = dx
            grads[pre + "attn.wo"] = lc["merged"].reshape(-1, d).T @ dproj.reshape(-1, d)
            grads[pre + "attn.bo"] = dproj.reshape(-1, d).sum(axis=0)
            dmerged = dproj @ p[pre + "attn.wo"].T
            datt = np.ascontiguousarray(
                dmerged.reshape(bsz, t, h_count, hd).transpose(0, 2, 1, 3)
            )
            dq, dk, dv = kernels.attn_backward(lc["probs"], lc["q"], lc["k"], lc["v"], datt, scale)
            dqkv = np.concatenate(
                [
                    dq.transpose(0, 2, 1, 3).reshape(bsz, t, d),
                    dk.transpose(0, 2, 1, 3).reshape(bsz, t, d),
                    dv.transpose(0, 2, 1, 3).reshape(bsz, t, d),
                ],
                axis=-1,
            )
            grads[pre + "attn.wqkv"] = lc["h"].reshape(-1, d).T @ dqkv.reshape(-1, 3 * d)
            grads[pre + "attn.bqkv"] = dqkv.reshape(-1, 3 * d).sum(axis=0)
            dh = dqkv @ p[pre + "attn.wqkv"].T
            dx_ln1, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _layernorm_backward(
                dh, lc["ln1"], p[pre + "ln1.g"]
            )
            dx = dx + dx_ln1

        grads["pos_emb"] = np.zeros_like(p["pos_emb"])
        grads["pos_emb"][:t] = dx.sum(axis=0)
        grads["tok_emb"] = np.zeros_like(p["tok_emb"])
        np.add.at(grads["tok_emb"], tokens.reshape(-1), dx.reshape(-1, d))
        return grads

    # -- spec-facing read operations ----------------------------------------

    def log_prob_table(self, tokens: np.ndarray) -> np.ndarray:
        """Per-position next-token log-probability rows (normalized)."""
        logits = self.forward(tokens)
        shape = logits.shape
        table = kernels.log_softmax(np.ascontiguousarray(logits.reshape(-1, shape[-1])))
        return table.reshape(shape)

    def sequence_log_probs(self, tokens: Sequence[int], mask: Optional[np.ndarray] = None) -> np.ndarray:
        """Log-probability of each realized token given its prefix.

        Position 0 has no prefix and is fixed at 0. When a mask is given,
        unmasked positions are zeroed so the sum is the masked-span
        log-likelihood.
        """
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.ndim != 1:
            raise ValueError("sequence_log_probs expects a single sequence")
        table = self.log_prob_table(arr)[0]
        out = np.zeros(len(arr), dtype=table.dtype)
        if len(arr) > 1:
            out[1:] = table[np.arange(len(arr) - 1), arr[1:]]
        if mask is not None:
            out = out * np.asarray(mask, dtype=table.dtype)
        return out


def grad(
    model: Model,
    loss_fn: Callable[[np.ndarray, dict], Tuple[float, np.ndarray]],
    batch: dict,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Exact gradients of a scalar loss defined through the logits.

    loss_fn(logits, batch) must return (loss_value, dloss_dlogits). Raises
    NonFiniteGradient when anything non-finite shows up, aborting the step.
    """
    logits, cache = model.forward(batch["tokens"], want_cache=True)
    loss, dlogits = loss_fn(logits, batch)
    if not np.isfinite(loss):
        raise NonFiniteGradient(f"non-finite loss {loss}")
    grads = model.backward(cache, dlogits.astype(logits.dtype))
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    return float(loss), grads


# ---------------------------------------------------------------------------
# sampling (incremental decode with an in-call key/value cache)
# ---------------------------------------------------------------------------


class _DecodeState:
    """Per-call cache; rows share one prompt so positions advance together."""

    def __init__(self, model: Model, rows: int, capacity: int):
        cfg = model.cfg
        dt = cfg.np_dtype()
        self.k = [
            np.zeros((rows, cfg.head_count, capacity, cfg.head_dim), dtype=dt)
            for _ in range(cfg.layer_count)
        ]
        self.v = [
            np.zeros((rows, cfg.head_count, capacity, cfg.head_dim), dtype=dt)
            for _ in range(cfg.layer_count)
        ]
        self.length = 0


def _prefill(model: Model, prompt: np.ndarray, rows: int, capacity: int):
    """Run the prompt once, broadcast its key/value cache to all rows."""
    cfg = model.cfg
    logits, cache = model.forward(prompt[None, :], want_cache=True)
    state = _DecodeState(model, rows, capacity)
    t = len(prompt)
    for layer in range(cfg.layer_count):
        lc = cache["layers"][layer]
        state.k[layer][:, :, :t] = lc["k"][0]
        state.v[layer][:, :, :t] = lc["v"][0]
    state.length = t
    return logits[0, -1], state


def _decode_step(model: Model, token_ids: np.ndarray, state: _DecodeState) -> np.ndarray:
    """One incremental step for every row; returns raw logits (rows, V)."""
    p = model.params
    cfg = model.cfg
    rows = token_ids.shape[0]
    h_count, hd = cfg.head_count, cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    pos = state.length

    x = p["tok_emb"][token_ids] + p["pos_emb"][pos]
    for layer in range(cfg.layer_count):
        pre = f"l{layer}."
        h, _ = _layernorm_forward(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        qkv = h @ p[pre + "attn.wqkv"] + p[pre + "attn.bqkv"]
        q, k, v = np.split(qkv, 3, axis=-1)
        q = np.ascontiguousarray(q.reshape(rows, h_count, hd))
        state.k[layer][:, :, pos] = k.reshape(rows, h_count, hd)
        state.v[layer][:, :, pos] = v.reshape(rows, h_count, hd)
        att = kernels.attn_decode(
            q,
            np.ascontiguousarray(state.k[layer][:, :, : pos + 1]),
            np.ascontiguousarray(state.v[layer][:, :, : pos + 1]),
            scale,
        )
        x = x + att.reshape(rows, cfg.model_width) @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
        h2, _ = _layernorm_forward(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        z1 = h2 @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]
        g1, _ = _gelu_forward(z1)
        x = x + g1 @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
    hf, _ = _layernorm_forward(x, p["lnf.g"], p["lnf.b"])
    state.length = pos + 1
    return hf @ p["head.w"] + p["head.b"]


def _pick_token(logits_row: np.ndarray, cfg: SamplingConfig, rng: np.random.Generator) -> int:
    if cfg.temperature == 0.0 or cfg.top_k == 1:
        return int(np.argmax(logits_row))
    z = logits_row / cfg.temperature
    v = z.shape[0]
    k = min(cfg.top_k, v)
    if k < v:
        cutoff = np.partition(z, v - k)[v - k]
        z = np.where(z >= cutoff, z, -np.inf)
    probs = kernels.softmax(np.ascontiguousarray(z[None, :]))[0]
    if cfg.top_p < 1.0:
        order = np.argsort(-probs, kind="stable")
        csum = np.cumsum(probs[order])
        keep = int(np.searchsorted(csum, cfg.top_p) + 1)
        mask = np.zeros(v, dtype=bool)
        mask[order[:keep]] = True
        probs = np.where(mask, probs, 0.0)
        probs = probs / probs.sum()
    cdf = np.cumsum(probs)
    # side="right" against u scaled into the cdf range never lands on a
    # zero-probability entry
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), v - 1))


def decode_batch(
    model: Model,
    prompt: Sequence[int],
    cfg: SamplingConfig,
    eos_id: int,
    rows: int = 1,
    row_seeds: Optional[Sequence[int]] = None,
) -> List[SampleResult]:
    """Sample `rows` continuations of one prompt with independent rng streams."""
    prompt = np.asarray(prompt, dtype=np.int64)
    if len(prompt) >= model.cfg.context_length:
        raise SequenceTooLong(
            f"prompt length {len(prompt)} leaves no room in context {model.cfg.context_length}"
        )
    budget = min(cfg.max_new_tokens, model.cfg.context_length - len(prompt))
    if row_seeds is None:
        row_seeds = [cfg.seed + i for i in range(rows)]
    rngs = [np.random.default_rng(s) for s in row_seeds]

    last_logits, state = _prefill(model, prompt, rows, len(prompt) + budget)
    logits = np.repeat(last_logits[None, :], rows, axis=0)

    emitted: List[List[int]] = [[] for _ in range(rows)]
    old_logps: List[List[float]] = [[] for _ in range(rows)]
    active = np.ones(rows, dtype=bool)
    for _ in range(budget):
        flat = np.ascontiguousarray(logits)
        raw_logp = kernels.log_softmax(flat)
        chosen = np.zeros(rows, dtype=np.int64)
        for r in range(rows):
            if not active[r]:
                continue
            tok = _pick_token(logits[r], cfg, rngs[r])
            chosen[r] = tok
            emitted[r].append(tok)
            old_logps[r].append(float(raw_logp[r, tok]))
            if tok == eos_id:
                active[r] = False
        if not active.any():
            break
        logits = _decode_step(model, chosen, state)
    results = []
    for r in range(rows):
        toks = emitted[r]
        stopped = bool(toks and toks[-1] == eos_id)
        results.append(
            SampleResult(
                tokens=toks,
                truncated=not stopped,
                old_logps=np.asarray(old_logps[r], dtype=np.float64),
            )
        )
    return results


def sample(
    model: Model, prompt: Sequence[int], cfg: SamplingConfig, eos_id: int = DEFAULT_EOS_ID
) -> SampleResult:
    """Pure function of (model, prompt, config): seeded truncated sampling."""
    return decode_batch(model, prompt, cfg, eos_id=eos_id, rows=1, row_seeds=[cfg.seed])[0]

"""Adaptive-moment optimizer with decoupled weight decay and global-norm clipping."""

from __future__ import annotations

from typing import Dict

import numpy as np

from . import kernels

# parameters that take no weight decay (biases, gains, embeddings stay decayed
# off to keep tiny models stable)
_NO_DECAY_SUFFIXES = (".b", ".g", ".bqkv", ".bo", ".b1", ".b2")


def _decays(name: str) -> bool:
    if name in ("tok_emb", "pos_emb"):
        return True
    return not name.endswith(_NO_DECAY_SUFFIXES)


class AdamW:
    def __init__(
        self,
        params: Dict[str, np.ndarray],
        lr: float = 5e-5,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.1,
        grad_clip: float = 1.0,
    ):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def state_dict(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {"__t": np.asarray([float(self.t)])}
        for k in self.m:
            out[f"m:{k}"] = self.m[k]
            out[f"v:{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.t = int(state["__t"][0])
        for k in self.m:
            self.m[k] = state[f"m:{k}"].copy()
            self.v[k] = state[f"v:{k}"].copy()

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> float:
        """Apply one update in place; returns the pre-clip global grad norm."""
        sq = 0.0
        for g in grads.values():
            sq += float((g.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(sq))
        scale = 1.0
        if self.grad_clip > 0 and norm > self.grad_clip:
            scale = self.grad_clip / norm
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if scale != 1.0:
                g = g * scale
            wd = self.weight_decay if _decays(name) else 0.0
            kernels.adamw_step(
                p.reshape(-1),
                np.ascontiguousarray(g.reshape(-1)).astype(p.dtype),
                self.m[name].reshape(-1),
                self.v[name].reshape(-1),
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                wd,
                bc1,
                bc2,
            )
        return norm

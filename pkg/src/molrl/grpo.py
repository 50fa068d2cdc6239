"""Group-relative policy optimization post-training.

Per prompt, a group of completions is sampled, scored by the environment,
and turned into group-relative advantages. Two flavors are supported: the
std-normalized form ("grpo") and the debiased form that drops both the std
normalization and the per-completion length normalization ("dr-grpo").
One optimizer update happens per rollout batch, keeping the recorded
behavior-policy log-probabilities honest.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .checkpoint import Checkpoint, make_provenance, params_hash
from .corpus import ROLE_MARKER
from .env import RewardScheme, Task, evaluate_output, SYSTEM_PROMPT
from .model import Model, NonFiniteGradient, SamplingConfig, decode_batch
from .optim import AdamW
from .tokenizer import Tokenizer


class PolicyOptVariant(str, Enum):
    GRPO = "grpo"
    DR_GRPO = "dr-grpo"


class ShapeMismatch(ValueError):
    pass


@dataclass
class RlConfig:
    group_size: int = 8
    temperature: float = 0.9
    top_p: float = 1.0
    top_k: int = 0  # 0 means the full vocabulary
    max_completion_length: int = 256
    clip_ratio: float = 0.2
    adv_eps: float = 1e-4
    kl_beta: float = 0.0
    steps: int = 200
    batch_tasks: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.clip_ratio <= 0:
            raise ValueError("clip_ratio must be positive")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")


@dataclass
class RolloutGroup:
    task_id: str
    prompt_tokens: np.ndarray
    completions: List[np.ndarray]
    rewards: np.ndarray
    advantages: np.ndarray
    old_logps: List[np.ndarray]
    truncated: List[bool] = field(default_factory=list)


def advantages(rewards: Sequence[float], variant: PolicyOptVariant, eps: float = 1e-4) -> np.ndarray:
    """Group-relative advantages from this group's rewards only.

    grpo: (r - mean) / (population std + eps); dr-grpo: r - mean.
    Zero-variance groups come out as exact zeros under both variants.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ShapeMismatch("rewards must be a non-empty vector")
    if np.all(r == r[0]):
        # identical rewards carry no signal; avoids mean-rounding dust too
        return np.zeros_like(r)
    centered = r - r.mean()
    if variant == PolicyOptVariant.DR_GRPO:
        return centered
    denom = r.std() + eps
    if denom == 0.0:
        return np.zeros_like(r)
    return centered / denom


def task_prompt_tokens(task: Task, tok: Tokenizer) -> np.ndarray:
    """Generation prefix: system message, task prompt, open assistant turn."""
    ids = [tok.bos_id, tok.special_id(ROLE_MARKER["system"])]
    ids += tok.encode(SYSTEM_PROMPT)
    ids.append(tok.eos_id)
    ids.append(tok.special_id(ROLE_MARKER["user"]))
    ids += tok.encode(task.prompt)
    ids.append(tok.eos_id)
    ids.append(tok.special_id(ROLE_MARKER["assistant"]))
    return np.asarray(ids, dtype=np.int64)


def _group_seeds(master_seed: int, task_id: str, step: int, g: int) -> List[int]:
    ss = np.random.SeedSequence([master_seed, zlib.crc32(task_id.encode()), step])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(g)]


def generate_group(
    model: Model,
    task: Task,
    cfg: RlConfig,
    tok: Tokenizer,
    scheme: RewardScheme = RewardScheme.MULTI_VALUE,
    variant: PolicyOptVariant = PolicyOptVariant.GRPO,
    step: int = 0,
) -> RolloutGroup:
    """Sample G completions with distinct derived seeds, score them, and
    attach group-relative advantages and behavior-policy log-probs."""
    prompt = task_prompt_tokens(task, tok)
    sampling = SamplingConfig(
        temperature=cfg.temperature,
        top_p=cfg.top_p,
        top_k=cfg.top_k if cfg.top_k >= 1 else model.cfg.vocab_size,
        max_new_tokens=cfg.max_completion_length,
        seed=cfg.seed,
    )
    seeds = _group_seeds(cfg.seed, task.task_id, step, cfg.group_size)
    results = decode_batch(
        model, prompt, sampling, eos_id=tok.eos_id, rows=cfg.group_size, row_seeds=seeds
    )
    completions = [np.asarray(r.tokens, dtype=np.int64) for r in results]
    rewards = np.zeros(cfg.group_size, dtype=np.float64)
    for i, r in enumerate(results):
        text = tok.decode(r.tokens)
        rewards[i], _ = evaluate_output(text, task.ground_truth, scheme)
    return RolloutGroup(
        task_id=task.task_id,
        prompt_tokens=prompt,
        completions=completions,
        rewards=rewards,
        advantages=advantages(rewards, variant, cfg.adv_eps),
        old_logps=[r.old_logps for r in results],
        truncated=[r.truncated for r in results],
    )


# ---------------------------------------------------------------------------
# clipped surrogate objective
# ---------------------------------------------------------------------------


def _policy_terms(
    new_logps: np.ndarray,
    old_logps: np.ndarray,
    adv: np.ndarray,
    mask: np.ndarray,
    variant: PolicyOptVariant,
    cfg: RlConfig,
    ref_logps: Optional[np.ndarray] = None,
) -> Tuple[float, np.ndarray, float]:
    """Loss, d(loss)/d(new_logps), and the clipped-token fraction.

    Aggregation: grpo averages tokens within each completion then averages
    completions; dr-grpo divides each completion's token sum by the constant
    max completion length, removing the per-length normalization.
    """
    if new_logps.shape != old_logps.shape or new_logps.shape != mask.shape:
        raise ShapeMismatch("per-token log-prob arrays must share one shape")
    n = new_logps.shape[0]
    if adv.shape != (n,):
        raise ShapeMismatch("advantages must align with completions")
    mask = mask.astype(np.float64)
    tok_counts = mask.sum(axis=1)
    if variant == PolicyOptVariant.GRPO:
        denom = np.where(tok_counts > 0, tok_counts, 1.0)
    else:
        denom = np.full(n, float(cfg.max_completion_length))
    agg_w = mask / (denom[:, None] * n)

    rho = np.exp(new_logps - old_logps)
    t_unclipped = rho * adv[:, None]
    t_clipped = np.clip(rho, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * adv[:, None]
    take_unclipped = t_unclipped <= t_clipped
    term = np.where(take_unclipped, t_unclipped, t_clipped)
    loss = -float((term * agg_w).sum())
    dnew = -np.where(take_unclipped, t_unclipped, 0.0) * agg_w

    masked_total = mask.sum()
    clipped = float(((~take_unclipped) * mask).sum() / masked_total) if masked_total else 0.0

    if cfg.kl_beta > 0.0:
        if ref_logps is None:
            raise ValueError("kl_beta > 0 needs reference log-probs")
        if ref_logps.shape != new_logps.shape:
            raise ShapeMismatch("reference log-probs must match new log-probs")
        delta = ref_logps - new_logps
        k3 = np.exp(delta) - delta - 1.0
        loss += cfg.kl_beta * float((k3 * agg_w).sum())
        dnew = dnew + cfg.kl_beta * (1.0 - np.exp(delta)) * agg_w
    return loss, dnew, clipped


def policy_loss(
    new_logps: Sequence[np.ndarray],
    old_logps: Sequence[np.ndarray],
    adv: Sequence[float],
    variant: PolicyOptVariant,
    cfg: RlConfig,
    ref_logps: Optional[Sequence[np.ndarray]] = None,
) -> float:
    """Clipped surrogate loss over ragged per-completion log-prob lists."""
    if len(new_logps) != len(old_logps) or len(new_logps) != len(adv):
        raise ShapeMismatch("completion counts disagree")
    n = len(new_logps)
    if n == 0:
        raise ShapeMismatch("need at least one completion")
    width = max(len(a) for a in new_logps)
    new_p = np.zeros((n, width))
    old_p = np.zeros((n, width))
    mask = np.zeros((n, width))
    ref_p = np.zeros((n, width)) if ref_logps is not None else None
    for i in range(n):
        if len(new_logps[i]) != len(old_logps[i]):
            raise ShapeMismatch(f"completion {i}: new/old lengths disagree")
        w = len(new_logps[i])
        new_p[i, :w] = new_logps[i]
        old_p[i, :w] = old_logps[i]
        mask[i, :w] = 1.0
        if ref_p is not None:
            ref_p[i, :w] = ref_logps[i]
    loss, _, _ = _policy_terms(
        new_p, old_p, np.asarray(adv, dtype=np.float64), mask, variant, cfg, ref_p
    )
    return loss


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _batch_arrays(groups: Sequence[RolloutGroup], pad_id: int = 0):
    """Flatten groups into padded (N, T) token arrays plus completion masks."""
    rows = []
    for g in groups:
        for comp, old in zip(g.completions, g.old_logps):
            rows.append((g.prompt_tokens, comp, old))
    n = len(rows)
    seq_lens = [len(p) + len(c) for p, c, _ in rows]
    t = max(seq_lens)
    width = max(len(c) for _, c, _ in rows) if rows else 0
    tokens = np.full((n, t), pad_id, dtype=np.int64)
    comp_mask = np.zeros((n, width), dtype=np.float64)
    old_p = np.zeros((n, width), dtype=np.float64)
    starts = np.zeros(n, dtype=np.int64)
    for i, (p, c, old) in enumerate(rows):
        tokens[i, : len(p)] = p
        tokens[i, len(p) : len(p) + len(c)] = c
        starts[i] = len(p)
        comp_mask[i, : len(c)] = 1.0
        old_p[i, : len(c)] = old
    return tokens, starts, comp_mask, old_p, width


def _gather_new_logps(model: Model, tokens, starts, comp_mask, width, want_grad_rows=False):
    """Forward once; per-completion-token realized log-probs under the model."""
    logits, cache = model.forward(tokens, want_cache=True)
    n, t, vsz = logits.shape
    flat = np.ascontiguousarray(logits.reshape(-1, vsz))
    rows_idx = []
    targets = []
    where = []
    for i in range(n):
        length = int(comp_mask[i].sum())
        for j in range(length):
            pos = starts[i] + j
            rows_idx.append(i * t + pos - 1)
            targets.append(tokens[i, pos])
            where.append((i, j))
    rows_idx = np.asarray(rows_idx, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    picked = np.ascontiguousarray(flat[rows_idx])
    logp = kernels.logp_rows(picked, targets)
    new_p = np.zeros((n, width), dtype=np.float64)
    for k, (i, j) in enumerate(where):
        new_p[i, j] = logp[k]
    if not want_grad_rows:
        return new_p, None
    ctx = {
        "cache": cache,
        "flat_shape": (n, t, vsz),
        "rows_idx": rows_idx,
        "targets": targets,
        "where": where,
        "picked": picked,
    }
    return new_p, ctx


def _backward_from_dnew(model: Model, ctx, dnew: np.ndarray):
    n, t, vsz = ctx["flat_shape"]
    probs = kernels.softmax(ctx["picked"])
    dvals = np.asarray([dnew[i, j] for (i, j) in ctx["where"]], dtype=np.float64)
    drows = -probs * dvals[:, None]
    drows[np.arange(len(dvals)), ctx["targets"]] += dvals
    dlogits = np.zeros((n * t, vsz), dtype=model.cfg.np_dtype())
    dlogits[ctx["rows_idx"]] = drows
    return model.backward(ctx["cache"], dlogits.reshape(n, t, vsz))


def train_grpo(
    ckpt: Checkpoint,
    tasks: Sequence[Task],
    cfg: RlConfig,
    scheme: RewardScheme,
    tok: Tokenizer,
    variant: PolicyOptVariant = PolicyOptVariant.DR_GRPO,
    reference: Optional[Checkpoint] = None,
) -> Tuple[List[Tuple[int, Checkpoint]], List[dict]]:
    """Rollout, advantage, update loop; logs the per-step mean reward curve."""
    if not tasks:
        raise ValueError("need at least one task")
    work = ckpt.clone()
    model = work.model()
    ref_model = reference.model() if (reference is not None and cfg.kl_beta > 0) else None
    opt = AdamW(work.params, lr=cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    rng = np.random.default_rng(cfg.seed)
    metrics: List[dict] = []
    snapshots: List[Tuple[int, Checkpoint]] = []
    cfg_hash = work.provenance.get("config_hash", "")
    parent = params_hash(ckpt.params)

    def snapshot(step: int):
        snap = work.clone()
        snap.provenance = make_provenance(
            "grpo", step, cfg_hash, parent, variant=variant.value, scheme=scheme.value
        )
        snapshots.append((step, snap))

    if cfg.steps == 0:
        snapshot(0)
        return snapshots, metrics

    order: List[int] = []
    for step in range(1, cfg.steps + 1):
        batch: List[Task] = []
        for _ in range(min(cfg.batch_tasks, len(tasks))):
            if not order:
                order = list(rng.permutation(len(tasks)))
            batch.append(tasks[order.pop()])
        groups = [
            generate_group(model, task, cfg, tok, scheme=scheme, variant=variant, step=step)
            for task in batch
        ]
        tokens, starts, comp_mask, old_p, width = _batch_arrays(groups, pad_id=0)
        adv = np.concatenate([g.advantages for g in groups])
        new_p, ctx = _gather_new_logps(model, tokens, starts, comp_mask, width, want_grad_rows=True)
        ref_p = None
        if ref_model is not None:
            ref_p, _ = _gather_new_logps(ref_model, tokens, starts, comp_mask, width)
        loss, dnew, clip_fraction = _policy_terms(
            new_p, old_p, adv, comp_mask, variant, cfg, ref_p
        )
        if not np.isfinite(loss):
            raise NonFiniteGradient(f"non-finite policy loss at step {step}")
        grads = _backward_from_dnew(model, ctx, dnew)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {name} at step {step}")
        opt.step(work.params, grads)

        all_rewards = np.concatenate([g.rewards for g in groups])
        hist: Dict[str, int] = {}
        for r in all_rewards:
            key = f"{r:g}"
            hist[key] = hist.get(key, 0) + 1
        metrics.append(
            {
                "step": step,
                "mean_reward": float(all_rewards.mean()),
                "reward_histogram": hist,
                "loss": float(loss),
                "clip_fraction": float(clip_fraction),
                "variant": variant.value,
                "scheme": scheme.value,
            }
        )
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.steps:
            snapshot(step)
    snapshot(cfg.steps)
    return snapshots, metrics


# ---------------------------------------------------------------------------
# reward-evolution reporting
# ---------------------------------------------------------------------------


def moving_average(values: Sequence[float], window: int) -> List[float]:
    if window < 1:
        raise ValueError("window must be >= 1")
    vals = list(values)
    # direct window means keep window=1 exactly equal to the raw series
    return [float(np.mean(vals[max(0, i - window + 1) : i + 1])) for i in range(len(vals))]


def reward_curve_report(streams: Dict[str, List[dict]], window: int = 10) -> dict:
    """Aligned per-step mean rewards with moving averages and per-run summary."""
    if not streams:
        raise ValueError("need at least one metrics stream")
    series = {}
    for run_id, records in streams.items():
        pairs = sorted((int(r["step"]), float(r["mean_reward"])) for r in records)
        series[run_id] = pairs
    steps = sorted({s for pairs in series.values() for s, _ in pairs})
    runs = []
    for run_id, pairs in series.items():
        vals = [v for _, v in pairs]
        k = min(window, len(vals))
        initial = float(np.mean(vals[:k])) if vals else float("nan")
        final = float(np.mean(vals[-k:])) if vals else float("nan")
        runs.append(
            {
                "run_id": run_id,
                "steps": len(vals),
                "initial": initial,
                "final": final,
                "delta": final - initial,
            }
        )
    table = []
    lookup = {run_id: dict(pairs) for run_id, pairs in series.items()}
    for s in steps:
        row = {"step": s}
        for run_id in series:
            if s in lookup[run_id]:
                row[run_id] = lookup[run_id][s]
        table.append(row)
    moving = {
        run_id: moving_average([v for _, v in pairs], window) for run_id, pairs in series.items()
    }
    return {"window": window, "steps": steps, "runs": runs, "table": table, "moving_average": moving}


def reward_curve_csv(streams: Dict[str, List[dict]]) -> str:
    lines = ["step,run_id,mean_reward"]
    for run_id in sorted(streams):
        for rec in sorted(streams[run_id], key=lambda r: int(r["step"])):
            lines.append(f"{int(rec['step'])},{run_id},{float(rec['mean_reward']):.6f}")
    return "\n".join(lines) + "\n"

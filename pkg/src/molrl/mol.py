"""Dual-objective sequence loss and the phase-one continual-training loop.

Decision-segment tokens are held close to a frozen reference distribution
via exact full-vocabulary KL, feedback-segment tokens are absorbed with
cross-entropy, and prompt tokens never contribute. The ablation variants
swap or mask those assignments.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .checkpoint import Checkpoint, make_provenance, params_hash
from .corpus import LabeledTokenSequence, SegmentLabel
from .model import Model, NonFiniteGradient
from .optim import AdamW


class LossVariant(str, Enum):
    MOL = "mol"
    CE_ALL = "ce"
    CE_NOKL = "ce-nokl"
    CE_EETB = "ce-eetb"


class VocabMismatch(ValueError):
    pass


class EmptyInclusionWarning(UserWarning):
    """No token contributes to the loss; the degenerate value is 0."""


@dataclass
class LossBreakdown:
    total: float
    kl_component: float
    ce_component: float
    tokens_prompt: int
    tokens_decision: int
    tokens_feedback: int

    @property
    def included(self) -> int:
        return self.tokens_decision + self.tokens_feedback


@dataclass
class MolTrainConfig:
    variant: LossVariant = LossVariant.MOL
    epochs: int = 3
    steps: Optional[int] = None  # when set, wins over epochs
    batch_size: int = 8
    lr: float = 5e-5
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    kl_weight: float = 1.0
    normalize: bool = True
    seed: int = 0
    checkpoint_every: int = 0  # 0 = snapshot only at the end
    start_step: int = 0  # resume point: earlier batches are replayed, not trained


def _pad_batch(seqs: Sequence[LabeledTokenSequence], pad_id: int = 0):
    lengths = np.asarray([len(s) for s in seqs], dtype=np.int64)
    t = int(lengths.max())
    b = len(seqs)
    tokens = np.full((b, t), pad_id, dtype=np.int64)
    labels = np.full((b, t), -1, dtype=np.int8)
    eetb = np.zeros((b, t), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        tokens[i, :n] = s.tokens
        labels[i, :n] = s.labels
        eetb[i, :n] = s.eetb_mask
    return tokens, labels, eetb, lengths


def _inclusion_masks(labels, eetb, lengths, variant: LossVariant):
    """Boolean (B, T) masks of target positions that feed KL and CE terms."""
    b, t = labels.shape
    pos = np.arange(t)[None, :]
    valid = (pos >= 1) & (pos < lengths[:, None])
    decision = valid & (labels == SegmentLabel.DECISION)
    feedback = valid & (labels == SegmentLabel.FEEDBACK)
    if variant == LossVariant.MOL:
        return decision, feedback
    if variant == LossVariant.CE_ALL:
        return np.zeros_like(decision), decision | feedback
    if variant == LossVariant.CE_NOKL:
        return np.zeros_like(decision), feedback
    if variant == LossVariant.CE_EETB:
        return np.zeros_like(decision), (decision | feedback) & ~eetb
    raise ValueError(f"unknown variant {variant!r}")


def _batch_loss(
    trainee: Model,
    reference: Optional[Model],
    tokens: np.ndarray,
    labels: np.ndarray,
    eetb: np.ndarray,
    lengths: np.ndarray,
    variant: LossVariant,
    kl_weight: float = 1.0,
    normalize: bool = True,
    want_grad: bool = False,
):
    """Loss breakdown and, optionally, d(loss)/d(logits) plus the forward cache."""
    bsz, t = tokens.shape
    if variant == LossVariant.MOL and reference is None:
        raise ValueError("the KL variant needs a frozen reference model")
    if reference is not None and reference.cfg.vocab_size != trainee.cfg.vocab_size:
        raise VocabMismatch(
            f"trainee vocab {trainee.cfg.vocab_size} != reference vocab {reference.cfg.vocab_size}"
        )

    kl_pos, ce_pos = _inclusion_masks(labels, eetb, lengths, variant)
    n_inc = (kl_pos | ce_pos).sum(axis=1)  # per sequence
    included_total = int(n_inc.sum())
    counts = _label_counts(labels, lengths)
    if included_total == 0:
        warnings.warn("no tokens contribute to the loss for this input", EmptyInclusionWarning)
        breakdown = LossBreakdown(0.0, 0.0, 0.0, *counts)
        if want_grad:
            return breakdown, None, None
        return breakdown

    # per-position weights: per-sequence token-count normalization by default,
    # then a mean over the batch; raw mode keeps the plain double sum
    weights = np.zeros((bsz, t), dtype=np.float64)
    for i in range(bsz):
        if n_inc[i] == 0:
            continue
        w = 1.0 / (n_inc[i] * bsz) if normalize else 1.0
        weights[i] = w

    logits, cache = trainee.forward(tokens, want_cache=True)
    vsz = logits.shape[-1]
    flat_logits = np.ascontiguousarray(logits.reshape(-1, vsz))
    dlogits = np.zeros_like(flat_logits) if want_grad else None

    # targets are the realized tokens; position p predicts tokens[:, p]
    flat_targets = tokens.reshape(-1)
    kl_total = 0.0
    ce_total = 0.0

    ce_flat = ce_pos.reshape(-1)
    if ce_flat.any():
        idx = np.nonzero(ce_flat)[0]
        w = weights.reshape(-1)[idx]
        # logits at position p-1 predict token at p
        terms, drows = kernels.ce_rows(
            np.ascontiguousarray(flat_logits[idx - 1]), flat_targets[idx], w
        )
        ce_total = float(terms.sum())
        if want_grad:
            dlogits[idx - 1] += drows

    kl_flat = kl_pos.reshape(-1)
    if kl_flat.any():
        ref_logits = reference.forward(tokens)
        flat_ref = np.ascontiguousarray(ref_logits.reshape(-1, vsz))
        idx = np.nonzero(kl_flat)[0]
        w = weights.reshape(-1)[idx] * kl_weight
        ref_logp = kernels.log_softmax(np.ascontiguousarray(flat_ref[idx - 1]))
        terms, drows = kernels.kl_rows(ref_logp, np.ascontiguousarray(flat_logits[idx - 1]), w)
        if terms.size and float(terms.min()) < -1e-9 * max(1.0, abs(kl_weight)):
            raise AssertionError("divergence term went negative beyond roundoff")
        kl_total = float(np.maximum(terms, 0.0).sum())
        if want_grad:
            dlogits[idx - 1] += drows

    breakdown = LossBreakdown(kl_total + ce_total, kl_total, ce_total, *counts)
    if want_grad:
        return breakdown, dlogits.reshape(logits.shape), cache
    return breakdown


def _label_counts(labels, lengths) -> Tuple[int, int, int]:
    t = labels.shape[1]
    pos = np.arange(t)[None, :]
    valid = (pos >= 1) & (pos < lengths[:, None])
    return (
        int((valid & (labels == SegmentLabel.PROMPT)).sum()),
        int((valid & (labels == SegmentLabel.DECISION)).sum()),
        int((valid & (labels == SegmentLabel.FEEDBACK)).sum()),
    )


def mol_loss(
    trainee: Checkpoint,
    reference: Optional[Checkpoint],
    seq: LabeledTokenSequence,
    variant: LossVariant,
    kl_weight: float = 1.0,
    normalize: bool = True,
) -> LossBreakdown:
    """Loss of one labeled sequence under the selected variant."""
    tokens, labels, eetb, lengths = _pad_batch([seq])
    return _batch_loss(
        trainee.model(),
        None if reference is None else reference.model(),
        tokens,
        labels,
        eetb,
        lengths,
        variant,
        kl_weight=kl_weight,
        normalize=normalize,
    )


def train_mol(
    trainee: Checkpoint,
    reference: Optional[Checkpoint],
    dataset: Sequence[LabeledTokenSequence],
    config: MolTrainConfig,
) -> Tuple[List[Tuple[int, Checkpoint]], List[dict]]:
    """Continual-training loop; reference stays frozen for the whole phase.

    Returns interval checkpoints (always including the final state) and one
    metrics record per optimizer step.
    """
    work = trainee.clone()
    model = work.model()
    ref_model = None if reference is None else reference.model()
    opt = AdamW(
        work.params,
        lr=config.lr,
        weight_decay=config.weight_decay,
        grad_clip=config.grad_clip,
    )
    if config.start_step and trainee.opt_state is not None:
        opt.load_state_dict(trainee.opt_state)
    rng = np.random.default_rng(config.seed)
    metrics: List[dict] = []
    snapshots: List[Tuple[int, Checkpoint]] = []
    cfg_hash = work.provenance.get("config_hash", "")
    parent = params_hash(trainee.params)

    total_steps = config.steps
    if total_steps is None:
        per_epoch = int(np.ceil(len(dataset) / config.batch_size)) if dataset else 0
        total_steps = per_epoch * config.epochs
    if total_steps <= config.start_step or not dataset:
        final = work.clone()
        final.provenance = make_provenance(
            "mol", config.start_step, cfg_hash, parent, variant=config.variant.value
        )
        return [(config.start_step, final)], metrics

    def snapshot(step: int):
        snap = work.clone()
        snap.provenance = make_provenance(
            "mol", step, cfg_hash, parent, variant=config.variant.value
        )
        snap.opt_state = {k: v.copy() for k, v in opt.state_dict().items()}
        snapshots.append((step, snap))

    step = 0
    order: List[int] = []
    while step < total_steps:
        if not order:
            order = list(rng.permutation(len(dataset)))
        batch_ids = [order.pop() for _ in range(min(config.batch_size, len(order)))]
        if step < config.start_step:
            # replay the shuffle stream so a resumed run sees the same batches
            step += 1
            continue
        batch = [dataset[i] for i in batch_ids]
        tokens, labels, eetb, lengths = _pad_batch(batch)
        breakdown, dlogits, cache = _batch_loss(
            model,
            ref_model,
            tokens,
            labels,
            eetb,
            lengths,
            config.variant,
            kl_weight=config.kl_weight,
            normalize=config.normalize,
            want_grad=True,
        )
        step += 1
        if dlogits is not None:
            if not np.isfinite(breakdown.total):
                raise NonFiniteGradient(f"non-finite loss at step {step}, batch {batch_ids}")
            grads = model.backward(cache, dlogits.astype(model.cfg.np_dtype()))
            for name, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NonFiniteGradient(
                        f"non-finite gradient in {name} at step {step}, batch {batch_ids}"
                    )
            opt.step(work.params, grads)
        metrics.append(
            {
                "step": step,
                "variant": config.variant.value,
                "total": breakdown.total,
                "kl_component": breakdown.kl_component,
                "ce_component": breakdown.ce_component,
                "tokens_decision": breakdown.tokens_decision,
                "tokens_feedback": breakdown.tokens_feedback,
                "lr": config.lr,
            }
        )
        if config.checkpoint_every and step % config.checkpoint_every == 0 and step < total_steps:
            snapshot(step)
    snapshot(total_steps)
    return snapshots, metrics


def general_capability_probe(ckpt: Checkpoint, probe_corpus: Sequence[np.ndarray]) -> float:
    """Perplexity (exp of mean per-token cross-entropy) on out-of-task text."""
    model = ckpt.model()
    total = 0.0
    count = 0
    for seq in probe_corpus:
        arr = np.asarray(seq, dtype=np.int64)
        if len(arr) < 2:
            continue
        logits = model.forward(arr[None, :])[0]
        vsz = logits.shape[-1]
        logp = kernels.logp_rows(np.ascontiguousarray(logits[:-1]), arr[1:])
        total += float(-logp.sum())
        count += len(arr) - 1
    if count == 0:
        return float("nan")
    return float(np.exp(total / count))

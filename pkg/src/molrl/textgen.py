"""Synthetic plain-text generator for base pretraining and the capability probe.

The prose generator is independent of the trajectory synthesizer, so probe
perplexity measures retention of out-of-task text. The format primer mixes
in single-turn task/answer examples so a freshly pretrained model has
partial competence at the fenced-code answer shape.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .corpus import LabeledTokenSequence, Message, SegmentLabel, Trajectory, label_tokens
from .env import SYSTEM_PROMPT, gen_tasks, oracle_answer
from .tokenizer import Tokenizer

_DETS = ["the", "a", "this", "that", "every", "one"]
_ADJS = [
    "quiet", "old", "bright", "small", "heavy", "green", "narrow",
    "early", "warm", "plain", "quick", "pale", "broad", "distant",
]
_NOUNS = [
    "river", "garden", "engine", "letter", "market", "window", "bridge",
    "signal", "harbor", "meadow", "lantern", "archive", "valley", "compass",
    "ledger", "orchard", "tower", "crossing",
]
_VERBS = [
    "follows", "holds", "crosses", "keeps", "finds", "turns",
    "meets", "carries", "marks", "leaves", "opens", "traces",
]
_TAILS = [
    "at dawn", "in winter", "after the rain", "near the coast",
    "before nightfall", "along the road", "under the elm",
    "without a sound", "by the gate", "in the late light",
]


def _sentence(rng: np.random.Generator) -> str:
    det1, det2 = rng.choice(_DETS), rng.choice(_DETS)
    adj1, adj2 = rng.choice(_ADJS), rng.choice(_ADJS)
    noun1, noun2 = rng.choice(_NOUNS), rng.choice(_NOUNS)
    verb = rng.choice(_VERBS)
    tail = rng.choice(_TAILS)
    if rng.random() < 0.15:
        count = int(rng.integers(2, 100))
        return f"{det1} {noun1} {verb} {count} {noun2}s {tail}."
    return f"{det1} {adj1} {noun1} {verb} {det2} {adj2} {noun2} {tail}."


def general_lines(count: int, seed: int) -> List[str]:
    """Template-generated prose lines, one or two sentences each."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBEEF]))
    lines = []
    for _ in range(count):
        parts = [_sentence(rng)]
        if rng.random() < 0.35:
            parts.append(_sentence(rng))
        lines.append(" ".join(parts))
    return lines


def write_lines(path: str | Path, lines: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def read_lines(path: str | Path) -> List[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def probe_token_sequences(tok: Tokenizer, lines: Sequence[str]) -> List[np.ndarray]:
    return [
        np.asarray([tok.bos_id] + tok.encode(line) + [tok.eos_id], dtype=np.int64)
        for line in lines
    ]


def primer_trajectory(task, idx: int) -> Trajectory:
    """Single-turn demonstration: system, task prompt, canonical fenced answer.

    One fixed prose line keeps the answer layout rigid, which is what lets a
    small model lock onto the prompt-to-program copy pattern.
    """
    return Trajectory(
        messages=(
            Message(role="system", content=SYSTEM_PROMPT),
            Message(role="user", content=task.prompt),
            Message(role="assistant", content=oracle_answer(task, "Computing the answer.")),
        ),
        task_id=f"primer-{task.task_id}",
    )


def _plain_lm_sequence(tokens: np.ndarray, task_id: str) -> LabeledTokenSequence:
    """Wrap raw tokens so every target position counts as absorbable content."""
    labels = np.full(len(tokens), SegmentLabel.FEEDBACK, dtype=np.int8)
    labels[0] = SegmentLabel.PROMPT
    return LabeledTokenSequence(
        tokens=np.asarray(tokens, dtype=np.int32),
        labels=labels,
        eetb_mask=np.zeros(len(tokens), dtype=bool),
        task_id=task_id,
    )


def build_pretrain_sequences(
    tok: Tokenizer,
    n_prose: int,
    n_primer: int,
    seed: int,
    primer_tiers: Tuple[int, ...] = (1, 2),
) -> List[LabeledTokenSequence]:
    """Shuffled mix of prose lines and primer demonstrations for base training."""
    seqs: List[LabeledTokenSequence] = []
    for i, line in enumerate(general_lines(n_prose, seed)):
        ids = np.asarray([tok.bos_id] + tok.encode(line) + [tok.eos_id], dtype=np.int32)
        seqs.append(_plain_lm_sequence(ids, f"prose-{i}"))
    per_tier = max(1, n_primer // len(primer_tiers)) if n_primer else 0
    primer_count = 0
    for tier in primer_tiers:
        if primer_count >= n_primer:
            break
        take = min(per_tier, n_primer - primer_count)
        for j, task in enumerate(gen_tasks(take, tier, seed + 7000 + tier)):
            labeled = label_tokens(primer_trajectory(task, j), tok)
            seqs.append(_plain_lm_sequence(labeled.tokens, labeled.task_id))
            primer_count += 1
    order = np.random.default_rng(np.random.SeedSequence([seed, 0xD00D])).permutation(len(seqs))
    return [seqs[i] for i in order]

"""Multi-turn trajectory representation, normalization, token labeling, and stats.

A trajectory is an ordered message list: a system message and a first user
message form the prompt, then assistant (decision) and user (feedback)
messages strictly alternate. Records arrive as JSONL, one object per line:
{"task_id": str, "messages": [{"role": str, "content": str}, ...]}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .tokenizer import (
    ASSISTANT,
    BOS,
    EMPTY_THINK,
    EOS,
    SYSTEM,
    THINK_CLOSE,
    THINK_OPEN,
    USER,
    Tokenizer,
)

ROLES = ("system", "user", "assistant")

ROLE_MARKER = {"system": SYSTEM, "user": USER, "assistant": ASSISTANT}


class MalformedRecord(ValueError):
    """Input record violates the trajectory schema; the record is skipped."""


class UnbalancedThinkTags(ValueError):
    """Assistant message contains think tags that do not pair up."""


class InsufficientData(ValueError):
    """Dataset smaller than the requested split sizes."""


class SegmentLabel(IntEnum):
    PROMPT = 0
    DECISION = 1
    FEEDBACK = 2


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class Trajectory:
    messages: Tuple[Message, ...]
    task_id: str
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_interaction_steps(self) -> int:
        """Number of assistant turns."""
        return sum(1 for m in self.messages if m.role == "assistant")


@dataclass
class LabeledTokenSequence:
    tokens: np.ndarray  # int32
    labels: np.ndarray  # int8, SegmentLabel values
    eetb_mask: np.ndarray  # bool, true on empty-think-block literal tokens
    task_id: str = ""

    def __post_init__(self):
        if not (len(self.tokens) == len(self.labels) == len(self.eetb_mask)):
            raise ValueError("tokens, labels and eetb_mask must have identical length")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class StatsReport:
    token_hist: dict  # token count per trajectory -> frequency
    turn_hist: dict  # assistant turns per trajectory -> frequency
    size: int

    def to_json(self) -> dict:
        return {
            "size": self.size,
            "token_hist": {str(k): v for k, v in sorted(self.token_hist.items())},
            "turn_hist": {str(k): v for k, v in sorted(self.turn_hist.items())},
        }


def parse_trajectory(raw: dict) -> Trajectory:
    """Validate one JSONL record and return a Trajectory.

    Raises MalformedRecord on bad roles, broken alternation, or empty lists.
    A trailing assistant message without closing feedback is accepted.
    """
    if not isinstance(raw, dict):
        raise MalformedRecord("record is not an object")
    msgs = raw.get("messages")
    if not isinstance(msgs, list) or not msgs:
        raise MalformedRecord("missing or empty message list")
    parsed: List[Message] = []
    for entry in msgs:
        if not isinstance(entry, dict):
            raise MalformedRecord("message entry is not an object")
        role = entry.get("role")
        content = entry.get("content")
        if role not in ROLES:
            raise MalformedRecord(f"bad role {role!r}")
        if not isinstance(content, str):
            raise MalformedRecord("message content is not a string")
        parsed.append(Message(role=role, content=content))
    if len(parsed) < 2 or parsed[0].role != "system" or parsed[1].role != "user":
        raise MalformedRecord("trajectory must open with a system then a user message")
    expected = "assistant"
    for msg in parsed[2:]:
        if msg.role != expected:
            raise MalformedRecord(f"alternation broken: expected {expected}, got {msg.role}")
        expected = "user" if expected == "assistant" else "assistant"
    task_id = raw.get("task_id", "")
    meta = raw.get("meta", {})
    if not isinstance(meta, dict):
        meta = {}
    return Trajectory(messages=tuple(parsed), task_id=str(task_id), meta=meta)


def _strip_think_blocks(text: str) -> str:
    """Remove every <think>...</think> span; raise if tags do not pair."""
    out = []
    pos = 0
    while True:
        open_at = text.find(THINK_OPEN, pos)
        close_at = text.find(THINK_CLOSE, pos)
        if open_at == -1 and close_at == -1:
            out.append(text[pos:])
            return "".join(out)
        if open_at == -1 or (close_at != -1 and close_at < open_at):
            raise UnbalancedThinkTags("close tag without matching open tag")
        if close_at == -1:
            raise UnbalancedThinkTags("open tag without matching close tag")
        inner_open = text.find(THINK_OPEN, open_at + len(THINK_OPEN))
        if inner_open != -1 and inner_open < close_at:
            raise UnbalancedThinkTags("nested think tags")
        out.append(text[pos:open_at])
        pos = close_at + len(THINK_CLOSE)


def normalize_think_blocks(traj: Trajectory, mode: str = "cot") -> Trajectory:
    """Canonicalize assistant messages to start with the empty think block.

    Existing think content is cleared; messages without think tags gain an
    empty block. Both modes converge to the same canonical form, so the
    operation is idempotent.
    """
    if mode not in ("cot", "non_cot"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    new_msgs = []
    for msg in traj.messages:
        if msg.role != "assistant":
            new_msgs.append(msg)
            continue
        rest = _strip_think_blocks(msg.content)
        new_msgs.append(Message(role="assistant", content=EMPTY_THINK + rest))
    return Trajectory(messages=tuple(new_msgs), task_id=traj.task_id, meta=dict(traj.meta))


def render_text(traj: Trajectory) -> str:
    """Canonical textual form of a trajectory: markers, content, terminators."""
    parts = [BOS]
    for msg in traj.messages:
        parts.append(ROLE_MARKER[msg.role])
        parts.append(msg.content)
        parts.append(EOS)
    return "".join(parts)


def label_tokens(traj: Trajectory, tok: Tokenizer) -> LabeledTokenSequence:
    """Tokenize a trajectory and label every token PROMPT, DECISION or FEEDBACK.

    The leading begin-of-sequence token, the system message and the first user
    message are PROMPT. Assistant messages are DECISION, later user messages
    FEEDBACK; each message span includes its role marker and terminator.
    """
    ids: List[int] = [tok.bos_id]
    labels: List[int] = [SegmentLabel.PROMPT]
    eetb: List[bool] = [False]
    think_ids = tok.empty_think_ids()
    for idx, msg in enumerate(traj.messages):
        if idx < 2:
            lab = SegmentLabel.PROMPT
        elif msg.role == "assistant":
            lab = SegmentLabel.DECISION
        else:
            lab = SegmentLabel.FEEDBACK
        span = [tok.special_id(ROLE_MARKER[msg.role])] + tok.encode(msg.content) + [tok.eos_id]
        mask = [False] * len(span)
        if msg.role == "assistant":
            for start in _find_subsequence(span, think_ids):
                for k in range(start, start + len(think_ids)):
                    mask[k] = True
        ids.extend(span)
        labels.extend([lab] * len(span))
        eetb.extend(mask)
    return LabeledTokenSequence(
        tokens=np.asarray(ids, dtype=np.int32),
        labels=np.asarray(labels, dtype=np.int8),
        eetb_mask=np.asarray(eetb, dtype=bool),
        task_id=traj.task_id,
    )


def _find_subsequence(haystack: Sequence[int], needle: Sequence[int]) -> List[int]:
    hits = []
    n = len(needle)
    for i in range(len(haystack) - n + 1):
        if list(haystack[i : i + n]) == list(needle):
            hits.append(i)
    return hits


def split_dataset(
    ds: Sequence[Trajectory], seed: int, train: int = 1000, validation: int = 50, test: int = 100
) -> Tuple[List[Trajectory], List[Trajectory], List[Trajectory]]:
    """Disjoint seeded split with exact sizes; extra records are dropped."""
    need = train + validation + test
    if len(ds) < need:
        raise InsufficientData(f"need {need} records, have {len(ds)}")
    order = np.random.default_rng(seed).permutation(len(ds))
    picked = [ds[i] for i in order[:need]]
    return picked[:train], picked[train : train + validation], picked[train + validation :]


def corpus_stats(ds: Sequence[Trajectory], tok: Tokenizer) -> StatsReport:
    token_hist: dict = {}
    turn_hist: dict = {}
    for traj in ds:
        n_tokens = len(label_tokens(traj, tok))
        token_hist[n_tokens] = token_hist.get(n_tokens, 0) + 1
        turns = traj.n_interaction_steps
        turn_hist[turns] = turn_hist.get(turns, 0) + 1
    return StatsReport(token_hist=token_hist, turn_hist=turn_hist, size=len(ds))


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------


def trajectory_to_record(traj: Trajectory) -> dict:
    rec = {
        "task_id": traj.task_id,
        "messages": [{"role": m.role, "content": m.content} for m in traj.messages],
    }
    if traj.meta:
        rec["meta"] = traj.meta
    return rec


def write_trajectories(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(trajectory_to_record(traj), sort_keys=True) + "\n")


def read_trajectories(path: str | Path) -> Tuple[List[Trajectory], int]:
    """Read a trajectory JSONL file. Returns (trajectories, skipped_count)."""
    out: List[Trajectory] = []
    skipped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                out.append(parse_trajectory(json.loads(line)))
            except (json.JSONDecodeError, MalformedRecord):
                skipped += 1
    return out, skipped


def write_labeled_cache(path: str | Path, seqs: Iterable[LabeledTokenSequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in seqs:
            rec = {
                "task_id": seq.task_id,
                "tokens": seq.tokens.tolist(),
                "labels": seq.labels.tolist(),
                "eetb": [int(b) for b in seq.eetb_mask],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_labeled_cache(path: str | Path) -> List[LabeledTokenSequence]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(
                LabeledTokenSequence(
                    tokens=np.asarray(rec["tokens"], dtype=np.int32),
                    labels=np.asarray(rec["labels"], dtype=np.int8),
                    eetb_mask=np.asarray(rec["eetb"], dtype=bool),
                    task_id=rec.get("task_id", ""),
                )
            )
    return out

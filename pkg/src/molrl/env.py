"""Sandboxed task environment: code extraction, execution feedback, tiered
rewards, seeded task generation, and a scripted noisy-oracle policy that
synthesizes multi-turn training trajectories."""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import numpy as np

from .corpus import Message, Trajectory
from .lang import DEFAULT_STEP_LIMIT, ExecResult, ExecStatus, Program, run
from .tokenizer import EMPTY_THINK

SYSTEM_PROMPT = "Write code in a ``` block that prints the answer."

# Highest satisfied tier wins; tiers are nested (correct => ran => parsed).
REWARD_PARSED = 0.1
REWARD_EXECUTED = 0.4
REWARD_CORRECT = 1.0


class RewardScheme(str, Enum):
    MULTI_VALUE = "multi"
    BINARY = "binary"


@dataclass(frozen=True)
class Task:
    task_id: str
    prompt: str
    ground_truth: str
    tier: int
    seed: int
    canonical_solution: str


@dataclass(frozen=True)
class NoiseConfig:
    error_rate: float = 0.5
    max_faults: int = 1
    fault_kinds: Tuple[str, ...] = ("off_by_one", "undefined_ident", "dropped_paren", "div_zero")

    def __post_init__(self):
        if not 0.0 <= self.error_rate < 1.0:
            raise ValueError("error_rate must be in [0, 1)")


_FENCE_RE = re.compile(r"```[ \t]*[a-zA-Z0-9_+-]*[ \t]*\n(.*?)```", re.DOTALL)


def extract_code(model_output: str) -> Optional[Program]:
    """Content of the last fenced code block, or None when no block exists."""
    matches = _FENCE_RE.findall(model_output)
    if not matches:
        return None
    return Program(source=matches[-1].strip("\n"))


def feedback_text(result: ExecResult) -> str:
    """Render an execution result the way traces show environment observations."""
    if result.status == ExecStatus.OK:
        logs = result.output if result.output else "(no output)"
    elif result.status == ExecStatus.PARSE_ERROR:
        logs = f"Error: invalid syntax ({result.error_detail})"
    elif result.status == ExecStatus.RUNTIME_ERROR:
        logs = f"Error: {result.error_detail}"
    else:
        logs = "Error: no code block found"
    return f"Observation:\nExecution logs:\n{logs}\nLast output from code snippet:\nNone"


def normalize_output(text: str) -> str:
    lines = [line.rstrip() for line in text.split("\n")]
    while lines and lines[-1] == "":
        lines.pop()
    return "\n".join(lines)


def outputs_match(output: str, ground_truth: str) -> bool:
    return normalize_output(output) == normalize_output(ground_truth)


def reward(result: ExecResult, ground_truth: str, scheme: RewardScheme) -> float:
    correct = result.status == ExecStatus.OK and outputs_match(result.output, ground_truth)
    if scheme == RewardScheme.BINARY:
        return 1.0 if correct else 0.0
    if result.status in (ExecStatus.NO_CODE, ExecStatus.PARSE_ERROR):
        return 0.0
    if result.status == ExecStatus.RUNTIME_ERROR:
        return REWARD_PARSED
    return REWARD_CORRECT if correct else REWARD_EXECUTED


def evaluate_output(model_output: str, ground_truth: str, scheme: RewardScheme,
                    step_limit: int = DEFAULT_STEP_LIMIT) -> Tuple[float, ExecResult]:
    """Extract, run, and score a model answer. NO_CODE is a value, not an error."""
    program = extract_code(model_output)
    if program is None:
        result = ExecResult(status=ExecStatus.NO_CODE, error_detail="no fenced code block")
    else:
        result = run(program, step_limit=step_limit)
    return reward(result, ground_truth, scheme), result


# ---------------------------------------------------------------------------
# task generation
# ---------------------------------------------------------------------------


def _gen_expression(rng: np.random.Generator, tier: int) -> str:
    """Random arithmetic expression; depth and operator set scale with tier."""
    if tier <= 1:
        a, b = int(rng.integers(2, 10)), int(rng.integers(2, 10))
        op = rng.choice(["+", "-", "*"])
        return f"{a} {op} {b}"
    if tier == 2:
        a, b, c = (int(rng.integers(2, 10)) for _ in range(3))
        op1, op2 = rng.choice(["+", "-", "*"]), rng.choice(["+", "*"])
        shape = int(rng.integers(0, 3))
        if shape == 0:
            return f"({a} {op1} {b}) {op2} {c}"
        if shape == 1:
            return f"{a} {op2} ({b} {op1} {c})"
        return f"({a} {op1} {b}) / {max(2, c % 5)}"
    # tier >= 3: wider operands and one nested group
    a, b, c, d = (int(rng.integers(2, 20)) for _ in range(4))
    op1, op2, op3 = (rng.choice(["+", "-", "*"]) for _ in range(3))
    return f"({a} {op1} {b}) {op2} ({c} {op3} {d})"


def _canonical_program(rng: np.random.Generator, expr: str, tier: int) -> str:
    if tier >= 3 and rng.random() < 0.5:
        return f"x = {expr}\nprint(x)"
    return f"print({expr})"


def gen_tasks(count: int, tier: int, seed: int) -> List[Task]:
    """Seeded task list; each task's ground truth is the interpreter's output
    on the canonical solution."""
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, tier]))
    tasks: List[Task] = []
    while len(tasks) < count:
        expr = _gen_expression(rng, tier)
        program = _canonical_program(rng, expr, tier)
        result = run(Program(program))
        if result.status != ExecStatus.OK or not result.output:
            continue  # resample expressions that fail (e.g. division by zero)
        idx = len(tasks)
        tasks.append(
            Task(
                task_id=f"t{tier}-{seed}-{idx:05d}",
                prompt=f"Compute {expr}. Write code.",
                ground_truth=result.output,
                tier=tier,
                seed=seed,
                canonical_solution=program,
            )
        )
    return tasks


def task_messages(task: Task) -> List[Message]:
    return [Message(role="system", content=SYSTEM_PROMPT), Message(role="user", content=task.prompt)]


def write_tasks(path: str | Path, tasks: Iterable[Task]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            rec = {
                "task_id": t.task_id,
                "prompt": t.prompt,
                "ground_truth": t.ground_truth,
                "tier": t.tier,
                "seed": t.seed,
                "canonical_solution": t.canonical_solution,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_tasks(path: str | Path) -> List[Task]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(
                Task(
                    task_id=rec["task_id"],
                    prompt=rec["prompt"],
                    ground_truth=rec["ground_truth"],
                    tier=int(rec.get("tier", 1)),
                    seed=int(rec.get("seed", 0)),
                    canonical_solution=rec.get("canonical_solution", ""),
                )
            )
    return out


# ---------------------------------------------------------------------------
# fault injection and trajectory synthesis
# ---------------------------------------------------------------------------


def inject_fault(program_src: str, kind: str) -> str:
    if kind == "off_by_one":
        m = re.search(r"\d+", program_src)
        if m is None:
            return program_src + "\nq = 0"
        bumped = str(int(m.group()) + 1)
        return program_src[: m.start()] + bumped + program_src[m.end() :]
    if kind == "undefined_ident":
        m = re.search(r"\d+", program_src)
        if m is None:
            return program_src
        return program_src[: m.start()] + "q" + program_src[m.end() :]
    if kind == "dropped_paren":
        at = program_src.rfind(")")
        if at == -1:
            return program_src + ")"
        return program_src[:at] + program_src[at + 1 :]
    if kind == "div_zero":
        m = re.search(r"print\((.*)\)", program_src, re.DOTALL)
        if m is None:
            return program_src
        return program_src[: m.start()] + f"print(({m.group(1)}) / 0)" + program_src[m.end() :]
    raise ValueError(f"unknown fault kind {kind!r}")


_FIRST_PROSE = ("Let me compute this.", "I will run the calculation.", "Computing the answer.")
_REPAIR_PROSE = ("That failed, fixing the code.", "Correcting the mistake.", "Let me repair that.")


def _assistant_content(prose: str, program_src: str) -> str:
    return f"{EMPTY_THINK}{prose}\n```\n{program_src}\n```"


def oracle_answer(task: Task, prose: str = "Computing the answer.") -> str:
    """Single-shot assistant message solving a task with its canonical program."""
    return _assistant_content(prose, task.canonical_solution)


def synthesize_trajectory(
    task: Task,
    noise: NoiseConfig,
    seed: int,
    max_turns: int = 4,
    step_limit: int = DEFAULT_STEP_LIMIT,
) -> Trajectory:
    """Scripted noisy-oracle rollout against the environment.

    Each assistant turn proposes a program (possibly with an injected fault);
    the environment's observation becomes the next user message; the oracle
    repairs signalled faults. The loop ends at a correct output or max_turns,
    the latter being recorded in trajectory metadata.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(task.task_id.encode())]))
    messages = list(task_messages(task))
    meta: dict = {}
    faults_used = 0
    solved = False
    for turn in range(max_turns):
        inject = faults_used < noise.max_faults and rng.random() < noise.error_rate
        program_src = task.canonical_solution
        if inject:
            kind = str(rng.choice(list(noise.fault_kinds)))
            program_src = inject_fault(program_src, kind)
            faults_used += 1
        prose_bank = _FIRST_PROSE if turn == 0 else _REPAIR_PROSE
        prose = prose_bank[int(rng.integers(0, len(prose_bank)))]
        messages.append(Message(role="assistant", content=_assistant_content(prose, program_src)))
        result = run(Program(program_src), step_limit=step_limit)
        messages.append(Message(role="user", content=feedback_text(result)))
        if result.status == ExecStatus.OK and outputs_match(result.output, task.ground_truth):
            solved = True
            break
    if not solved:
        meta["max_turns_exceeded"] = True
    return Trajectory(messages=tuple(messages), task_id=task.task_id, meta=meta)

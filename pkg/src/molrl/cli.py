"""Operator harness: one executable wiring corpus -> continual training ->
RL post-training -> evaluation, plus stats, reporting, and the ablation grid.

Configuration is a plain-text INI file, one file per run; command-line flags
win over file values. Every artifact embeds the effective-config hash and a
checkpoint lineage that resolves back to a base checkpoint. Outputs carry no
timestamps, so a rerun with identical config and seed reproduces every
metrics file byte for byte.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import corpus as corpus_mod
from . import env as env_mod
from . import grpo as grpo_mod
from . import textgen
from .checkpoint import Checkpoint, load_checkpoint, params_hash, save_checkpoint
from .corpus import label_tokens, normalize_think_blocks, read_trajectories, split_dataset
from .env import NoiseConfig, RewardScheme, read_tasks, write_tasks
from .grpo import PolicyOptVariant, RlConfig, reward_curve_csv, reward_curve_report, train_grpo
from .metrics import read_metrics, write_metrics
from .model import Model, ModelConfig, NonFiniteGradient, SamplingConfig, decode_batch
from .mol import LossVariant, MolTrainConfig, general_capability_probe, train_mol
from .tokenizer import Tokenizer

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------


class Cfg:
    """Nested string config with typed getters; flags already folded in."""

    def __init__(self, sections: Dict[str, Dict[str, str]]):
        self.sections = {s: dict(kv) for s, kv in sections.items()}

    @classmethod
    def load(cls, path: Optional[str]) -> "Cfg":
        sections: Dict[str, Dict[str, str]] = {}
        if path:
            parser = configparser.ConfigParser()
            read = parser.read(path)
            if not read:
                raise ConfigError(f"config file not found: {path}")
            for section in parser.sections():
                sections[section] = dict(parser.items(section))
        return cls(sections)

    def set(self, section: str, key: str, value: str) -> None:
        self.sections.setdefault(section, {})[key] = value

    def get(self, section: str, key: str, default=None, kind=str):
        raw = self.sections.get(section, {}).get(key)
        if raw is None:
            return default
        try:
            if kind is bool:
                return raw.strip().lower() in ("1", "true", "yes", "on")
            return kind(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc

    def require(self, section: str, key: str, kind=str):
        val = self.get(section, key, default=None, kind=kind)
        if val is None:
            raise ConfigError(f"missing required config key [{section}] {key}")
        return val

    def canonical(self) -> str:
        lines = []
        for section in sorted(self.sections):
            lines.append(f"[{section}]")
            for key in sorted(self.sections[section]):
                lines.append(f"{key} = {self.sections[section][key]}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def _apply_flags(cfg: Cfg, args: argparse.Namespace) -> None:
    if getattr(args, "seed", None) is not None:
        cfg.set("run", "seed", str(args.seed))
    if getattr(args, "out", None):
        cfg.set("run", "out", args.out)
    if getattr(args, "name", None):
        cfg.set("run", "name", args.name)
    if getattr(args, "variant", None):
        cfg.set("mol", "variant", args.variant)
    if getattr(args, "opt", None):
        cfg.set("grpo", "opt", args.opt)
    if getattr(args, "reward", None):
        cfg.set("grpo", "reward", args.reward)
    for item in getattr(args, "set", None) or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        cfg.set(section.strip(), key.strip(), value.strip())


def _run_dir(cfg: Cfg, default_name: str) -> Path:
    out = Path(cfg.get("run", "out", default="runs"))
    name = cfg.get("run", "name", default=default_name)
    rd = out / name
    (rd / "checkpoints").mkdir(parents=True, exist_ok=True)
    return rd


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _freeze_config(cfg: Cfg, rd: Path) -> str:
    (rd / "config.ini").write_text(cfg.canonical(), encoding="utf-8")
    return cfg.hash()


def _model_config(cfg: Cfg, tok: Tokenizer) -> ModelConfig:
    return ModelConfig(
        vocab_size=tok.vocab_size,
        context_length=cfg.get("model", "context_length", 512, int),
        layer_count=cfg.get("model", "layer_count", 2, int),
        model_width=cfg.get("model", "model_width", 64, int),
        head_count=cfg.get("model", "head_count", 4, int),
        ff_width=cfg.get("model", "ff_width", 256, int),
        param_seed=cfg.get("model", "param_seed", 0, int),
        dtype=cfg.get("model", "dtype", "float32", str),
    )


def _lineage(parent: Checkpoint) -> list:
    prior = list(parent.provenance.get("lineage", []))
    prior.append(
        {
            "phase": parent.provenance.get("phase"),
            "step": parent.provenance.get("step"),
            "params_hash": params_hash(parent.params),
        }
    )
    return prior


def _stamp(ckpt: Checkpoint, run_hash: str, run_name: str, lineage: list) -> Checkpoint:
    ckpt.provenance["config_hash"] = run_hash
    ckpt.provenance["run"] = run_name
    ckpt.provenance["lineage"] = lineage
    return ckpt


def render_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    cols = [list(map(str, col)) for col in zip(headers, *rows)] if rows else [[h] for h in headers]
    widths = [max(len(cell) for cell in col) for col in cols]
    def fmt(row):
        return "  ".join(str(cell).ljust(w) for cell, w in zip(row, widths))
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines += [fmt(row) for row in rows]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _parse_tier_weights(spec: str) -> List[Tuple[int, float]]:
    out = []
    for part in spec.split(","):
        tier, weight = part.split(":")
        out.append((int(tier), float(weight)))
    if not out or any(w < 0 for _, w in out):
        raise ConfigError(f"bad tier weights {spec!r}")
    return out


def _tier_counts(count: int, weights: List[Tuple[int, float]]) -> List[Tuple[int, int]]:
    total_w = sum(w for _, w in weights)
    raw = [(tier, count * w / total_w) for tier, w in weights]
    counts = [(tier, int(np.floor(x))) for tier, x in raw]
    short = count - sum(c for _, c in counts)
    fracs = sorted(range(len(raw)), key=lambda i: (raw[i][1] - counts[i][1], -i), reverse=True)
    counts = [list(c) for c in counts]
    for i in range(short):
        counts[fracs[i % len(fracs)]][1] += 1
    return [(t, c) for t, c in counts]


def cmd_gen_data(cfg: Cfg) -> int:
    seed = cfg.get("run", "seed", 0, int)
    rd = _run_dir(cfg, "gen-data")
    run_hash = _freeze_config(cfg, rd)
    count = cfg.get("data", "count", 1150, int)
    weights = _parse_tier_weights(cfg.get("data", "tier_weights", "1:0.6,2:0.3,3:0.1"))
    noise = NoiseConfig(
        error_rate=cfg.get("data", "error_rate", 0.5, float),
        max_faults=cfg.get("data", "max_faults", 1, int),
    )
    max_turns = cfg.get("data", "max_turns", 4, int)
    tasks = []
    for tier, n in _tier_counts(count, weights):
        if n > 0:
            tasks.extend(env_mod.gen_tasks(n, tier, seed))
    trajectories = [
        env_mod.synthesize_trajectory(task, noise, seed=seed + 1, max_turns=max_turns)
        for task in tasks
    ]
    write_tasks(rd / "tasks.jsonl", tasks)
    corpus_mod.write_trajectories(rd / "trajectories.jsonl", trajectories)
    split_spec = cfg.get("data", "split")
    if split_spec:
        try:
            n_train, n_val, n_test = (int(x) for x in split_spec.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad [data] split {split_spec!r}, want train,val,test") from exc
        parts = split_dataset(trajectories, seed=seed, train=n_train, validation=n_val, test=n_test)
        for part, tag in zip(parts, ("train", "validation", "test")):
            corpus_mod.write_trajectories(rd / f"trajectories.{tag}.jsonl", part)
    tier_hist: Dict[str, int] = {}
    for t in tasks:
        tier_hist[str(t.tier)] = tier_hist.get(str(t.tier), 0) + 1
    _write_json(
        rd / "report.json",
        {
            "config_hash": run_hash,
            "seed": seed,
            "count": len(tasks),
            "tier_histogram": tier_hist,
            "max_turns_exceeded": sum(1 for t in trajectories if t.meta.get("max_turns_exceeded")),
        },
    )
    print(f"wrote {len(tasks)} tasks and trajectories to {rd}")
    return EXIT_OK


def cmd_stats(cfg: Cfg) -> int:
    rd = _run_dir(cfg, "stats")
    run_hash = _freeze_config(cfg, rd)
    corpus_path = cfg.require("stats", "corpus")
    tok = Tokenizer()
    trajs, skipped = read_trajectories(corpus_path)
    trajs = [normalize_think_blocks(t) for t in trajs]
    report = corpus_mod.corpus_stats(trajs, tok)
    payload = dict(report.to_json(), skipped=skipped, config_hash=run_hash)
    _write_json(rd / "report.json", payload)
    if cfg.get("stats", "cache_path"):
        seqs = [label_tokens(t, tok) for t in trajs]
        corpus_mod.write_labeled_cache(cfg.get("stats", "cache_path"), seqs)
    print(render_table(
        ["metric", "value"],
        [
            ["trajectories", report.size],
            ["skipped_records", skipped],
            ["distinct_token_counts", len(report.token_hist)],
            ["max_assistant_turns", max(report.turn_hist) if report.turn_hist else 0],
        ],
    ))
    return EXIT_OK


def _load_corpus_sequences(cfg: Cfg, tok: Tokenizer) -> List:
    corpus_path = cfg.require("mol", "corpus")
    trajs, _ = read_trajectories(corpus_path)
    mode = cfg.get("mol", "mode", "cot")
    trajs = [normalize_think_blocks(t, mode) for t in trajs]
    limit = cfg.get("mol", "max_sequences", 0, int)
    if limit:
        trajs = trajs[:limit]
    context = cfg.get("model", "context_length", 512, int)
    seqs = [label_tokens(t, tok) for t in trajs]
    return [s for s in seqs if len(s) <= context]


def cmd_pretrain(cfg: Cfg) -> int:
    seed = cfg.get("run", "seed", 0, int)
    rd = _run_dir(cfg, "pretrain")
    run_hash = _freeze_config(cfg, rd)
    run_name = cfg.get("run", "name", "pretrain")
    tok = Tokenizer()
    mcfg = _model_config(cfg, tok)
    base = Checkpoint(
        config=mcfg,
        params=Model.init(mcfg).params,
        provenance={"phase": "base", "step": 0, "config_hash": run_hash, "parent": None},
    )
    seqs = textgen.build_pretrain_sequences(
        tok,
        n_prose=cfg.get("pretrain", "n_prose", 1200, int),
        n_primer=cfg.get("pretrain", "n_primer", 800, int),
        seed=seed,
    )
    tcfg = MolTrainConfig(
        variant=LossVariant.CE_NOKL,
        epochs=cfg.get("pretrain", "epochs", 3, int),
        steps=cfg.get("pretrain", "steps", None, int),
        batch_size=cfg.get("pretrain", "batch_size", 16, int),
        lr=cfg.get("pretrain", "lr", 1e-3, float),
        weight_decay=cfg.get("pretrain", "weight_decay", 0.1, float),
        seed=seed,
        checkpoint_every=0,
    )
    snapshots, metrics = train_mol(base, None, seqs, tcfg)
    step, final = snapshots[-1]
    final.provenance = {
        "phase": "base",
        "step": step,
        "config_hash": run_hash,
        "parent": None,
        "run": run_name,
        "lineage": [],
    }
    path = save_checkpoint(rd / "checkpoints" / "base.ckpt", final)
    write_metrics(rd / "metrics.jsonl", metrics)
    probe = textgen.general_lines(
        cfg.get("pretrain", "probe_count", 200, int),
        cfg.get("pretrain", "probe_seed", seed + 9999, int),
    )
    textgen.write_lines(rd / "probe.txt", probe)
    ppl = general_capability_probe(final, textgen.probe_token_sequences(tok, probe))
    _write_json(
        rd / "report.json",
        {
            "config_hash": run_hash,
            "seed": seed,
            "steps": step,
            "final_loss": metrics[-1]["total"] if metrics else None,
            "probe_perplexity": ppl,
            "checkpoint": path,
        },
    )
    print(f"base checkpoint at {path}; probe perplexity {ppl:.3f}")
    return EXIT_OK


def cmd_train_mol(cfg: Cfg) -> int:
    seed = cfg.get("run", "seed", 0, int)
    rd = _run_dir(cfg, "train-mol")
    run_hash = _freeze_config(cfg, rd)
    run_name = cfg.get("run", "name", "train-mol")
    tok = Tokenizer()
    base = load_checkpoint(cfg.require("mol", "base_checkpoint"))
    seqs = _load_corpus_sequences(cfg, tok)
    variant = LossVariant(cfg.get("mol", "variant", "mol"))
    trainee = base
    start_step = 0
    resume_from = cfg.get("mol", "resume_from")
    if resume_from:
        trainee = load_checkpoint(resume_from)
        start_step = int(trainee.provenance.get("step", 0))
    tcfg = MolTrainConfig(
        variant=variant,
        epochs=cfg.get("mol", "epochs", 3, int),
        steps=cfg.get("mol", "steps", None, int),
        batch_size=cfg.get("mol", "batch_size", 8, int),
        lr=cfg.get("mol", "lr", 5e-5, float),
        weight_decay=cfg.get("mol", "weight_decay", 0.1, float),
        grad_clip=cfg.get("mol", "grad_clip", 1.0, float),
        kl_weight=cfg.get("mol", "kl_weight", 1.0, float),
        normalize=cfg.get("mol", "normalize", True, bool),
        seed=seed,
        checkpoint_every=cfg.get("mol", "checkpoint_every", 0, int),
        start_step=start_step,
    )
    reference = base.clone()
    snapshots, metrics = train_mol(trainee, reference, seqs, tcfg)
    lineage = _lineage(base)
    paths = []
    for step, snap in snapshots:
        _stamp(snap, run_hash, run_name, lineage)
        paths.append(save_checkpoint(rd / "checkpoints" / f"mol-step{step:05d}.ckpt", snap))
    write_metrics(rd / "metrics.jsonl", metrics)
    _write_json(
        rd / "report.json",
        {
            "config_hash": run_hash,
            "seed": seed,
            "variant": variant.value,
            "sequences": len(seqs),
            "steps": snapshots[-1][0],
            "final_loss": metrics[-1]["total"] if metrics else None,
            "checkpoints": paths,
        },
    )
    print(f"trained {variant.value} for {snapshots[-1][0]} steps; final at {paths[-1]}")
    return EXIT_OK


def _load_rl_tasks(cfg: Cfg, seed: int):
    tasks_path = cfg.get("grpo", "tasks")
    if tasks_path:
        return read_tasks(tasks_path)
    return env_mod.gen_tasks(
        cfg.get("grpo", "task_count", 64, int),
        cfg.get("grpo", "task_tier", 1, int),
        cfg.get("grpo", "task_seed", seed + 101, int),
    )


def cmd_train_grpo(cfg: Cfg) -> int:
    seed = cfg.get("run", "seed", 0, int)
    rd = _run_dir(cfg, "train-grpo")
    run_hash = _freeze_config(cfg, rd)
    run_name = cfg.get("run", "name", "train-grpo")
    tok = Tokenizer()
    start = load_checkpoint(cfg.require("grpo", "start_checkpoint"))
    variant = PolicyOptVariant(cfg.get("grpo", "opt", "dr-grpo"))
    scheme = RewardScheme(cfg.get("grpo", "reward", "multi"))
    rlcfg = RlConfig(
        group_size=cfg.get("grpo", "group_size", 8, int),
        temperature=cfg.get("grpo", "temperature", 0.9, float),
        top_p=cfg.get("grpo", "top_p", 1.0, float),
        top_k=cfg.get("grpo", "top_k", 0, int),
        max_completion_length=cfg.get("grpo", "max_completion_length", 256, int),
        clip_ratio=cfg.get("grpo", "clip_ratio", 0.2, float),
        adv_eps=cfg.get("grpo", "adv_eps", 1e-4, float),
        kl_beta=cfg.get("grpo", "kl_beta", 0.0, float),
        steps=cfg.get("grpo", "steps", 200, int),
        batch_tasks=cfg.get("grpo", "batch_tasks", 4, int),
        lr=cfg.get("grpo", "lr", 1e-4, float),
        weight_decay=cfg.get("grpo", "weight_decay", 0.0, float),
        grad_clip=cfg.get("grpo", "grad_clip", 1.0, float),
        seed=seed,
        checkpoint_every=cfg.get("grpo", "checkpoint_every", 0, int),
    )
    tasks = _load_rl_tasks(cfg, seed)
    reference = None
    if rlcfg.kl_beta > 0:
        ref_path = cfg.get("grpo", "reference_checkpoint")
        reference = load_checkpoint(ref_path) if ref_path else start.clone()
    snapshots, metrics = train_grpo(
        start, tasks, rlcfg, scheme, tok, variant=variant, reference=reference
    )
    lineage = _lineage(start)
    paths = []
    for step, snap in snapshots:
        _stamp(snap, run_hash, run_name, lineage)
        paths.append(save_checkpoint(rd / "checkpoints" / f"grpo-step{step:05d}.ckpt", snap))
    write_metrics(rd / "metrics.jsonl", metrics)
    curve = [{"step": m["step"], "mean_reward": m["mean_reward"]} for m in metrics]
    _write_json(
        rd / "report.json",
        {
            "config_hash": run_hash,
            "seed": seed,
            "variant": variant.value,
            "scheme": scheme.value,
            "steps": rlcfg.steps,
            "tasks": len(tasks),
            "first10_mean": float(np.mean([c["mean_reward"] for c in curve[:10]])) if curve else None,
            "last10_mean": float(np.mean([c["mean_reward"] for c in curve[-10:]])) if curve else None,
            "checkpoints": paths,
        },
    )
    print(f"{variant.value} for {rlcfg.steps} steps; final at {paths[-1]}")
    return EXIT_OK


def _eval_checkpoint(
    ckpt: Checkpoint,
    tasks,
    tok: Tokenizer,
    sampling: SamplingConfig,
    scheme: RewardScheme,
    repeats: int,
    probe_lines: Optional[List[str]] = None,
) -> dict:
    model = ckpt.model()
    rows = []
    for rep in range(repeats):
        for task in tasks:
            prompt = grpo_mod.task_prompt_tokens(task, tok)
            seed = int(
                np.random.SeedSequence(
                    [sampling.seed, zlib.crc32(task.task_id.encode()), rep]
                ).generate_state(1)[0]
            )
            res = decode_batch(model, prompt, sampling, eos_id=tok.eos_id, rows=1, row_seeds=[seed])[0]
            text = tok.decode(res.tokens)
            reward_val, exec_res = env_mod.evaluate_output(text, task.ground_truth, scheme)
            rows.append(
                {
                    "task_id": task.task_id,
                    "rep": rep,
                    "reward": reward_val,
                    "success": bool(reward_val == 1.0),
                    "status": exec_res.status.value,
                    "truncated": bool(res.truncated),
                }
            )
    per_run = []
    for rep in range(repeats):
        sub = [r for r in rows if r["rep"] == rep]
        per_run.append(
            {
                "rep": rep,
                "success_rate": float(np.mean([r["success"] for r in sub])),
                "mean_reward": float(np.mean([r["reward"] for r in sub])),
            }
        )
    report = {
        "scheme": scheme.value,
        "repeats": repeats,
        "per_task": rows,
        "per_run": per_run,
        "success_rate": float(np.mean([r["success"] for r in rows])),
        "mean_reward": float(np.mean([r["reward"] for r in rows])),
        "checkpoint_provenance": ckpt.provenance,
    }
    if probe_lines is not None:
        report["probe_perplexity"] = general_capability_probe(
            ckpt, textgen.probe_token_sequences(tok, probe_lines)
        )
    return report


def verify_eval_report(report: dict) -> None:
    """Aggregates must recompute exactly from the per-task rows."""
    rows = report["per_task"]
    want_sr = float(np.mean([r["success"] for r in rows]))
    want_mr = float(np.mean([r["reward"] for r in rows]))
    if report["success_rate"] != want_sr or report["mean_reward"] != want_mr:
        raise ValueError("eval report aggregates do not match per-task rows")


def cmd_eval(cfg: Cfg) -> int:
    seed = cfg.get("run", "seed", 0, int)
    rd = _run_dir(cfg, "eval")
    run_hash = _freeze_config(cfg, rd)
    tok = Tokenizer()
    ckpt = load_checkpoint(cfg.require("eval", "checkpoint"))
    tasks = read_tasks(cfg.require("eval", "tasks"))
    sampling = SamplingConfig(
        temperature=cfg.get("eval", "temperature", 0.6, float),
        top_p=cfg.get("eval", "top_p", 0.95, float),
        top_k=cfg.get("eval", "top_k", 20, int),
        max_new_tokens=cfg.get("eval", "max_new_tokens", 96, int),
        seed=seed,
    )
    scheme = RewardScheme(cfg.get("grpo", "reward", "multi"))
    repeats = cfg.get("eval", "repeat", 1, int)
    probe_path = cfg.get("eval", "probe")
    probe = textgen.read_lines(probe_path) if probe_path else None
    report = _eval_checkpoint(ckpt, tasks, tok, sampling, scheme, repeats, probe)
    report["config_hash"] = run_hash
    report["seed"] = seed
    verify_eval_report(report)
    _write_json(rd / "report.json", report)
    rows = [[f"run {r['rep']}", f"{r['success_rate']:.3f}", f"{r['mean_reward']:.3f}"] for r in report["per_run"]]
    rows.append(["mean", f"{report['success_rate']:.3f}", f"{report['mean_reward']:.3f}"])
    print(render_table(["run", "pass@1", "mean_reward"], rows))
    if "probe_perplexity" in report:
        print(f"probe perplexity: {report['probe_perplexity']:.3f}")
    return EXIT_OK


def cmd_report(cfg: Cfg) -> int:
    rd = _run_dir(cfg, "report")
    run_hash = _freeze_config(cfg, rd)
    spec = cfg.require("report", "streams")
    streams: Dict[str, List[dict]] = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            run_id, path = part.split(":", 1)
        else:
            path = part
            run_id = Path(part).parent.name or part
        target = Path(path)
        if target.is_dir():
            target = target / "metrics.jsonl"
        streams[run_id.strip()] = read_metrics(target)
    window = cfg.get("report", "window", 10, int)
    report = reward_curve_report(streams, window=window)
    report["config_hash"] = run_hash
    _write_json(rd / "report.json", report)
    (rd / "curve.csv").write_text(reward_curve_csv(streams), encoding="utf-8")
    rows = [
        [r["run_id"], r["steps"], f"{r['initial']:.3f}", f"{r['final']:.3f}", f"{r['delta']:+.3f}"]
        for r in report["runs"]
    ]
    print(render_table(["run", "steps", "initial", "final", "delta"], rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------


def _row_label(row: str) -> str:
    if row == "base":
        return "base"
    if row.startswith("mol"):
        _, _, steps = row.partition(":")
        return f"+MoL(CP{steps})" if steps else "+MoL"
    return {"ce": "+CE", "ce-nokl": "+CE_NoKL", "ce-eetb": "+CE(EETB)"}.get(row, f"+{row}")


def _col_label(col: str) -> str:
    return {"none": "", "grpo": "+GRPO", "dr-grpo": "+Dr.GRPO"}[col]


def _ablate_cell(payload: dict) -> dict:
    """One grid cell: optional continual phase, optional RL phase, then eval."""
    cfg = Cfg(payload["sections"])
    row, col = payload["row"], payload["col"]
    cell_dir = Path(payload["cell_dir"])
    cell_dir.mkdir(parents=True, exist_ok=True)
    seed = payload["seed"]
    tok = Tokenizer()
    try:
        ckpt = load_checkpoint(payload["base_checkpoint"])
        if row != "base":
            variant_name, _, steps_spec = row.partition(":")
            variant = LossVariant("mol" if variant_name == "mol" else variant_name)
            seqs = corpus_mod.read_labeled_cache(payload["cache_path"])
            tcfg = MolTrainConfig(
                variant=variant,
                epochs=cfg.get("ablate", "mol_epochs", 3, int),
                steps=int(steps_spec) if steps_spec else None,
                batch_size=cfg.get("mol", "batch_size", 8, int),
                lr=cfg.get("mol", "lr", 5e-5, float),
                weight_decay=cfg.get("mol", "weight_decay", 0.1, float),
                kl_weight=cfg.get("mol", "kl_weight", 1.0, float),
                seed=seed,
            )
            snapshots, metrics = train_mol(ckpt, ckpt.clone(), seqs, tcfg)
            ckpt = snapshots[-1][1]
            write_metrics(cell_dir / "mol_metrics.jsonl", metrics)
        if col != "none":
            rlcfg = RlConfig(
                group_size=cfg.get("grpo", "group_size", 8, int),
                temperature=cfg.get("grpo", "temperature", 0.9, float),
                max_completion_length=cfg.get("grpo", "max_completion_length", 96, int),
                steps=cfg.get("ablate", "rl_steps", 40, int),
                batch_tasks=cfg.get("grpo", "batch_tasks", 4, int),
                lr=cfg.get("grpo", "lr", 1e-4, float),
                seed=seed,
            )
            tasks = read_tasks(payload["rl_tasks"])
            scheme = RewardScheme(cfg.get("grpo", "reward", "multi"))
            snapshots, metrics = train_grpo(
                ckpt, tasks, rlcfg, scheme, tok, variant=PolicyOptVariant(col)
            )
            ckpt = snapshots[-1][1]
            write_metrics(cell_dir / "grpo_metrics.jsonl", metrics)
        eval_tasks = read_tasks(payload["eval_tasks"])
        sampling = SamplingConfig(
            temperature=cfg.get("eval", "temperature", 0.6, float),
            top_p=cfg.get("eval", "top_p", 0.95, float),
            top_k=cfg.get("eval", "top_k", 20, int),
            max_new_tokens=cfg.get("eval", "max_new_tokens", 96, int),
            seed=seed,
        )
        scheme = RewardScheme(cfg.get("grpo", "reward", "multi"))
        report = _eval_checkpoint(ckpt, eval_tasks, tok, sampling, scheme, repeats=1)
        _write_json(cell_dir / "report.json", report)
        return {
            "row": row,
            "col": col,
            "label": _row_label(row) + _col_label(col),
            "status": "ok",
            "success_rate": report["success_rate"],
            "mean_reward": report["mean_reward"],
        }
    except Exception as exc:  # partial-failure tolerant: failed cells are marked
        return {
            "row": row,
            "col": col,
            "label": _row_label(row) + _col_label(col),
            "status": "failed",
            "error": str(exc),
        }


def cmd_ablate(cfg: Cfg) -> int:
    seed = cfg.get("run", "seed", 0, int)
    rd = _run_dir(cfg, "ablate")
    run_hash = _freeze_config(cfg, rd)
    tok = Tokenizer()
    rows = [r.strip() for r in cfg.get("ablate", "rows", "base,mol").split(",") if r.strip()]
    cols = [c.strip() for c in cfg.get("ablate", "cols", "none,dr-grpo").split(",") if c.strip()]
    base_path = cfg.require("ablate", "base_checkpoint")
    cfg.set("mol", "corpus", cfg.require("ablate", "corpus"))
    seqs = _load_corpus_sequences(cfg, tok)
    cache_path = rd / "labeled_cache.jsonl"
    corpus_mod.write_labeled_cache(cache_path, seqs)
    payloads = []
    for row in rows:
        for col in cols:
            payloads.append(
                {
                    "sections": cfg.sections,
                    "row": row,
                    "col": col,
                    "seed": seed,
                    "base_checkpoint": base_path,
                    "cache_path": str(cache_path),
                    "rl_tasks": cfg.require("ablate", "rl_tasks"),
                    "eval_tasks": cfg.require("ablate", "eval_tasks"),
                    "cell_dir": str(rd / "cells" / f"{row.replace(':', '_')}__{col}"),
                }
            )
    parallel = cfg.get("ablate", "parallel", 0, int)
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_ablate_cell, payloads))
    else:
        results = [_ablate_cell(p) for p in payloads]
    grid = {"config_hash": run_hash, "seed": seed, "cells": results}
    _write_json(rd / "report.json", grid)
    by_key = {(r["row"], r["col"]): r for r in results}
    table_rows = []
    for row in rows:
        line = [_row_label(row)]
        for col in cols:
            cell = by_key[(row, col)]
            if cell["status"] == "ok":
                line.append(f"{cell['success_rate']:.3f}/{cell['mean_reward']:.3f}")
            else:
                line.append("FAILED")
        table_rows.append(line)
    headers = ["model"] + ["(no RL)" if c == "none" else _col_label(c) for c in cols]
    print(render_table(headers, table_rows))
    failed = [r for r in results if r["status"] != "ok"]
    if failed:
        print(f"{len(failed)} cells failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "gen-data": cmd_gen_data,
    "stats": cmd_stats,
    "pretrain": cmd_pretrain,
    "train-mol": cmd_train_mol,
    "train-grpo": cmd_train_grpo,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--name", type=str, default=None)
        p.add_argument("--variant", choices=[v.value for v in LossVariant], default=None)
        p.add_argument("--opt", choices=[v.value for v in PolicyOptVariant], default=None)
        p.add_argument("--reward", choices=[s.value for s in RewardScheme], default=None)
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = Cfg.load(args.config)
        _apply_flags(cfg, args)
        return _COMMANDS[args.command](cfg)
    except (ConfigError, configparser.Error, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteGradient as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

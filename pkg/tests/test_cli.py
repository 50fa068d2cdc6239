import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from molrl.checkpoint import load_checkpoint
from molrl.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main, render_table, verify_eval_report
from molrl.metrics import read_metrics


def write_config(path: Path, sections: dict) -> Path:
    lines = []
    for section, kv in sections.items():
        lines.append(f"[{section}]")
        for k, v in kv.items():
            lines.append(f"{k} = {v}")
    path.write_text("\n".join(lines) + "\n")
    return path


MODEL = {
    "context_length": 256,
    "layer_count": 1,
    "model_width": 16,
    "head_count": 2,
    "ff_width": 32,
    "param_seed": 0,
    "dtype": "float32",
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the full micro pipeline once; individual tests inspect artifacts."""
    root = tmp_path_factory.mktemp("pipe")
    out = root / "runs"

    cfg = write_config(
        root / "gen.ini",
        {
            "run": {"seed": "3", "out": str(out), "name": "data"},
            "data": {"count": "12", "tier_weights": "1:1", "error_rate": "0.4", "max_turns": "3"},
        },
    )
    assert main(["gen-data", "--config", str(cfg)]) == EXIT_OK
    tasks_path = out / "data" / "tasks.jsonl"
    corpus_path = out / "data" / "trajectories.jsonl"

    cfg = write_config(
        root / "stats.ini",
        {
            "run": {"seed": "3", "out": str(out), "name": "stats"},
            "stats": {"corpus": str(corpus_path)},
        },
    )
    assert main(["stats", "--config", str(cfg)]) == EXIT_OK

    cfg = write_config(
        root / "pre.ini",
        {
            "run": {"seed": "3", "out": str(out), "name": "pre"},
            "model": {str(k): str(v) for k, v in MODEL.items()},
            "pretrain": {"n_prose": "20", "n_primer": "10", "steps": "4", "batch_size": "4",
                          "probe_count": "10"},
        },
    )
    assert main(["pretrain", "--config", str(cfg)]) == EXIT_OK
    base_ckpt = out / "pre" / "checkpoints" / "base.ckpt"
    probe_path = out / "pre" / "probe.txt"

    cfg = write_config(
        root / "mol.ini",
        {
            "run": {"seed": "3", "out": str(out), "name": "mol"},
            "model": {str(k): str(v) for k, v in MODEL.items()},
            "mol": {"corpus": str(corpus_path), "base_checkpoint": str(base_ckpt),
                     "steps": "3", "batch_size": "4", "lr": "1e-4", "checkpoint_every": "2"},
        },
    )
    assert main(["train-mol", "--config", str(cfg), "--variant", "mol"]) == EXIT_OK
    mol_ckpt = out / "mol" / "checkpoints" / "mol-step00003.ckpt"

    cfg = write_config(
        root / "rl.ini",
        {
            "run": {"seed": "3", "out": str(out), "name": "rl"},
            "grpo": {"start_checkpoint": str(mol_ckpt), "tasks": str(tasks_path),
                      "steps": "2", "group_size": "2", "batch_tasks": "2",
                      "max_completion_length": "16", "lr": "1e-4"},
        },
    )
    assert main(["train-grpo", "--config", str(cfg), "--opt", "dr-grpo", "--reward", "multi"]) == EXIT_OK
    rl_ckpt = out / "rl" / "checkpoints" / "grpo-step00002.ckpt"

    cfg = write_config(
        root / "eval.ini",
        {
            "run": {"seed": "3", "out": str(out), "name": "eval"},
            "eval": {"checkpoint": str(rl_ckpt), "tasks": str(tasks_path),
                      "max_new_tokens": "16", "repeat": "2", "probe": str(probe_path)},
        },
    )
    assert main(["eval", "--config", str(cfg)]) == EXIT_OK

    cfg = write_config(
        root / "report.ini",
        {
            "run": {"seed": "3", "out": str(out), "name": "report"},
            "report": {"streams": f"rl:{out / 'rl'}", "window": "2"},
        },
    )
    assert main(["report", "--config", str(cfg)]) == EXIT_OK
    return root, out


class TestPipelineArtifacts:
    def test_gen_data_line_counts(self, pipeline):
        _, out = pipeline
        tasks = (out / "data" / "tasks.jsonl").read_text().strip().split("\n")
        trajs = (out / "data" / "trajectories.jsonl").read_text().strip().split("\n")
        assert len(tasks) == 12 and len(trajs) == 12

    def test_gen_data_tier_distribution_matches_config(self, pipeline):
        _, out = pipeline
        recs = [json.loads(l) for l in (out / "data" / "tasks.jsonl").read_text().strip().split("\n")]
        assert all(r["tier"] == 1 for r in recs)
        report = json.loads((out / "data" / "report.json").read_text())
        # recount independently
        assert report["tier_histogram"] == {"1": 12}

    def test_stats_report_mass(self, pipeline):
        _, out = pipeline
        report = json.loads((out / "stats" / "report.json").read_text())
        assert sum(report["turn_hist"].values()) == report["size"] == 12

    def test_run_dir_layout(self, pipeline):
        _, out = pipeline
        rd = out / "mol"
        assert (rd / "config.ini").exists()
        assert (rd / "checkpoints").is_dir()
        assert (rd / "metrics.jsonl").exists()
        assert (rd / "report.json").exists()

    def test_metrics_stream_schema(self, pipeline):
        _, out = pipeline
        mol_metrics = read_metrics(out / "mol" / "metrics.jsonl")
        assert len(mol_metrics) == 3
        assert {"step", "variant", "total", "kl_component", "ce_component",
                "tokens_decision", "tokens_feedback", "lr"} == set(mol_metrics[0])
        rl_metrics = read_metrics(out / "rl" / "metrics.jsonl")
        assert len(rl_metrics) == 2
        assert rl_metrics[0]["scheme"] == "multi" and rl_metrics[0]["variant"] == "dr-grpo"

    def test_checkpoint_cadence_files(self, pipeline):
        _, out = pipeline
        names = sorted(p.name for p in (out / "mol" / "checkpoints").glob("*.ckpt"))
        assert names == ["mol-step00002.ckpt", "mol-step00003.ckpt"]

    def test_provenance_chain_resolves_to_base(self, pipeline):
        _, out = pipeline
        ck = load_checkpoint(out / "rl" / "checkpoints" / "grpo-step00002.ckpt")
        assert ck.provenance["phase"] == "grpo"
        lineage = ck.provenance["lineage"]
        assert [e["phase"] for e in lineage] == ["base", "mol"]
        assert all("params_hash" in e for e in lineage)
        assert ck.provenance["config_hash"]

    def test_eval_report_aggregates_recompute(self, pipeline):
        _, out = pipeline
        report = json.loads((out / "eval" / "report.json").read_text())
        verify_eval_report(report)
        assert report["repeats"] == 2
        assert len(report["per_run"]) == 2
        assert 0.0 <= report["success_rate"] <= 1.0
        assert "probe_perplexity" in report
        chain = report["checkpoint_provenance"]["lineage"]
        assert chain[0]["phase"] == "base"

    def test_report_outputs(self, pipeline):
        _, out = pipeline
        report = json.loads((out / "report" / "report.json").read_text())
        assert report["runs"][0]["run_id"] == "rl"
        assert report["runs"][0]["steps"] == 2
        csv = (out / "report" / "curve.csv").read_text().strip().split("\n")
        assert csv[0] == "step,run_id,mean_reward"
        assert len(csv) == 3

    def test_train_mol_resume_reproduces_metrics_tail(self, pipeline, tmp_path):
        root, out = pipeline
        cfg = write_config(
            tmp_path / "resume.ini",
            {
                "run": {"seed": "3", "out": str(tmp_path / "runs"), "name": "resumed"},
                "model": {str(k): str(v) for k, v in MODEL.items()},
                "mol": {
                    "corpus": str(out / "data" / "trajectories.jsonl"),
                    "base_checkpoint": str(out / "pre" / "checkpoints" / "base.ckpt"),
                    "resume_from": str(out / "mol" / "checkpoints" / "mol-step00002.ckpt"),
                    "steps": "3",
                    "batch_size": "4",
                    "lr": "1e-4",
                },
            },
        )
        assert main(["train-mol", "--config", str(cfg), "--variant", "mol"]) == EXIT_OK
        full = read_metrics(out / "mol" / "metrics.jsonl")
        tail = read_metrics(tmp_path / "runs" / "resumed" / "metrics.jsonl")
        assert tail == full[2:]

    def test_artifacts_embed_config_hash(self, pipeline):
        _, out = pipeline
        for name in ("data", "pre", "mol", "rl", "eval"):
            report = json.loads((out / name / "report.json").read_text())
            assert report["config_hash"], name


class TestDeterminism:
    def test_gen_data_rerun_byte_identical(self, tmp_path):
        out = tmp_path / "o"
        cfg = write_config(
            tmp_path / "c.ini",
            {
                "run": {"seed": "11", "out": str(out), "name": "d"},
                "data": {"count": "6", "tier_weights": "1:1"},
            },
        )
        rels = ("d/tasks.jsonl", "d/trajectories.jsonl", "d/report.json", "d/config.ini")
        assert main(["gen-data", "--config", str(cfg)]) == EXIT_OK
        first = {rel: (out / rel).read_bytes() for rel in rels}
        assert main(["gen-data", "--config", str(cfg)]) == EXIT_OK
        for rel in rels:
            assert (out / rel).read_bytes() == first[rel], rel

    def test_gen_data_split_files(self, tmp_path):
        out = tmp_path / "o"
        cfg = write_config(
            tmp_path / "c.ini",
            {
                "run": {"seed": "2", "out": str(out), "name": "d"},
                "data": {"count": "12", "tier_weights": "1:1", "split": "8,2,2"},
            },
        )
        assert main(["gen-data", "--config", str(cfg)]) == EXIT_OK
        sizes = {}
        for tag in ("train", "validation", "test"):
            lines = (out / "d" / f"trajectories.{tag}.jsonl").read_text().strip().split("\n")
            sizes[tag] = len(lines)
        assert sizes == {"train": 8, "validation": 2, "test": 2}
        ids = set()
        for tag in ("train", "validation", "test"):
            for line in (out / "d" / f"trajectories.{tag}.jsonl").read_text().strip().split("\n"):
                ids.add(json.loads(line)["task_id"])
        assert len(ids) == 12  # disjoint partitions cover the corpus

    def test_different_seed_differs(self, tmp_path):
        payloads = []
        for seed in ("1", "2"):
            out = tmp_path / seed
            cfg = write_config(
                tmp_path / f"s{seed}.ini",
                {
                    "run": {"seed": seed, "out": str(out), "name": "d"},
                    "data": {"count": "6", "tier_weights": "1:1"},
                },
            )
            assert main(["gen-data", "--config", str(cfg)]) == EXIT_OK
            payloads.append((out / "d" / "tasks.jsonl").read_bytes())
        assert payloads[0] != payloads[1]


class TestExitCodes:
    def test_missing_required_key_is_config_error(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", {"run": {"seed": "1", "out": str(tmp_path)}})
        assert main(["stats", "--config", str(cfg)]) == EXIT_CONFIG

    def test_missing_config_file_is_config_error(self, tmp_path):
        assert main(["stats", "--config", str(tmp_path / "nope.ini")]) == EXIT_CONFIG

    def test_missing_input_file_is_io_error(self, tmp_path):
        cfg = write_config(
            tmp_path / "c.ini",
            {
                "run": {"seed": "1", "out": str(tmp_path / "o"), "name": "x"},
                "stats": {"corpus": str(tmp_path / "missing.jsonl")},
            },
        )
        assert main(["stats", "--config", str(cfg)]) == EXIT_IO

    def test_bad_set_flag(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", {"run": {"seed": "1"}})
        assert main(["stats", "--config", str(cfg), "--set", "nonsense"]) == EXIT_CONFIG

    def test_flag_overrides_win(self, tmp_path):
        out = tmp_path / "o"
        cfg = write_config(
            tmp_path / "c.ini",
            {
                "run": {"seed": "1", "out": str(out), "name": "d"},
                "data": {"count": "20", "tier_weights": "1:1"},
            },
        )
        assert main(["gen-data", "--config", str(cfg), "--set", "data.count=4"]) == EXIT_OK
        lines = (out / "d" / "tasks.jsonl").read_text().strip().split("\n")
        assert len(lines) == 4


class TestAblate:
    def test_two_by_two_grid(self, pipeline, tmp_path):
        root, out = pipeline
        cfg = write_config(
            tmp_path / "ab.ini",
            {
                "run": {"seed": "3", "out": str(tmp_path / "runs"), "name": "grid"},
                "model": {str(k): str(v) for k, v in MODEL.items()},
                "ablate": {
                    "rows": "base,mol:2",
                    "cols": "none,dr-grpo",
                    "base_checkpoint": str(out / "pre" / "checkpoints" / "base.ckpt"),
                    "corpus": str(out / "data" / "trajectories.jsonl"),
                    "rl_tasks": str(out / "data" / "tasks.jsonl"),
                    "eval_tasks": str(out / "data" / "tasks.jsonl"),
                    "rl_steps": "1",
                },
                "mol": {"batch_size": "4", "lr": "1e-4"},
                "grpo": {"group_size": "2", "batch_tasks": "1", "max_completion_length": "12"},
                "eval": {"max_new_tokens": "12"},
            },
        )
        assert main(["ablate", "--config", str(cfg)]) == EXIT_OK
        grid = json.loads((tmp_path / "runs" / "grid" / "report.json").read_text())
        assert len(grid["cells"]) == 4
        assert all(c["status"] == "ok" for c in grid["cells"])
        keys = {(c["row"], c["col"]) for c in grid["cells"]}
        assert keys == {("base", "none"), ("base", "dr-grpo"), ("mol:2", "none"), ("mol:2", "dr-grpo")}

    def test_failed_cell_marked_not_fatal(self, pipeline, tmp_path):
        root, out = pipeline
        cfg = write_config(
            tmp_path / "ab.ini",
            {
                "run": {"seed": "3", "out": str(tmp_path / "runs"), "name": "grid"},
                "model": {str(k): str(v) for k, v in MODEL.items()},
                "ablate": {
                    "rows": "base,bogus-variant",
                    "cols": "none",
                    "base_checkpoint": str(out / "pre" / "checkpoints" / "base.ckpt"),
                    "corpus": str(out / "data" / "trajectories.jsonl"),
                    "rl_tasks": str(out / "data" / "tasks.jsonl"),
                    "eval_tasks": str(out / "data" / "tasks.jsonl"),
                },
                "eval": {"max_new_tokens": "12"},
            },
        )
        assert main(["ablate", "--config", str(cfg)]) == EXIT_OK
        grid = json.loads((tmp_path / "runs" / "grid" / "report.json").read_text())
        by_row = {c["row"]: c for c in grid["cells"]}
        assert by_row["base"]["status"] == "ok"
        assert by_row["bogus-variant"]["status"] == "failed"


def test_render_table_alignment():
    text = render_table(["a", "bb"], [["1", "2"], ["333", "4"]])
    lines = text.split("\n")
    assert len(lines) == 4
    assert all(len(l.rstrip()) <= len(lines[0]) + 4 for l in lines)

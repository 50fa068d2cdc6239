import numpy as np

from molrl.corpus import SegmentLabel, label_tokens
from molrl.textgen import (
    build_pretrain_sequences,
    general_lines,
    primer_trajectory,
    probe_token_sequences,
    read_lines,
    write_lines,
)
from molrl.env import gen_tasks


def test_general_lines_deterministic_and_ascii():
    a = general_lines(50, 3)
    b = general_lines(50, 3)
    assert a == b
    assert all(line.isascii() and line for line in a)


def test_different_seeds_differ():
    assert general_lines(20, 1) != general_lines(20, 2)


def test_lines_file_roundtrip(tmp_path):
    lines = general_lines(10, 0)
    path = tmp_path / "probe.txt"
    write_lines(path, lines)
    assert read_lines(path) == lines


def test_probe_sequences_are_bos_body_eos(tok):
    seqs = probe_token_sequences(tok, ["abc"])
    assert seqs[0][0] == tok.bos_id and seqs[0][-1] == tok.eos_id
    assert tok.decode(seqs[0][1:-1].tolist()) == "abc"


def test_primer_trajectory_is_valid_and_solves_task(tok):
    task = gen_tasks(1, 1, 4)[0]
    traj = primer_trajectory(task, 0)
    assert [m.role for m in traj.messages] == ["system", "user", "assistant"]
    from molrl.env import extract_code
    from molrl.lang import run

    result = run(extract_code(traj.messages[2].content))
    assert result.output == task.ground_truth


def test_pretrain_sequences_mix_and_label_everything(tok):
    seqs = build_pretrain_sequences(tok, n_prose=10, n_primer=6, seed=5)
    assert len(seqs) == 16
    kinds = {s.task_id.split("-")[0] for s in seqs}
    assert kinds == {"prose", "primer"}
    for s in seqs:
        assert s.labels[0] == SegmentLabel.PROMPT
        assert np.all(s.labels[1:] == SegmentLabel.FEEDBACK)


def test_pretrain_sequences_deterministic(tok):
    a = build_pretrain_sequences(tok, 8, 4, seed=9)
    b = build_pretrain_sequences(tok, 8, 4, seed=9)
    assert [s.task_id for s in a] == [s.task_id for s in b]
    assert all(np.array_equal(x.tokens, y.tokens) for x, y in zip(a, b))

import csv

import numpy as np
import pytest

from uniflow import cli
from uniflow import tensor as T
from uniflow.checkpoint import read_ufad

TINY_YAML = """
model: {depth: 1, embed_size: 16, num_heads: 2, ffn_mult: 2}
train: {steps: 3, batch_size: 4, seed: 5}
inference: {steps: 2, n_samples: 2}
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    (root / "run.yaml").write_text(TINY_YAML)
    assert cli.main(["train", "--config", str(root / "run.yaml"), "--out", str(root / "out")]) == 0
    return root


def rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_train_outputs(trained):
    log = rows(trained / "out" / "train_log.csv")
    assert log[0] == ["step", "total", "fm", "clip", "seq", "masked_fraction", "lr"]
    assert len(log) == 4 and len({len(r) for r in log}) == 1
    assert (trained / "out" / "checkpoint.ufad").exists()
    assert len(rows(trained / "out" / "eval.csv")) == 4


def test_train_same_seed_same_log(trained, tmp_path):
    assert cli.main(["train", "--config", str(trained / "run.yaml"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "train_log.csv").read_bytes() == (trained / "out" / "train_log.csv").read_bytes()
    assert (tmp_path / "eval.csv").read_bytes() == (trained / "out" / "eval.csv").read_bytes()


def test_eval_reproduces_in_run_numbers(trained, tmp_path):
    out = tmp_path / "eval.csv"
    args = ["eval", "--ckpt", str(trained / "out" / "checkpoint.ufad"), "--n-samples", "2", "--steps", "2",
            "--out", str(out)]
    assert cli.main(args) == 0
    assert out.read_bytes() == (trained / "out" / "eval.csv").read_bytes()


def test_missing_config_exit_2(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "gone.yaml"), "--out", str(tmp_path)]) == 2
    assert "gone.yaml" in capsys.readouterr().err


def test_bad_config_reports_line_and_column(tmp_path, capsys):
    (tmp_path / "bad.yaml").write_text("train:\n  stepz: 3\n")
    assert cli.main(["train", "--config", str(tmp_path / "bad.yaml"), "--out", str(tmp_path)]) == 2
    assert "bad.yaml:2:3" in capsys.readouterr().err


def test_generate_header_defaults_and_determinism(trained, tmp_path, capsys):
    ck = str(trained / "out" / "checkpoint.ufad")
    for name in ("a", "b"):
        code = cli.main(["generate", "--ckpt", ck, "--task", "ta_copy", "--input", "sym:3,1,7", "--steps", "2",
                         "--seed", "11", "--out", str(tmp_path / f"{name}.ufad")])
        assert code == 0
    header = capsys.readouterr().out.splitlines()[0]
    assert "steps=2 cfg=5 " in header
    assert (tmp_path / "a.ufad").read_bytes() == (tmp_path / "b.ufad").read_bytes()
    tensors, meta = read_ufad(tmp_path / "a.ufad")
    assert meta["kind"] == "latent" and tensors["latent"].shape[1] == 8
    dump = rows(tmp_path / "a.csv")
    assert dump[0] == ["frame"] + [f"d{i}" for i in range(8)] and len(dump) == tensors["latent"].shape[0] + 1


def test_generate_default_header_echoes_default_settings(trained, tmp_path, capsys):
    ck = str(trained / "out" / "checkpoint.ufad")
    assert cli.main(["generate", "--ckpt", ck, "--task", "nta_events", "--input", "evt:2,5",
                     "--out", str(tmp_path / "e.ufad")]) == 0
    assert "steps=25 cfg=5 " in capsys.readouterr().out


def test_generate_denoise_defaults_to_unguided(trained, tmp_path, capsys):
    ck = str(trained / "out" / "checkpoint.ufad")
    cli.write_frames_csv(np.random.default_rng(0).standard_normal((6, 8)), tmp_path / "noisy.csv")
    assert cli.main(["generate", "--ckpt", ck, "--task", "ta_denoise", "--input", f"file:{tmp_path / 'noisy.csv'}",
                     "--steps", "2", "--out", str(tmp_path / "d.ufad")]) == 0
    assert "cfg=1 " in capsys.readouterr().out
    tensors, _ = read_ufad(tmp_path / "d.ufad")
    assert tensors["latent"].shape == (6, 8)


@pytest.mark.parametrize(
    "task, spec",
    [("tts", "sym:1"), ("ta_copy", "evt:1"), ("ta_copy", "sym:99"), ("nta_events", "evt:1,1"), ("ta_copy", "1,2")],
)
def test_generate_bad_input_exit_2(trained, tmp_path, task, spec):
    ck = str(trained / "out" / "checkpoint.ufad")
    assert cli.main(["generate", "--ckpt", ck, "--task", task, "--input", spec, "--out", str(tmp_path / "x")]) == 2


def test_sweep_five_rows_per_task(trained, tmp_path):
    out = tmp_path / "sweep.csv"
    ck = str(trained / "out" / "checkpoint.ufad")
    assert cli.main(["sweep", "--ckpt", ck, "--tasks", "ta_denoise,nta_events", "--n-samples", "1",
                     "--out", str(out)]) == 0
    body = rows(out)[1:]
    assert [r[0] for r in body].count("ta_denoise") == 5 and [r[0] for r in body].count("nta_events") == 5
    assert [r[1] for r in body[:5]] == ["1", "2", "3", "5", "7"]


def test_ablate_one_row_per_arm(trained, tmp_path):
    out = tmp_path / "ablate.csv"
    args = ["ablate", "--config", str(trained / "run.yaml"), "--steps", "1", "--modes", "dual,input",
            "--n-samples", "1", "--out", str(out)]
    assert cli.main(args) == 0
    assert [r[0] for r in rows(out)[1:]] == ["dual/balanced", "input/balanced", "dual/unbalanced"]


def test_gradcheck_passes_on_subset(capsys):
    assert cli.main(["gradcheck", "--seeds", "1", "--ops", "matmul,softmax"]) == 0
    out = capsys.readouterr().out
    assert "matmul" in out and "softmax" in out


def test_gradcheck_fault_injection_names_op(monkeypatch, capsys):
    monkeypatch.setitem(T.BACKWARD_RULES, "gelu", lambda node, g: (0.5 * g,))
    assert cli.main(["gradcheck", "--seeds", "1", "--ops", "gelu,tanh"]) == 1
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert last.startswith("FAILED:") and "gelu" in last and "tanh" not in last


def test_numeric_failure_exit_3(trained, monkeypatch, tmp_path):
    from uniflow import train as TR

    def boom(*a, **k):
        raise TR.NumericalError("non-finite loss at step 1")

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--config", str(trained / "run.yaml"), "--out", str(tmp_path)]) == 3


def test_argparse_usage_error_exit_2():
    with pytest.raises(SystemExit) as info:
        cli.main(["generate"])
    assert info.value.code == 2

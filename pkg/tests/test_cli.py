"""Command line behavior: exit codes, error naming, and the tiny
end-to-end workflow."""
import filecmp
import os

import pytest

from stagedasr.cli import run

TINY_INI = """\
[data]
seed = 5
n_chars = 4
n_words = 6
frames_per_char = 4
feature_dim = 5
noise = 0.1
min_words = 1
max_words = 2
n_train = 16
n_dev = 4
frame_budget = 160

[model]
hidden = 8
target_layers = 3
lm_embed = 8
lm_hidden = 8

[stage]
num_merges = 4

[schedule]
epochs = 1
lm_epochs = 1
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Tiny corpus, BPE model, LM, and stage-1 checkpoint, built once."""
    wd = str(tmp_path_factory.mktemp("cliwork"))
    with open(os.path.join(wd, "run.ini"), "w", encoding="utf-8") as f:
        f.write(TINY_INI)
    for argv in (["synth-data"], ["bpe-learn"], ["lm-train"],
                 ["train", "--stage", "1"]):
        code = run(argv + ["--workdir", wd, "--config", "run.ini"])
        assert code == 0, argv
    return wd


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "synth-data" in capsys.readouterr().out


def test_unknown_flag_exits_two():
    assert run(["decode", "--ckpt", "a", "--data", "b", "--bogus"]) == 2


def test_train_flag_validation(capsys):
    checks = (
        (["train", "--stage", "2", "--init", "x", "--config", "c"],
         "--method"),
        (["train", "--stage", "2", "--method", "joint", "--config", "c"],
         "--init"),
        (["train", "--stage", "1", "--method", "joint", "--config", "c"],
         "--method"),
        (["train", "--stage", "1", "--init", "x", "--config", "c"],
         "--init"),
        (["train", "--stage", "2", "--method", "joint", "--init", "x",
          "--loss", "ce", "--config", "c"], "--loss"),
    )
    for argv, flag in checks:
        assert run(argv) == 2, argv
        assert flag in capsys.readouterr().err


def test_missing_config_named(tmp_path, capsys):
    argv = ["train", "--stage", "1", "--config", "absent.ini",
            "--workdir", str(tmp_path)]
    assert run(argv) == 2
    assert "absent.ini" in capsys.readouterr().err


def test_unknown_config_key_named(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[data]\nseed = 1\nbogus = 2\n", encoding="utf-8")
    argv = ["synth-data", "--config", "bad.ini", "--workdir", str(tmp_path)]
    assert run(argv) == 2
    err = capsys.readouterr().err
    assert "bad.ini" in err and "bogus" in err


def test_runs_echo_resolved_config(workdir, capsys):
    assert run(["bpe-learn", "--workdir", workdir,
                "--config", "run.ini"]) == 0
    out = capsys.readouterr().out
    assert "[data]" in out and "seed = 5" in out
    assert "letters = ABCD" in out          # derived value, echoed resolved
    assert "epochs = 1" in out


def test_workflow_writes_artifacts(workdir):
    for name in ("train.tsv", "dev.tsv", "bpe.txt", "lm.ckpt",
                 "stage1.ckpt", "stage1.metrics.csv"):
        assert os.path.exists(os.path.join(workdir, name)), name
    with open(os.path.join(workdir, "stage1.metrics.csv")) as f:
        assert f.readline() == "epoch,split,metric,value\n"


def test_synth_data_is_reproducible(workdir, tmp_path):
    wd2 = str(tmp_path)
    with open(os.path.join(wd2, "run.ini"), "w", encoding="utf-8") as f:
        f.write(TINY_INI)
    assert run(["synth-data", "--workdir", wd2, "--config", "run.ini"]) == 0
    assert filecmp.cmp(os.path.join(workdir, "train.tsv"),
                       os.path.join(wd2, "train.tsv"), shallow=False)
    name = os.listdir(os.path.join(workdir, "train"))[0]
    assert filecmp.cmp(os.path.join(workdir, "train", name),
                       os.path.join(wd2, "train", name), shallow=False)


def test_decode_writes_and_repeats_identically(workdir):
    base = ["decode", "--workdir", workdir, "--ckpt", "stage1.ckpt",
            "--data", "dev.tsv"]
    assert run(base + ["--out", "h1.tsv"]) == 0
    assert run(base + ["--out", "h2.tsv"]) == 0
    p1 = os.path.join(workdir, "h1.tsv")
    assert filecmp.cmp(p1, os.path.join(workdir, "h2.tsv"), shallow=False)
    with open(p1, encoding="utf-8") as f:
        lines = f.readlines()
    assert len(lines) == 4 and all("\t" in ln for ln in lines)


def test_eval_self_is_zero(workdir, capsys):
    argv = ["eval", "--workdir", workdir, "--refs", "dev.tsv",
            "--hyps", "dev.tsv", "--unit", "word"]
    assert run(argv) == 0
    assert capsys.readouterr().out.strip() == "WER 0.00"


def test_eval_decoded_hyps(workdir, capsys):
    argv = ["eval", "--workdir", workdir, "--refs", "dev.tsv",
            "--hyps", "h1.tsv", "--unit", "char"]
    assert run(argv) == 0
    out = capsys.readouterr().out.strip()
    assert out.startswith("CER ") and float(out.split()[1]) >= 0.0


def test_eval_id_mismatch_exits_three(tmp_path, capsys):
    (tmp_path / "r.tsv").write_text("a\tAB\n", encoding="utf-8")
    (tmp_path / "h.tsv").write_text("b\tAB\n", encoding="utf-8")
    argv = ["eval", "--workdir", str(tmp_path), "--refs", "r.tsv",
            "--hyps", "h.tsv", "--unit", "char"]
    assert run(argv) == 3
    assert "missing id" in capsys.readouterr().err


def test_eval_bpe_requires_model_and_letters(workdir, capsys):
    argv = ["eval", "--workdir", workdir, "--refs", "dev.tsv",
            "--hyps", "dev.tsv", "--unit", "bpe"]
    assert run(argv) == 2
    assert "--bpe-model" in capsys.readouterr().err
    assert run(argv + ["--bpe-model", "bpe.txt"]) == 2
    assert "--letters" in capsys.readouterr().err
    assert run(argv + ["--bpe-model", "bpe.txt", "--letters", "ABCD"]) == 0
    assert capsys.readouterr().out.strip() == "BER 0.00"


def test_decode_lm_needs_stage3(workdir, capsys):
    argv = ["decode", "--workdir", workdir, "--ckpt", "stage1.ckpt",
            "--data", "dev.tsv", "--lm", "lm.ckpt"]
    assert run(argv) == 2
    assert "stage-3" in capsys.readouterr().err


def test_missing_checkpoint_exits_three(workdir, capsys):
    argv = ["decode", "--workdir", workdir, "--ckpt", "nosuch.ckpt",
            "--data", "dev.tsv"]
    assert run(argv) == 3
    assert "nosuch.ckpt" in capsys.readouterr().err


def test_gradcheck_module_selection(capsys):
    assert run(["gradcheck", "--module", "pooling"]) == 0
    assert "pooling" in capsys.readouterr().out
    assert run(["gradcheck", "--module", "nosuch"]) == 2
    assert "nosuch" in capsys.readouterr().err

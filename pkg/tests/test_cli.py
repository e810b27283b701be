import csv
import json

import pytest

from contrail.cli import main

TINY = ["--set", "grid=2", "--set", "patch=2", "--set", "d=8", "--set", "hidden=8", "--set", "embed_dim=4",
        "--set", "lattice=6", "--set", "steps=4", "--set", "warmup_steps=1", "--set", "n_per_task=1",
        "--set", "eval_fractions=[]"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err: str) -> dict:
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", *TINY, "--out", str(out)]) == 0
    return out


# ---------------------------------------------------------------- config handling

def test_unknown_key_rejected_before_work(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--set", "lamda=0.5", "--out", tmp_path / "o")
    assert code == 1
    e = error_line(err)
    assert e["error"] == "KeyError" and "lamda" in e["message"]
    assert not (tmp_path / "o").exists()


def test_unknown_key_in_config_file(capsys, tmp_path):
    (tmp_path / "c.json").write_text('{"batch": 4}')
    code, _, err = run(capsys, "train", "--config", tmp_path / "c.json", "--out", tmp_path / "o")
    assert code == 1 and "batch" in error_line(err)["message"]


def test_missing_config_file(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--config", tmp_path / "none.json", "--out", tmp_path / "o")
    assert code == 1 and error_line(err)["error"] == "FileNotFoundError"


def test_usage_error_exit_code(capsys):
    assert main(["no-such-command"]) == 2


def test_effective_config_echoed(trained):
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["steps"] == 4 and cfg["n_per_task"] == 1 and cfg["eval_fractions"] == []


def test_config_file_then_overrides_then_seed(capsys, tmp_path):
    (tmp_path / "c.json").write_text('{"n_per_task": 1, "seed": 5}')
    code, _, _ = run(capsys, "gen-data", "--config", tmp_path / "c.json", "--set", "seed=6", "--seed", 7,
                     "--out", tmp_path / "o")
    assert code == 0
    assert json.loads((tmp_path / "o" / "config.json").read_text())["seed"] == 7


# ---------------------------------------------------------------- gen-data

def test_gen_data_counts(capsys, tmp_path):
    code, out, _ = run(capsys, "gen-data", "--n-per-task", 10, "--out", tmp_path)
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 10 and all(l.split("\t")[1] == "10" for l in lines[:9])
    assert lines[-1].startswith("total\t90\t")


def test_gen_data_deterministic(capsys, tmp_path):
    for d in ("a", "b"):
        assert run(capsys, "gen-data", "--n-per-task", 1, "--seed", 3, "--out", tmp_path / d)[0] == 0
    assert (tmp_path / "a" / "episodes.bin").read_bytes() == (tmp_path / "b" / "episodes.bin").read_bytes()


def test_gen_data_rejects_zero(capsys, tmp_path):
    code, _, err = run(capsys, "gen-data", "--n-per-task", 0, "--out", tmp_path)
    assert code == 1 and error_line(err)["error"] == "ValueError"


def test_unwritable_output_reports_path(capsys, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "gen-data", "--n-per-task", 1, "--out", blocker / "sub")
    assert code == 1 and str(blocker) in error_line(err)["message"]


# ---------------------------------------------------------------- train / ablate / resume

def test_train_outputs(trained):
    rows = list(csv.DictReader(open(trained / "metrics.csv")))
    assert len(rows) == 4 and list(rows[0]) == ["step", "lr", "bc", "sl", "slg", "total"]
    assert (trained / "checkpoint.ckpt").exists()


def test_lambda_one_logs_contrastive_columns_with_zero_weight(capsys, tmp_path):
    assert run(capsys, "train", *TINY, "--set", "lambda=1.0", "--out", tmp_path)[0] == 0
    for r in csv.DictReader(open(tmp_path / "metrics.csv")):
        assert float(r["sl"]) > 0 and float(r["total"]) == float(r["bc"])


def test_lambda_sweep_files(capsys, tmp_path):
    code, out, _ = run(capsys, "ablate", *TINY, "--sweep", "lambda=0.0,0.5,1.0", "--out", tmp_path)
    assert code == 0
    for v in ("0.0", "0.5", "1.0"):
        assert (tmp_path / f"lambda{v}" / f"metrics_lambda{v}.csv").exists()
    assert len(json.loads((tmp_path / "summary.json").read_text())) == 3


def test_ablate_rejects_unknown_sweep_key(capsys, tmp_path):
    code, _, err = run(capsys, "ablate", *TINY, "--sweep", "lamda=0.5", "--out", tmp_path)
    assert code == 1 and "lamda" in error_line(err)["message"]


def test_resume_reproduces_straight_run(capsys, tmp_path, trained):
    assert run(capsys, "train", *TINY, "--set", "stop_at=2", "--out", tmp_path / "half")[0] == 0
    code, _, _ = run(capsys, "train", *TINY, "--resume", tmp_path / "half" / "checkpoint.ckpt",
                     "--out", tmp_path / "half")
    assert code == 0
    assert (tmp_path / "half" / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()
    assert (tmp_path / "half" / "checkpoint.ckpt").read_bytes() == (trained / "checkpoint.ckpt").read_bytes()


# ---------------------------------------------------------------- eval / strip / separation

def test_eval_full_and_stripped_identical(capsys, tmp_path, trained):
    ck = trained / "checkpoint.ckpt"
    assert run(capsys, "strip", "--checkpoint", ck, "--out", tmp_path)[0] == 0
    _, full, _ = run(capsys, "eval", "--checkpoint", ck, "--episodes", 2, "--out", tmp_path / "a")
    _, stripped, _ = run(capsys, "eval", "--checkpoint", tmp_path / "checkpoint.stripped.ckpt", "--episodes", 2,
                         "--out", tmp_path / "b")
    assert full == stripped
    res = json.loads(full)
    assert res["aggregate"] == pytest.approx(sum(res["per_task"].values()) / 9)
    assert res["episodes_per_task"] == 2


def test_eval_default_episode_count():
    from contrail.cli import build_parser
    assert build_parser().parse_args(["eval", "--checkpoint", "x"]).episodes == 25


def test_eval_missing_checkpoint(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "none.ckpt", "--out", tmp_path)
    assert code == 1 and error_line(err)["error"] == "FileNotFoundError"


def test_separation_command(capsys, tmp_path, trained):
    code, out, _ = run(capsys, "separation", "--checkpoint", trained / "checkpoint.ckpt", "--episodes", 2,
                       "--out", tmp_path)
    assert code == 0
    s = json.loads((tmp_path / "separation.json").read_text())["silhouette"]
    assert -1.0 <= s <= 1.0 and out.startswith("silhouette\t")


# ---------------------------------------------------------------- probe-similarity / export

def test_probe_repeated_instruction_gives_equal_columns(capsys, tmp_path, trained):
    text = "press the red button"
    code, _, _ = run(capsys, "probe-similarity", "--checkpoint", trained / "checkpoint.ckpt",
                     "--instruction", text, "--instruction", text, "--instruction", "press the blue button",
                     "--out", tmp_path)
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "similarity.csv")))
    assert rows[0] == ["frame", text, text, "press the blue button"]
    for r in rows[1:]:
        assert r[1] == r[2]
        assert all(-1.0 <= float(v) <= 1.0 for v in r[1:])


def test_probe_rejects_empty_instructions(capsys, tmp_path, trained):
    code, _, err = run(capsys, "probe-similarity", "--checkpoint", trained / "checkpoint.ckpt", "--out", tmp_path)
    assert code == 1 and "empty" in error_line(err)["message"]


def test_probe_rejects_stripped_checkpoint(capsys, tmp_path, trained):
    run(capsys, "strip", "--checkpoint", trained / "checkpoint.ckpt", "--out", tmp_path)
    code, _, err = run(capsys, "probe-similarity", "--checkpoint", tmp_path / "checkpoint.stripped.ckpt",
                       "--instruction", "x", "--out", tmp_path)
    assert code == 1 and "stripped" in error_line(err)["message"]


def test_export(capsys, tmp_path, trained):
    assert run(capsys, "export", "--checkpoint", trained / "checkpoint.ckpt", "--out", tmp_path)[0] == 0
    losses = (tmp_path / "losses.csv").read_text().splitlines()
    assert losses[0] == "step,lr,bc,sl,slg,total" and len(losses) == 5
    assert (tmp_path / "evals.csv").read_text().startswith("step,mean,")


def test_inputs_not_mutated(capsys, tmp_path, trained):
    ck = trained / "checkpoint.ckpt"
    before = ck.read_bytes()
    run(capsys, "strip", "--checkpoint", ck, "--out", tmp_path)
    run(capsys, "export", "--checkpoint", ck, "--out", tmp_path)
    assert ck.read_bytes() == before

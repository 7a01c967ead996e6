from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from loraxs.cli import main, run
from loraxs.registry import load_checkpoint, load_weights
from loraxs.training import LinearStack, Layer, evaluate, Dataset

GOLDEN = Path(__file__).parent / "golden"
ROBERTA = ["--layers", "24", "--modules", "2", "--hidden", "1024", "--rank", "16"]
GPT3 = ["--layers", "96", "--modules", "2", "--hidden", "12288", "--rank", "16"]


def test_count_worked_example():
    assert run(["count", "--method", "loraxs", *ROBERTA]) == (0, "12288\n")
    assert run(["count", "--method", "lora", *ROBERTA]) == (0, "1572864\n")


@pytest.mark.parametrize(
    "argv, flag",
    [
        (["count", "--method", "loraxs", "--layers", "24", "--modules", "2", "--hidden", "1024", "--rank", "0"], "--rank"),
        (["count", "--layers", "x", "--modules", "2", "--hidden", "8", "--rank", "1"], "--layers"),
        (["budget", "--params", "-5"], "--params"),
        (["init", "--weights", "w", "--rank", "2", "--out", "o", "--init", "kaiming"], "--init"),
        (["ablate", "--ranks", "4,zero"], "--ranks"),
    ],
)
def test_usage_errors_name_flag(capsys, argv, flag):
    assert main(argv) == 2
    assert flag in capsys.readouterr().err


def test_unknown_flag_rejected_before_work(tmp_path, capsys):
    out = tmp_path / "never.lxsw"
    assert main(["svd", "--weights", "w.txt", "--rank", "2", "--out", str(out), "--turbo"]) == 2
    assert "unrecognized arguments" in capsys.readouterr().err
    assert not out.exists()


def test_rank_larger_than_hidden_is_usage_error(capsys):
    assert main(["count", "--layers", "1", "--modules", "1", "--hidden", "4", "--rank", "8"]) == 2


@pytest.mark.parametrize(
    "argv, golden",
    [
        (["count", "--method", "all", *ROBERTA, "--format", "csv"], "count_all.csv"),
        (["budget", "--method", "lora", *GPT3, "--models", "1000000", "--format", "csv"], "budget_lora.csv"),
    ],
)
def test_csv_golden(argv, golden):
    code, out = run(argv)
    assert code == 0
    assert out == (GOLDEN / golden).read_text()
    assert list(csv.DictReader(io.StringIO(out)))


def test_budget_table_and_json():
    code, out = run(["budget", "--params", "75497472", "--bytes-per-param", "2", "--models", "1000000"])
    assert code == 0 and "144.0 MiB" in out and "144.0 TB" in out and "150994944000000 B" in out
    code, out = run(["budget", "--method", "loraxs", *GPT3, "--models", "1000000", "--format", "json"])
    doc = json.loads(out)
    assert doc["checkpoint"] == "96.0 KiB" and doc["fleet_quoted"] == "96.0 GB"
    assert main(["budget", "--models", "3"]) == 2


def test_svd_on_diagonal_text_file(tmp_path):
    (tmp_path / "d.txt").write_text("3 0 0\n0 2 0\n0 0 1\n")
    code, _ = run(["svd", "--weights", str(tmp_path / "d.txt"), "--rank", "2", "--out", str(tmp_path / "f.lxsw")])
    assert code == 0
    factors = load_weights(tmp_path / "f.lxsw")
    np.testing.assert_allclose(factors["S"], [[3.0, 2.0]], rtol=1e-14)
    assert factors["U"].shape == (3, 2) and factors["V"].shape == (3, 2)


def test_missing_file_exit_1(tmp_path, capsys):
    assert main(["svd", "--weights", str(tmp_path / "nope"), "--rank", "1", "--out", str(tmp_path / "f")]) == 1
    assert "No such file" in capsys.readouterr().err


@pytest.fixture
def task_dir(tmp_path):
    assert run(["task", "--out-dir", str(tmp_path / "t"), "--samples", "300", "--seed", "1"])[0] == 0
    return tmp_path / "t"


def test_zero_sigma_init_then_merge_is_identity(tmp_path, task_dir):
    weights = str(task_dir / "weights.lxsw")
    assert run(["init", "--weights", weights, "--rank", "4", "--sigma", "0", "--init", "svd", "--out", str(tmp_path / "a.lxsc")])[0] == 0
    assert run(["merge", "--weights", weights, "--adapters", str(tmp_path / "a.lxsc"), "--out", str(tmp_path / "m.lxsw")])[0] == 0
    base, merged = load_weights(weights), load_weights(tmp_path / "m.lxsw")
    assert all(base[k].tobytes() == merged[k].tobytes() for k in base)


def eval_mse(weights_path, task_dir):
    w = load_weights(weights_path)["layer0"]
    data = load_weights(task_dir / "eval.lxsw")
    return evaluate(LinearStack([Layer(w)]), Dataset(data["x"], data["y"]))[0]


def test_full_pipeline_reduces_eval_loss(tmp_path, task_dir):
    weights = str(task_dir / "weights.lxsw")
    inputs_before = {p.name: p.read_bytes() for p in task_dir.iterdir()}
    (tmp_path / "train.ini").write_text("[train]\nadapter_lr = 0.05\nepochs = 10\nbatch_size = 32\n[model]\nhead = mse\n")
    a0, a1 = tmp_path / "a0.lxsc", tmp_path / "a1.lxsc"
    assert run(["init", "--weights", weights, "--rank", "4", "--svd-seed", "1", "--out", str(a0)])[0] == 0
    code, out = run(
        [
            "train", "--config", str(tmp_path / "train.ini"), "--weights", weights, "--adapters", str(a0),
            "--data", str(task_dir / "train.lxsw"), "--eval-data", str(task_dir / "eval.lxsw"),
            "--out", str(a1), "--log", str(tmp_path / "log.csv"), "--format", "csv",
        ]
    )
    assert code == 0
    assert list(csv.DictReader(io.StringIO(out)))[-1]["epoch"] == "10"
    assert load_checkpoint(a1).meta["trained"] is True
    for ckpt, name in ((a0, "m0.lxsw"), (a1, "m1.lxsw")):
        assert run(["merge", "--weights", weights, "--adapters", str(ckpt), "--out", str(tmp_path / name)])[0] == 0
    before, after = eval_mse(tmp_path / "m0.lxsw", task_dir), eval_mse(tmp_path / "m1.lxsw", task_dir)
    assert after * 100 <= before
    assert {p.name: p.read_bytes() for p in task_dir.iterdir()} == inputs_before


def test_train_flag_overrides_config(tmp_path, task_dir):
    weights = str(task_dir / "weights.lxsw")
    (tmp_path / "c.ini").write_text("[train]\nepochs = 5\n")
    run(["init", "--weights", weights, "--rank", "2", "--out", str(tmp_path / "a.lxsc")])
    code, out = run(
        ["train", "--config", str(tmp_path / "c.ini"), "--epochs", "2", "--weights", weights,
         "--adapters", str(tmp_path / "a.lxsc"), "--data", str(task_dir / "train.lxsw"), "--out", str(tmp_path / "b.lxsc")]
    )
    assert code == 0 and len(out.strip().splitlines()) == 1 + 2


@pytest.mark.parametrize("body", ["[train]\nepochs = many\n", "[bogus]\nx = 1\n", "[train]\nlearning_rate = 1\n"])
def test_bad_config_is_usage_error(tmp_path, task_dir, body):
    weights = str(task_dir / "weights.lxsw")
    (tmp_path / "c.ini").write_text(body)
    run(["init", "--weights", weights, "--rank", "2", "--out", str(tmp_path / "a.lxsc")])
    argv = ["train", "--config", str(tmp_path / "c.ini"), "--weights", weights, "--adapters", str(tmp_path / "a.lxsc"),
            "--data", str(task_dir / "train.lxsw"), "--out", str(tmp_path / "b.lxsc")]
    assert main(argv) == 2


def test_corrupt_checkpoint_exit_1(tmp_path, task_dir, capsys):
    weights = str(task_dir / "weights.lxsw")
    ckpt = tmp_path / "a.lxsc"
    run(["init", "--weights", weights, "--rank", "2", "--out", str(ckpt)])
    data = bytearray(ckpt.read_bytes())
    data[-33] ^= 0x04
    ckpt.write_bytes(bytes(data))
    assert main(["merge", "--weights", weights, "--adapters", str(ckpt), "--out", str(tmp_path / "m")]) == 1
    assert "byte offset" in capsys.readouterr().err


def test_init_is_seeded(tmp_path, task_dir):
    weights = str(task_dir / "weights.lxsw")
    ids = [run(["init", "--weights", weights, "--rank", "3", "--seed", "7", "--out", str(tmp_path / f"{i}.lxsc"), "--format", "json"])[1] for i in range(2)]
    assert json.loads(ids[0])["checkpoint_id"] == json.loads(ids[1])["checkpoint_id"]


def test_ablate_writes_csvs(tmp_path):
    code, out = run(
        ["ablate", "--n-in", "16", "--n-out", "16", "--samples", "80", "--seeds", "2", "--epochs", "2",
         "--jobs", "2", "--records", str(tmp_path / "r.csv"), "--summary", str(tmp_path / "s.csv"), "--format", "csv"]
    )
    assert code == 0
    assert (tmp_path / "s.csv").read_text() == out
    assert out.splitlines()[0] == "rank,init,median_best,median_ep1,median_ep2"
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 1 + 2 * 2 * 2


def test_registry_commands(tmp_path, task_dir, monkeypatch, capsys):
    monkeypatch.setenv("LORAXS_REGISTRY", str(tmp_path / "reg"))
    ckpt = tmp_path / "a.lxsc"
    run(["init", "--weights", str(task_dir / "weights.lxsw"), "--rank", "2", "--out", str(ckpt)])
    assert main(["registry", "init"]) == 0
    code, out = run(["registry", "add", str(ckpt)])
    ckpt_id = out.strip()
    assert code == 0 and ckpt_id == load_checkpoint(ckpt).checkpoint_id
    code, out = run(["registry", "ls", "--format", "json"])
    assert json.loads(out)["checkpoint_id"] == ckpt_id
    assert main(["registry", "verify"]) == 0
    stray = tmp_path / "reg" / "objects" / "junk"
    stray.write_bytes(b"x")
    code, out = run(["registry", "gc"])
    assert "would remove" in out and stray.exists()
    run(["registry", "gc", "--delete"])
    assert not stray.exists()
    obj = tmp_path / "reg" / "objects" / f"{ckpt_id}.lxsc"
    data = bytearray(obj.read_bytes())
    data[-1] ^= 1
    obj.write_bytes(bytes(data))
    assert main(["registry", "verify"]) == 1
    monkeypatch.delenv("LORAXS_REGISTRY")
    capsys.readouterr()
    assert main(["registry", "ls"]) == 2
    assert "LORAXS_REGISTRY" in capsys.readouterr().err

"""
命令行端到端测试
"""

import csv

import pytest

import damim_cli
from damim_cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, cli_dispatch
from modules.errors import NumericAbort

TINY_FLAGS = ["--image-size", "16", "--depth", "2", "--dim", "16", "--heads", "2"]


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """合成数据 + 一次 2 步预训练，整个模块共享"""
    root = tmp_path_factory.mktemp("cli")
    assert cli_dispatch(["gen-data", "--image-size", "16", "--per-class", "6", "--seed", "3", "--out", str(root / "data")]) == EXIT_OK
    code = cli_dispatch(
        ["pretrain", "--data", str(root / "data" / "A"), "--steps", "2", "--batch-size", "4", "--out", str(root / "run")]
        + TINY_FLAGS
    )
    assert code == EXIT_OK
    return root


def test_gen_data_writes_both_domains(workspace):
    data = workspace / "data"
    assert (data / "A" / "labels.csv").is_file()
    assert (data / "B" / "B_00000_c0.ppm").is_file()
    rows = read_csv(data / "synthetic_summary.csv")
    assert rows[0] == ["domain", "images", "classes", "mean_pixel"]
    assert [row[:3] for row in rows[1:]] == [["A", "30", "5"], ["B", "30", "5"]]


def test_pretrain_outputs(workspace):
    run = workspace / "run"
    assert (run / "checkpoint.damim").read_bytes().startswith(b"DAMIM01")
    rows = read_csv(run / "train_log.csv")
    assert rows[0] == ["step", "regime", "loss", "alpha_1", "alpha_2", "ms"]
    assert [row[0] for row in rows[1:]] == ["1", "2"]
    assert all(row[1] == "damim" and row[-1] == "0.000" for row in rows[1:])


def test_pretrain_rerun_is_byte_identical(workspace, tmp_path):
    code = cli_dispatch(
        ["pretrain", "--data", str(workspace / "data" / "A"), "--steps", "2", "--batch-size", "4", "--out", str(tmp_path)]
        + TINY_FLAGS
    )
    assert code == EXIT_OK
    for name in ("checkpoint.damim", "train_log.csv"):
        assert (tmp_path / name).read_bytes() == (workspace / "run" / name).read_bytes()


def test_cka_of_a_domain_with_itself(workspace, tmp_path):
    data = workspace / "data"
    code = cli_dispatch([
        "analyze", "cka", "--checkpoint", str(workspace / "run" / "checkpoint.damim"),
        "--source", str(data / "A"), "--target", str(data / "A"), "--out", str(tmp_path),
    ])
    assert code == EXIT_OK
    assert read_csv(tmp_path / "cka.csv") == [["layer", "value"], ["2", "1.00000000"]]


def test_disrupt_probe(workspace, tmp_path):
    data = workspace / "data"
    code = cli_dispatch([
        "analyze", "disrupt", "--checkpoint", str(workspace / "run" / "checkpoint.damim"),
        "--source", str(data / "A"), "--target", str(data / "B"), "--n", "10",
        "--layers", "1,2", "--seeds", "0,1", "--out", str(tmp_path),
    ])
    assert code == EXIT_OK
    rows = read_csv(tmp_path / "disrupt.csv")
    assert [row[0] for row in rows] == ["layer", "1", "2"]


def test_eval_fewshot(workspace, tmp_path):
    args = [
        "eval-fewshot", "--checkpoint", str(workspace / "run" / "checkpoint.damim"),
        "--data", str(workspace / "data" / "B"), "--ways", "2", "--shots", "1", "--queries", "1",
        "--episodes", "3", "--workers", "1",
    ]
    assert cli_dispatch(args + ["--out", str(tmp_path / "first")]) == EXIT_OK
    assert cli_dispatch(args + ["--out", str(tmp_path / "second")]) == EXIT_OK
    first = read_csv(tmp_path / "first" / "eval_fewshot.csv")
    assert first[0] == ["k", "n", "q", "episodes", "mode", "distance", "mean_acc", "ci95"]
    assert first[1][:6] == ["2", "1", "1", "3", "proto", "euclidean"]
    assert (tmp_path / "first" / "eval_fewshot.csv").read_bytes() == (tmp_path / "second" / "eval_fewshot.csv").read_bytes()


def test_layer_probe(workspace, tmp_path):
    data = workspace / "data"
    code = cli_dispatch([
        "analyze", "layer-probe", "--source", str(data / "A"), "--target", str(data / "B"),
        "--layers", "1", "--seeds", "1", "--n", "10", "--steps", "1", "--batch-size", "4", "--out", str(tmp_path),
    ] + TINY_FLAGS)
    assert code == EXIT_OK
    assert [row[0] for row in read_csv(tmp_path / "layer-loss.csv")] == ["layer", "1"]
    assert [row[0] for row in read_csv(tmp_path / "layer-cka.csv")] == ["layer", "1"]


def test_gradcheck_command(tmp_path, capsys):
    assert cli_dispatch(["gradcheck", "--seed", "1", "--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv(tmp_path / "gradcheck.csv")
    assert rows[0] == ["op", "points", "max_rel_error", "passed"]
    assert all(row[3] == "1" for row in rows[1:])
    assert "max_rel_error" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["train"],
    ["pretrain"],
    ["analyze"],
    ["gradcheck", "--points", "many"],
])
def test_usage_errors(argv, capsys):
    assert cli_dispatch(argv) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_help_exits_cleanly():
    assert cli_dispatch(["--help"]) == EXIT_OK


def test_missing_data_directory(tmp_path):
    assert cli_dispatch(["pretrain", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == EXIT_DATA


def test_bad_config_key(workspace, tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text("stpes = 2\n")
    code = cli_dispatch(["pretrain", "--data", str(workspace / "data" / "A"), "--config", str(config), "--out", str(tmp_path)])
    assert code == EXIT_DATA


def test_unknown_gradcheck_op(tmp_path):
    assert cli_dispatch(["gradcheck", "--ops", "conv2d", "--out", str(tmp_path)]) == EXIT_DATA


def test_corrupted_checkpoint(workspace, tmp_path):
    broken = tmp_path / "broken.damim"
    payload = bytearray((workspace / "run" / "checkpoint.damim").read_bytes())
    payload[40] ^= 0xFF
    broken.write_bytes(bytes(payload))
    code = cli_dispatch([
        "eval-fewshot", "--checkpoint", str(broken), "--data", str(workspace / "data" / "B"), "--out", str(tmp_path),
    ])
    assert code == EXIT_DATA


def test_numeric_abort_writes_last_good_checkpoint(workspace, tmp_path, monkeypatch):
    class ExplodingTrainer:
        def __init__(self, config, dataset):
            pass

        def train(self):
            raise NumericAbort("loss 出现 NaN", checkpoint=b"last-good", step=2)

    monkeypatch.setattr(damim_cli, "Trainer", ExplodingTrainer)
    code = cli_dispatch(["pretrain", "--data", str(workspace / "data" / "A"), "--out", str(tmp_path)] + TINY_FLAGS)
    assert code == EXIT_NUMERIC
    assert (tmp_path / "last_good.damim").read_bytes() == b"last-good"
    assert not (tmp_path / "checkpoint.damim").exists()


def test_pretrain_takes_data_directory_from_config(workspace, tmp_path):
    config = tmp_path / "pretrain.cfg"
    config.write_text(
        f"data = {workspace / 'data' / 'A'}\n"
        "steps = 2\nbatch_size = 4\nimage_size = 16\ndepth = 2\ndim = 16\nheads = 2\n",
        encoding="utf-8",
    )
    assert cli_dispatch(["pretrain", "--config", str(config), "--out", str(tmp_path / "run")]) == EXIT_OK
    assert (tmp_path / "run" / "checkpoint.damim").read_bytes() == (workspace / "run" / "checkpoint.damim").read_bytes()


def test_pretrain_without_data_is_a_usage_error(tmp_path, capsys):
    assert cli_dispatch(["pretrain", "--out", str(tmp_path)] + TINY_FLAGS) == EXIT_USAGE
    assert "--data" in capsys.readouterr().err
    assert not (tmp_path / "checkpoint.damim").exists()

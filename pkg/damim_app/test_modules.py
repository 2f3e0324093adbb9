"""
模型管理器与结果处理器测试
"""

import numpy as np
import pytest

from modules import ModelManager, ResultProcessor, format_table, get_model_manager
from modules.checkpoint import save_checkpoint
from modules.errors import CheckpointCorruptionError, DataError
from modules.fewshot_eval import EvalReport
from modules.gradcheck import GradcheckResult
from modules.model_manager import encoder_config_from_meta
from modules.rep_analysis import ComparisonRow, ProbeReport
from modules.trainer import PretrainModel, TrainLogRecord


def test_model_manager_info_before_loading():
    manager = ModelManager()
    info = manager.get_model_info()
    assert info["is_loaded"] == "False"
    assert "layers" not in info
    assert manager.encoder is None


def test_save_and_load_encoder(tmp_path, tiny_config):
    model = PretrainModel(tiny_config())
    manager = ModelManager()
    written = manager.save_model(save_checkpoint(model.state_arrays()), tmp_path / "nested" / "model.damim")
    assert written == tmp_path / "nested" / "model.damim"
    encoder = manager.load_checkpoint(written)
    assert manager.encoder is encoder
    assert manager.source == str(written)
    for (name, a), (_, b) in zip(model.encoder.named_parameters(), encoder.named_parameters()):
        assert np.array_equal(a.data, b.data), name
    info = manager.get_model_info()
    assert (info["is_loaded"], info["layers"], info["dim"], info["num_patches"]) == ("True", "2", "16", "16")


def test_load_rejects_checkpoint_without_metadata(tmp_path):
    path = tmp_path / "bare.damim"
    path.write_bytes(save_checkpoint({"encoder.pos_embed": np.zeros((4, 2))}))
    manager = ModelManager()
    with pytest.raises(CheckpointCorruptionError):
        manager.load_checkpoint(path)
    assert manager.encoder is None


def test_load_missing_file_is_reported(tmp_path):
    with pytest.raises(DataError):
        ModelManager().load_checkpoint(tmp_path / "missing.damim")


def test_meta_must_have_seven_entries():
    with pytest.raises(CheckpointCorruptionError):
        encoder_config_from_meta(np.zeros(3))


def test_singleton():
    assert get_model_manager() is get_model_manager()


def test_result_processor_writes_csvs(tmp_path):
    processor = ResultProcessor(tmp_path / "out")
    records = [
        TrainLogRecord(step=1, regime="damim", loss=0.5, alpha=np.array([0.25, 0.75])),
        TrainLogRecord(step=2, regime="pixel", loss=0.25),
    ]
    path = processor.write_train_log(records, num_layers=2)
    assert path.read_text().splitlines() == [
        "step,regime,loss,alpha_1,alpha_2,ms",
        "1,damim,0.50000000,0.25000000,0.75000000,0.000",
        "2,pixel,0.25000000,,,0.000",
    ]

    report = EvalReport(mean_accuracy=20.0, ci95=1.5, episodes=3, accuracies=np.zeros(3))
    assert processor.write_eval_report(report).read_text().splitlines()[1] == "5,5,15,3,proto,euclidean,20.0000,1.5000"

    probe = processor.write_probe_report(ProbeReport("layer-cka", [1, 2], [0.5, 0.25]))
    assert probe.name == "layer-cka.csv"
    assert probe.read_text().splitlines() == ["layer,value", "1,0.50000000", "2,0.25000000"]

    rows = [ComparisonRow("BL", [0.1], [40.0])]
    comparison = processor.write_comparison(rows, "ablation.csv")
    assert comparison.read_text().splitlines()[0] == "variant,seeds,cka_mean,acc_mean,cka_per_seed,acc_per_seed"

    checks = processor.write_gradcheck([GradcheckResult("add", 3, 1.5e-10), GradcheckResult("exp", 3, 1e-3)])
    assert checks.read_text().splitlines()[1:] == ["add,3,1.500e-10,1", "exp,3,1.000e-03,0"]


def test_format_table_aligns_columns():
    table = format_table(("op", "passed"), [("matmul", 1), ("a", 0)])
    lines = table.splitlines()
    assert lines[0] == "op      passed"
    assert lines[1] == "------  ------"
    assert lines[2].startswith("matmul  1")

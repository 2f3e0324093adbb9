"""
结果处理模块
把训练日志、评估报告、探针报告与对比实验结果写成 CSV，并格式化终端表格
"""

import csv
import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

from .fewshot_eval import EvalReport
from .gradcheck import GradcheckResult
from .rep_analysis import ComparisonRow, ProbeReport
from .trainer import TrainLogRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class ResultProcessor:
    """CSV 结果写出器，所有文件写在同一输出目录下"""

    def __init__(self, out_dir: PathLike):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"结果处理器初始化完成: 输出目录 {self.out_dir}")

    def write_csv(self, filename: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        path = self.out_dir / filename
        rows = list(rows)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        logger.info(f"✅ 已写出 {path} ({len(rows)} 行)")
        return path

    def write_train_log(self, records: Sequence[TrainLogRecord], num_layers: int, filename: str = "train_log.csv") -> Path:
        """表头 step,regime,loss,alpha_1..alpha_L,ms；非 damim 的 α 列留空"""
        header = ["step", "regime", "loss"] + [f"alpha_{l}" for l in range(1, num_layers + 1)] + ["ms"]
        return self.write_csv(filename, header, (train_log_row(r, num_layers) for r in records))

    def write_eval_report(self, report: EvalReport, filename: str = "eval_fewshot.csv") -> Path:
        return self.write_csv(filename, EvalReport.CSV_HEADER, [report.to_row()])

    def write_probe_report(self, report: ProbeReport, filename: str = "") -> Path:
        return self.write_csv(filename or f"{report.kind}.csv", ProbeReport.CSV_HEADER, report.to_rows())

    def write_comparison(self, rows: Sequence[ComparisonRow], filename: str) -> Path:
        return self.write_csv(filename, ComparisonRow.CSV_HEADER, [row.to_row() for row in rows])

    def write_gradcheck(self, results: Sequence[GradcheckResult], filename: str = "gradcheck.csv") -> Path:
        return self.write_csv(filename, GRADCHECK_HEADER, gradcheck_rows(results))


GRADCHECK_HEADER = ("op", "points", "max_rel_error", "passed")


def train_log_row(record: TrainLogRecord, num_layers: int) -> List[str]:
    alpha = [""] * num_layers if record.alpha is None else [f"{a:.8f}" for a in record.alpha]
    return [str(record.step), record.regime, f"{record.loss:.8f}"] + alpha + [f"{record.ms:.3f}"]


def gradcheck_rows(results: Sequence[GradcheckResult]) -> List[Tuple]:
    return [(r.op, r.points, f"{r.max_relative_error:.3e}", int(r.passed)) for r in results]


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """等宽终端表格"""
    cells = [[str(h) for h in header]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(width) for cell, width in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines)

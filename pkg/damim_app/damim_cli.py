#!/usr/bin/env python3
"""
DAMIM 命令行入口
合成数据生成、预训练、小样本评估、表示分析与梯度检查，结果统一写成 CSV
"""

import argparse
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Type

from pydantic import BaseModel

# 添加应用目录到Python路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from modules import (
    AUX_MODES,
    ComparisonRow,
    ConfigError,
    ContractError,
    DataError,
    EvalConfig,
    EvalReport,
    NumericAbort,
    NumericError,
    ProbeReport,
    ResultProcessor,
    ShapeError,
    SyntheticSpec,
    TrainConfig,
    Trainer,
    ablation_study,
    aux_encoder_study,
    disruption_sweep,
    domain_similarity,
    evaluate_with_config,
    format_table,
    generate_synthetic,
    get_model_manager,
    layer_target_probe,
    load_config,
    load_images,
    run_gradcheck_suite,
    save_dataset,
)
from modules.result_processor import GRADCHECK_HEADER, gradcheck_rows

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
DEFAULT_OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'outputs')
CHECKPOINT_NAME = "checkpoint.damim"
ABORT_CHECKPOINT_NAME = "last_good.damim"
MAX_CKA_SAMPLES = 100
# 对比实验用 --source / --target，不需要 data 字段
PROBE_SKIP = ("seed", "data")


class UsageError(Exception):
    """命令行用法错误，消息中包含 usage 文本"""


class CliParser(argparse.ArgumentParser):
    """用法错误时抛出 UsageError 而不是直接退出进程"""

    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def setup_logging(level: str = "INFO") -> None:
    """日志同时写入 logs/ 下按日期命名的文件和终端"""
    log_dir = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'logs')
    os.makedirs(log_dir, exist_ok=True)
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(os.path.join(log_dir, f'damim_{datetime.now().strftime("%Y%m%d")}.log'), encoding="utf-8"),
            logging.StreamHandler()
        ]
    )
    logging.getLogger().setLevel(level)


def parse_int_list(text: Optional[str], what: str) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{what} 必须是逗号分隔的整数: {text!r}")
    if not values:
        raise ConfigError(f"{what} 不能为空")
    return values


def base_seed(args) -> int:
    return 1 if args.seed is None else args.seed


def seed_list(args, count: int) -> List[int]:
    """--seeds 优先；否则从 --seed 起连续 count 个种子"""
    return parse_int_list(args.seeds, "--seeds") or [base_seed(args) + i for i in range(count)]


def add_model_flags(parser: argparse.ArgumentParser, model_cls: Type[BaseModel], skip: Sequence[str] = ("seed",)) -> None:
    """为配置模型的每个字段生成 --field-name 覆盖项，取值交给 pydantic 转换"""
    group = parser.add_argument_group(f"{model_cls.__name__} 覆盖项")
    for name, info in model_cls.model_fields.items():
        if name in skip:
            continue
        group.add_argument("--" + name.replace("_", "-"), dest=name, default=None, metavar="VALUE", help=info.description)


def model_overrides(args, model_cls: Type[BaseModel]) -> Dict[str, Any]:
    values = {name: getattr(args, name, None) for name in model_cls.model_fields}
    if "seed" in model_cls.model_fields:
        values["seed"] = args.seed
    return values


def sample_count(args, *datasets) -> int:
    return args.n if args.n is not None else min([MAX_CKA_SAMPLES] + [len(d) for d in datasets])


def print_table(header: Sequence[str], rows: Sequence[Sequence]) -> None:
    print(format_table(header, rows))


def cmd_gen_data(args) -> int:
    spec = load_config(SyntheticSpec, args.config, model_overrides(args, SyntheticSpec))
    domains = generate_synthetic(spec, base_seed(args))
    out = Path(args.out)
    rows = []
    for dataset in (domains.domain_a, domains.domain_b):
        save_dataset(dataset, out / dataset.domain, prefix=dataset.domain)
        rows.append((dataset.domain, len(dataset), len(dataset.classes), f"{float(dataset.images.mean()):.6f}"))
    header = ("domain", "images", "classes", "mean_pixel")
    ResultProcessor(out).write_csv("synthetic_summary.csv", header, rows)
    print_table(header, rows)
    logger.info(f"域 B 相对域 A 的平均亮度差(裁剪前): {domains.unclamped_mean_gap:.4f}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = load_config(TrainConfig, args.config, model_overrides(args, TrainConfig))
    if config.data is None:
        args.parser.error("需要源域数据目录: --data DIR 或配置文件中的 data = DIR")
    dataset = load_images(config.data)
    processor = ResultProcessor(args.out)
    manager = get_model_manager()
    try:
        result = Trainer(config, dataset).train()
    except NumericAbort as e:
        if e.checkpoint is not None:
            path = manager.save_model(e.checkpoint, processor.out_dir / ABORT_CHECKPOINT_NAME)
            logger.error(f"❌ 第 {e.step} 步中止，最后一次正常状态已写入 {path}")
        raise
    manager.save_model(result.checkpoint, processor.out_dir / CHECKPOINT_NAME)
    processor.write_train_log(result.log, config.depth)
    if result.log:
        print_table(("regime", "steps", "first_window", "final_window"), [(
            config.regime, config.steps,
            f"{result.window_loss('first'):.6f}", f"{result.window_loss('final'):.6f}",
        )])
    return EXIT_OK


def cmd_eval_fewshot(args) -> int:
    config = load_config(EvalConfig, args.config, model_overrides(args, EvalConfig))
    encoder = get_model_manager().load_checkpoint(args.checkpoint)
    dataset = load_images(args.data)
    report = evaluate_with_config(encoder, dataset, config)
    ResultProcessor(args.out).write_eval_report(report)
    print_table(EvalReport.CSV_HEADER, [report.to_row()])
    return EXIT_OK


def cmd_analyze_cka(args) -> int:
    encoder = get_model_manager().load_checkpoint(args.checkpoint)
    source, target = load_images(args.source), load_images(args.target)
    seed = base_seed(args)
    value = domain_similarity(encoder, source.images, target.images, n=sample_count(args, source, target), seed=seed)
    report = ProbeReport(kind="cka", layers=[encoder.num_layers], values=[value], seeds=[seed])
    ResultProcessor(args.out).write_probe_report(report)
    print_table(ProbeReport.CSV_HEADER, report.to_rows())
    return EXIT_OK


def cmd_analyze_disrupt(args) -> int:
    encoder = get_model_manager().load_checkpoint(args.checkpoint)
    source, target = load_images(args.source), load_images(args.target)
    report = disruption_sweep(
        encoder, source.images, target.images,
        fraction=args.fraction,
        seeds=seed_list(args, 5),
        n=sample_count(args, source, target),
        layers=parse_int_list(args.layers, "--layers"),
    )
    ResultProcessor(args.out).write_probe_report(report)
    print_table(ProbeReport.CSV_HEADER, report.to_rows())
    return EXIT_OK


def cmd_analyze_layer_probe(args) -> int:
    template = load_config(TrainConfig, args.config, model_overrides(args, TrainConfig))
    source, target = load_images(args.source), load_images(args.target)
    layers = parse_int_list(args.layers, "--layers") or list(range(1, template.depth + 1))
    loss_report, cka_report = layer_target_probe(
        template, source, target, layers,
        steps=template.steps,
        seeds=seed_list(args, 3),
        n=sample_count(args, source, target),
        workers=args.workers,
    )
    processor = ResultProcessor(args.out)
    processor.write_probe_report(loss_report)
    processor.write_probe_report(cka_report)
    rows = [(layer, f"{loss:.6f}", f"{sim:.6f}") for layer, loss, sim in zip(layers, loss_report.values, cka_report.values)]
    print_table(("layer", "final_loss", "cka"), rows)
    return EXIT_OK


def _comparison(args, study, filename: str, **extra) -> int:
    template = load_config(TrainConfig, args.config, model_overrides(args, TrainConfig))
    source, target = load_images(args.source), load_images(args.target)
    rows = study(
        template, source, target,
        seeds=seed_list(args, 5),
        n=sample_count(args, source, target),
        episodes=args.episodes,
        ways=args.ways,
        shots=args.shots,
        queries=args.queries,
        **extra,
    )
    ResultProcessor(args.out).write_comparison(rows, filename)
    print_table(ComparisonRow.CSV_HEADER[:4], [row.to_row()[:4] for row in rows])
    return EXIT_OK


def cmd_analyze_ablation(args) -> int:
    return _comparison(args, ablation_study, "ablation.csv")


def cmd_analyze_aux_encoder(args) -> int:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()] if args.modes else list(AUX_MODES)
    return _comparison(args, aux_encoder_study, "aux_encoder.csv", modes=modes)


def cmd_gradcheck(args) -> int:
    ops = [op.strip() for op in args.ops.split(",") if op.strip()] if args.ops else ()
    results = run_gradcheck_suite(seed=base_seed(args), points=args.points, ops=ops)
    ResultProcessor(args.out).write_gradcheck(results)
    print_table(GRADCHECK_HEADER, gradcheck_rows(results))
    failed = [r.op for r in results if not r.passed]
    if failed:
        logger.error(f"❌ 梯度检查未通过: {failed}")
        return EXIT_NUMERIC
    logger.info(f"✅ 全部 {len(results)} 个算子通过梯度检查")
    return EXIT_OK


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", default=None, metavar="PATH", help="扁平 key = value 配置文件")
    common.add_argument("--seed", type=int, default=None, metavar="N", help="随机种子")
    common.add_argument("--out", default=DEFAULT_OUT, metavar="PATH", help="输出目录")
    common.add_argument("--log-level", default="INFO", choices=LOG_LEVELS, help="日志级别")

    parser = CliParser(prog="damim", description="DAMIM 桌面级实验命令行")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    gen = commands.add_parser("gen-data", parents=[common], help="生成合成双域数据集 (PPM + labels.csv)")
    add_model_flags(gen, SyntheticSpec)
    gen.set_defaults(handler=cmd_gen_data)

    pretrain = commands.add_parser("pretrain", parents=[common], help="在源域上预训练编码器")
    add_model_flags(pretrain, TrainConfig)
    pretrain.set_defaults(handler=cmd_pretrain, parser=pretrain)

    fewshot = commands.add_parser("eval-fewshot", parents=[common], help="k-way n-shot 小样本评估")
    fewshot.add_argument("--checkpoint", required=True, metavar="PATH", help="预训练检查点")
    fewshot.add_argument("--data", required=True, metavar="DIR", help="目标域图像目录 (含 labels.csv)")
    add_model_flags(fewshot, EvalConfig)
    fewshot.set_defaults(handler=cmd_eval_fewshot)

    analyze = commands.add_parser("analyze", help="表示分析与对比实验")
    probes = analyze.add_subparsers(dest="probe", metavar="PROBE", required=True)

    def probe_parser(name: str, help_text: str, needs_checkpoint: bool) -> CliParser:
        sub = probes.add_parser(name, parents=[common], help=help_text)
        if needs_checkpoint:
            sub.add_argument("--checkpoint", required=True, metavar="PATH", help="预训练检查点")
        sub.add_argument("--source", required=True, metavar="DIR", help="源域图像目录")
        sub.add_argument("--target", required=True, metavar="DIR", help="目标域图像目录")
        sub.add_argument("--n", type=int, default=None, help=f"每个域的 CKA 样本数，默认 min({MAX_CKA_SAMPLES}, 数据集大小)")
        return sub

    cka_cmd = probe_parser("cka", "源域与目标域最终特征的 CKA", needs_checkpoint=True)
    cka_cmd.set_defaults(handler=cmd_analyze_cka)

    disrupt = probe_parser("disrupt", "逐层 token 扰动后的跨域 CKA", needs_checkpoint=True)
    disrupt.add_argument("--fraction", type=float, default=0.5, help="置零 token 比例")
    disrupt.add_argument("--layers", default=None, help="逗号分隔的层号，默认全部")
    disrupt.add_argument("--seeds", default=None, help="逗号分隔的种子，默认从 --seed 起 5 个")
    disrupt.set_defaults(handler=cmd_analyze_disrupt)

    layer_probe = probe_parser("layer-probe", "逐层特征作为重建目标的损失与跨域 CKA", needs_checkpoint=False)
    layer_probe.add_argument("--layers", default=None, help="逗号分隔的层号，默认全部")
    layer_probe.add_argument("--seeds", default=None, help="逗号分隔的种子，默认从 --seed 起 3 个")
    layer_probe.add_argument("--workers", type=int, default=1, help="并行训练线程数")
    add_model_flags(layer_probe, TrainConfig, skip=PROBE_SKIP)
    layer_probe.set_defaults(handler=cmd_analyze_layer_probe)

    for name, handler, help_text in (
        ("ablation", cmd_analyze_ablation, "组件消融: BL / +AFR / +LD / +AFR+LD"),
        ("aux-encoder", cmd_analyze_aux_encoder, "辅助编码器模式对比"),
    ):
        study = probe_parser(name, help_text, needs_checkpoint=False)
        study.add_argument("--seeds", default=None, help="逗号分隔的配对种子，默认从 --seed 起 5 个")
        study.add_argument("--episodes", type=int, default=100, help="每个模型的评估任务数")
        study.add_argument("--ways", type=int, default=5)
        study.add_argument("--shots", type=int, default=5)
        study.add_argument("--queries", type=int, default=15)
        if name == "aux-encoder":
            study.add_argument("--modes", default=None, help=f"逗号分隔的模式，默认 {','.join(AUX_MODES)}")
        add_model_flags(study, TrainConfig, skip=PROBE_SKIP)
        study.set_defaults(handler=handler)

    check = commands.add_parser("gradcheck", parents=[common], help="64 位有限差分梯度检查")
    check.add_argument("--points", type=int, default=3, help="每个算子的随机点数")
    check.add_argument("--ops", default=None, help="逗号分隔的算子名，默认全部")
    check.set_defaults(handler=cmd_gradcheck)
    return parser


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    解析参数并执行命令

    Returns:
        退出码: 0 成功, 1 用法错误, 2 数据/配置错误, 3 数值异常
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return EXIT_OK if e.code in (None, 0) else EXIT_USAGE

    setup_logging(args.log_level)
    command = args.command if args.command != "analyze" else f"analyze {args.probe}"
    logger.info("=" * 60)
    logger.info(f"DAMIM 命令: {command}")
    logger.info("=" * 60)
    try:
        return args.handler(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        logger.error(f"❌ 数值异常: {e}", exc_info=True)
        return EXIT_NUMERIC
    except (DataError, ConfigError, ShapeError, ContractError) as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_DATA


def main():
    """主函数"""
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()

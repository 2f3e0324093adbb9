"""
预设模块
优化器与解码器的命名预设，未知名称回落到默认预设
"""

import logging
from typing import Dict, List

from easydict import EasyDict as adict

from .light_decoder import build_decoder_config

logger = logging.getLogger(__name__)


# 优化器预设：每个参数组的学习率
OPTIMIZER_PRESETS: Dict[str, Dict] = {
    # 从零训练：编码器 / 解码器 / 头 AdamW lr 1e-3；AFR 投影与 α 头 1e-4 且不做权重衰减
    "desk": {
        "kind": "adamw",
        "lr": {"encoder": 1e-3, "decoder": 1e-3, "head": 1e-3, "afr": 1e-4, "classifier": 1e-3},
        "weight_decay": 0.05,
    },
    # 预训练初始化后的微调学习率（从零训练时几乎不更新）
    "paper-finetune": {
        "kind": "adamw",
        "lr": {"encoder": 1e-7, "decoder": 1e-6, "head": 1e-6, "afr": 1e-6, "classifier": 1e-3},
        "weight_decay": 0.05,
    },
}

DECODER_PRESETS: Dict[str, Dict] = {
    "ld": {"correlation": "cosine", "use_mlp": False, "temperature": 1.0, "depth": 1},
    "mae": {"correlation": "qk_attention", "use_mlp": True, "temperature": 1.0, "depth": 2},
}

PRESET_DESCRIPTIONS: Dict[str, str] = {
    "desk": "桌面规模从零训练：AdamW lr=1e-3，AFR lr=1e-4，微调分类器与主干 1e-3",
    "paper-finetune": "微调学习率：分类器 1e-3，主干 1e-7，解码器与 AFR 1e-6",
    "ld": "轻量解码器：单块单头，余弦相关性，无 MLP",
    "mae": "MAE 风格基线解码器：qk 注意力 + MLP，2 块",
}

DEFAULT_OPTIMIZER_PRESET = "desk"
DEFAULT_DECODER_PRESET = "ld"


def get_optimizer_preset(name: str) -> adict:
    """
    按名称取优化器预设

    Examples:
        >>> get_optimizer_preset("paper-finetune").lr.encoder
        1e-07
    """
    if name not in OPTIMIZER_PRESETS:
        logger.warning(f"未知优化器预设 {name}，使用默认预设 {DEFAULT_OPTIMIZER_PRESET}")
        name = DEFAULT_OPTIMIZER_PRESET
    return adict(OPTIMIZER_PRESETS[name])


def build_decoder_preset(name: str, hidden_size: int, **overrides) -> adict:
    """
    按名称构建解码器配置，overrides 覆盖预设字段
    """
    if name not in DECODER_PRESETS:
        logger.warning(f"未知解码器预设 {name}，使用默认预设 {DEFAULT_DECODER_PRESET}")
        name = DEFAULT_DECODER_PRESET
    fields = dict(DECODER_PRESETS[name], hidden_size=hidden_size)
    fields.update({k: v for k, v in overrides.items() if v is not None})
    logger.info(f"使用解码器预设: {name}（{get_preset_description(name)}）")
    return build_decoder_config(**fields)


def get_preset_description(name: str) -> str:
    return PRESET_DESCRIPTIONS.get(name, "未知预设")


def get_all_presets() -> List[str]:
    return list(OPTIMIZER_PRESETS) + list(DECODER_PRESETS)

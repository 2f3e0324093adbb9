"""
模型管理模块
负责编码器的构建、检查点保存与载入
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from . import tensor_core as tc
from .checkpoint import read_checkpoint
from .errors import CheckpointCorruptionError
from .vit_encoder import VitEncoder, build_encoder_config

logger = logging.getLogger(__name__)

ENCODER_PREFIX = "encoder."
META_ENCODER = "meta.encoder"


def encoder_config_from_meta(meta: np.ndarray):
    """由检查点里的 meta.encoder 数组还原编码器配置"""
    values = np.asarray(meta, dtype=np.float64)
    if values.shape != (7,):
        raise CheckpointCorruptionError(f"{META_ENCODER} 形状应为 (7,)，实际 {values.shape}")
    layers, dim, heads, patch, image, channels, mlp_ratio = values
    return build_encoder_config(
        num_layers=int(layers),
        hidden_size=int(dim),
        num_attention_heads=int(heads),
        patch_size=int(patch),
        image_size=int(image),
        num_channels=int(channels),
        mlp_ratio=float(mlp_ratio),
    )


class ModelManager:
    """编码器管理器"""

    def __init__(self):
        self.encoder: Optional[VitEncoder] = None
        self.source: Optional[str] = None
        logger.info("模型管理器初始化完成")
        logger.info(f"数据类型: {np.dtype(tc.default_dtype()).name}")

    def load_checkpoint(self, path: Union[str, Path]) -> VitEncoder:
        """
        从检查点文件载入编码器

        Raises:
            DataError: 文件损坏或版本未知
            ContractError: 缺少编码器参数
        """
        path = Path(path)
        try:
            logger.info(f"开始载入检查点: {path}")
            arrays = read_checkpoint(path)
            if META_ENCODER not in arrays:
                raise CheckpointCorruptionError(f"检查点缺少 {META_ENCODER}")
            encoder = VitEncoder(encoder_config_from_meta(arrays[META_ENCODER]))
            encoder.load_state_dict({k: v for k, v in arrays.items() if k.startswith(ENCODER_PREFIX)}, prefix=ENCODER_PREFIX)
        except Exception as e:
            logger.error(f"❌ 检查点载入失败: {e}")
            raise
        self._attach(encoder, str(path))
        return encoder

    def _attach(self, encoder: VitEncoder, source: str) -> None:
        self.encoder = encoder
        self.source = source
        logger.info(f"✅ 编码器已就绪: {source}")
        logger.info(f"编码器信息: {self.get_model_info()}")

    def save_model(self, payload: bytes, path: Union[str, Path]) -> Path:
        """把已序列化的检查点写入文件，父目录不存在时创建"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
        logger.info(f"检查点已写入 {path} ({len(payload)} 字节)")
        return path

    def get_model_info(self) -> Dict[str, str]:
        info = {
            "source": str(self.source),
            "is_loaded": str(self.encoder is not None),
            "dtype": np.dtype(tc.default_dtype()).name,
            "numpy_version": np.__version__,
        }
        if self.encoder is not None:
            cfg = self.encoder.cfg
            info.update({
                "layers": str(cfg.num_layers),
                "dim": str(cfg.hidden_size),
                "heads": str(cfg.num_attention_heads),
                "num_patches": str(cfg.num_patches),
                "num_parameters": str(self.encoder.num_parameters()),
            })
        return info


# 全局模型管理器实例（单例模式）
_global_model_manager: Optional[ModelManager] = None


def get_model_manager() -> ModelManager:
    global _global_model_manager
    if _global_model_manager is None:
        _global_model_manager = ModelManager()
    return _global_model_manager

"""
预训练模块
三种重建目标的 MIM 预训练：像素 (pixel)、固定层特征 (layer_l)、聚合特征 (damim)
"""

import logging
import re
import time
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from easydict import EasyDict as adict
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from . import tensor_core as tc
from .afr_target import AFRTarget
from .checkpoint import save_checkpoint
from .dataset import LabeledDataset
from .errors import ContractError, DataError, NumericAbort, NumericError, ShapeError
from .layers import Linear, Module
from .light_decoder import CORRELATIONS, LightDecoder
from .optim import Optimizer, build_optimizer
from .patch_mask import MaskVector, patchify, sample_batch_masks, split_by_mask
from .presets import build_decoder_preset, get_optimizer_preset, get_preset_description
from .tensor_core import DiffTensor
from .vit_encoder import AUX_MODES, AuxiliaryEncoder, VitEncoder, build_encoder_config

logger = logging.getLogger(__name__)

LAYER_REGIME = re.compile(r"^layer_(\d+)$")
REGIME_CODES = {"pixel": 0, "layer": 1, "damim": 2}
NORMALIZE_EPS = 1e-6


class TrainConfig(BaseModel):
    """预训练配置"""
    model_config = ConfigDict(extra="forbid")

    data: Optional[str] = Field(default=None, description="源域图像目录（含 labels.csv），仅 pretrain 使用")
    regime: str = Field(default="damim", pattern=r"^(pixel|damim|layer_\d+)$", description="重建目标: pixel / layer_<l> / damim")
    steps: int = Field(default=500, ge=0, description="训练步数")
    batch_size: int = Field(default=8, ge=1, description="批大小")
    mask_ratio: float = Field(default=0.75, gt=0.0, lt=1.0, description="掩码率 r")
    seed: int = Field(default=1, description="随机种子")
    loss_scope: Literal["all_tokens", "masked_only"] = Field(default="all_tokens", description="特征重建损失的 token 范围")
    normalize_pixels: bool = Field(default=False, description="像素目标按 patch 归一化")

    optimizer_preset: str = Field(default="desk", description="优化器预设: desk / paper-finetune")
    lr: Optional[float] = Field(default=None, gt=0.0, description="覆盖全部参数组学习率")
    weight_decay: Optional[float] = Field(default=None, ge=0.0, description="覆盖权重衰减")

    decoder_preset: Optional[str] = Field(default=None, description="解码器预设: ld / mae（默认 damim 用 ld，其余用 mae）")
    correlation: Optional[str] = Field(default=None, description="覆盖解码器相关性类型")
    use_mlp: Optional[bool] = Field(default=None, description="覆盖解码器是否带 MLP")
    temperature: Optional[float] = Field(default=None, gt=0.0, description="覆盖温度 τ")
    decoder_depth: Optional[int] = Field(default=None, ge=1, description="覆盖解码器块数")

    aux_mode: str = Field(default="shared_with_grad_detached", description="辅助编码器模式")
    ema_decay: float = Field(default=0.99, ge=0.0, le=1.0, description="IE 模式的 EMA 衰减")
    alpha_loss_ema: float = Field(default=0.0, ge=0.0, lt=1.0, description="α 头输入的损失滑动平均，0 关闭")

    depth: int = Field(default=6, ge=1, description="编码器层数 L")
    dim: int = Field(default=32, ge=1, description="嵌入维度 d")
    heads: int = Field(default=4, ge=1, description="注意力头数")
    patch_size: int = Field(default=4, ge=1, description="patch 边长 P")
    image_size: int = Field(default=32, ge=1, description="图像边长")
    channels: int = Field(default=3, ge=1, description="通道数")
    mlp_ratio: float = Field(default=4.0, gt=0.0, description="MLP 隐层倍数")

    record_timing: bool = Field(default=False, description="日志中记录每步耗时（关闭时为 0，保证输出可复现）")
    log_every: int = Field(default=50, ge=1, description="日志打印间隔")

    @model_validator(mode="after")
    def _check_consistency(self) -> "TrainConfig":
        build_encoder_config(**self.encoder_fields())
        layer = self.layer_index
        if layer is not None and not 1 <= layer <= self.depth:
            raise ValueError(f"regime={self.regime} 要求 1 ≤ l ≤ L={self.depth}")
        if self.aux_mode.lower() not in {m.lower() for m in AUX_MODES}:
            raise ValueError(f"未知辅助编码器模式 {self.aux_mode}")
        if self.correlation is not None and self.correlation not in CORRELATIONS:
            raise ValueError(f"未知相关性类型 {self.correlation}")
        return self

    @property
    def regime_kind(self) -> str:
        return "layer" if self.layer_index is not None else self.regime

    @property
    def layer_index(self) -> Optional[int]:
        match = LAYER_REGIME.match(self.regime)
        return int(match.group(1)) if match else None

    def encoder_fields(self) -> Dict:
        return dict(
            num_layers=self.depth,
            hidden_size=self.dim,
            num_attention_heads=self.heads,
            patch_size=self.patch_size,
            image_size=self.image_size,
            num_channels=self.channels,
            mlp_ratio=self.mlp_ratio,
        )

    def encoder_config(self) -> adict:
        return build_encoder_config(**self.encoder_fields())

    def decoder_config(self) -> adict:
        preset = self.decoder_preset or ("ld" if self.regime == "damim" else "mae")
        return build_decoder_preset(
            preset,
            self.dim,
            correlation=self.correlation,
            use_mlp=self.use_mlp,
            temperature=self.temperature,
            depth=self.decoder_depth,
        )


@dataclass
class TrainLogRecord:
    step: int
    regime: str
    loss: float
    alpha: Optional[np.ndarray] = None
    ms: float = 0.0


@dataclass
class TrainResult:
    model: "PretrainModel"
    log: List[TrainLogRecord] = field(default_factory=list)
    checkpoint: bytes = b""

    def window_loss(self, which: str = "final", fraction: float = 0.1) -> float:
        """前 / 后 10% 步的平均损失"""
        if not self.log:
            return float("nan")
        width = max(1, int(len(self.log) * fraction))
        window = self.log[-width:] if which == "final" else self.log[:width]
        return float(np.mean([record.loss for record in window]))


def _mask_array(mask: Union[np.ndarray, Sequence[MaskVector]]) -> np.ndarray:
    if isinstance(mask, np.ndarray):
        return mask
    return np.stack([m.m for m in mask])


def weighted_token_mse(prediction: DiffTensor, target: Union[DiffTensor, np.ndarray], weights: np.ndarray) -> DiffTensor:
    """Σ_{b,i} w_bi · mean_d (pred − target)²"""
    target_shape = target.shape if isinstance(target, DiffTensor) else np.shape(target)
    if prediction.shape != tuple(target_shape):
        raise ShapeError(f"重建与目标形状不一致: {prediction.shape} vs {target_shape}")
    diff = prediction - target
    per_token = (diff * diff).mean(axis=-1)
    return (per_token * weights.astype(prediction.dtype)).sum()


def normalize_patches(patches: np.ndarray) -> np.ndarray:
    mean = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mean) / np.sqrt(var + NORMALIZE_EPS)


def pixel_loss(
    reconstruction: DiffTensor,
    target: np.ndarray,
    mask: Union[np.ndarray, Sequence[MaskVector]],
    normalize: bool = False,
) -> DiffTensor:
    """
    只在被遮挡 patch 上计算的像素 MSE，除以被遮挡数 N·r，再对批取平均

    Args:
        reconstruction: B×N×(P·P·C) 像素头输出
        target: B×N×(P·P·C) 原始 patch
        mask: B×N（1 可见，0 遮挡）或 MaskVector 列表
        normalize: 是否按 patch 均值 / 标准差归一化目标

    Raises:
        ContractError: 某个样本没有被遮挡的 patch
    """
    mask = _mask_array(mask)
    target = np.asarray(target)
    if mask.shape != target.shape[:2]:
        raise ShapeError(f"掩码形状 {mask.shape} 与目标 {target.shape[:2]} 不符")
    masked = (mask == 0)
    counts = masked.sum(axis=1)
    if (counts == 0).any():
        raise ContractError("像素损失要求每个样本至少有一个被遮挡 patch")
    if normalize:
        target = normalize_patches(target)
    weights = masked / counts[:, None] / mask.shape[0]
    return weighted_token_mse(reconstruction, target, weights)


def damim_loss(
    reconstruction: DiffTensor,
    target: DiffTensor,
    mask: Optional[Union[np.ndarray, Sequence[MaskVector]]] = None,
    scope: str = "all_tokens",
) -> DiffTensor:
    """
    特征重建损失：默认对全部 N 个 token 取平均，masked_only 时只计被遮挡 token

    Raises:
        ShapeError: 形状不一致
        ContractError: masked_only 但没有掩码或无被遮挡 token
    """
    target_shape = target.shape if isinstance(target, DiffTensor) else np.shape(target)
    if reconstruction.shape != tuple(target_shape) or reconstruction.ndim != 3:
        raise ShapeError(f"重建 {reconstruction.shape} 与目标 {target_shape} 形状不一致")
    batch_size, num_tokens, _ = reconstruction.shape
    if scope == "all_tokens":
        weights = np.full((batch_size, num_tokens), 1.0 / (num_tokens * batch_size))
    elif scope == "masked_only":
        if mask is None:
            raise ContractError("masked_only 范围需要提供掩码")
        masked = _mask_array(mask) == 0
        counts = masked.sum(axis=1)
        if (counts == 0).any():
            raise ContractError("masked_only 范围要求每个样本至少有一个被遮挡 token")
        weights = masked / counts[:, None] / batch_size
    else:
        raise ContractError(f"未知损失范围: {scope}")
    return weighted_token_mse(reconstruction, target, weights)


class PretrainModel(Module):
    """
    编码器 + 解码器 + 目标相关模块

    只创建当前 regime 需要的参数：pixel 有像素头，damim 有 AFR，layer_l 两者都没有。
    """

    def __init__(self, config: TrainConfig):
        self.config = config
        self.encoder_cfg = config.encoder_config()
        self.decoder_cfg = config.decoder_config()
        self.encoder = VitEncoder(self.encoder_cfg, seed=config.seed)
        self.decoder = LightDecoder(self.decoder_cfg, seed=config.seed + 1)
        self.pixel_head = None
        self.afr = None
        self.aux = None
        if config.regime_kind == "pixel":
            self.pixel_head = Linear(config.dim, self.encoder_cfg.patch_dim, np.random.default_rng(config.seed + 2))
        else:
            self.aux = AuxiliaryEncoder(self.encoder, config.aux_mode, config.ema_decay)
        if config.regime_kind == "damim":
            self.afr = AFRTarget(config.depth, config.dim, config.alpha_loss_ema, np.random.default_rng(config.seed + 3))
        logger.info(f"预训练模型构建完成: regime={config.regime}, 参数量={self.num_parameters()}")

    def forward(self, images: np.ndarray, masks: Sequence[MaskVector]) -> Tuple[DiffTensor, Optional[np.ndarray]]:
        """
        一次前向，返回 (损失, α)

        α 仅 damim 有值。
        """
        batch = patchify(images, self.encoder_cfg.patch_size)
        split = split_by_mask(batch, masks)
        latent = self.encoder.encode_visible(split.visible, split.ids_keep)
        recon = self.decoder.decode(latent, self.encoder.pos_embed, split.ids_restore)
        kind = self.config.regime_kind
        if kind == "pixel":
            return pixel_loss(self.pixel_head(recon), batch.patches, split.mask, self.config.normalize_pixels), None
        taps = self.aux.encode_full_with_taps(batch.patches, self.config.layer_index)
        if kind == "layer":
            target = taps[self.config.layer_index]
            return damim_loss(recon, target, split.mask, self.config.loss_scope), None
        aggregated = self.afr(recon, taps)
        loss = damim_loss(recon, aggregated.target, split.mask, self.config.loss_scope)
        return loss, aggregated.alpha_values

    def param_groups(self) -> List[Dict]:
        """
        按预设组织参数组：encoder / decoder / head / afr / aux（仅 IWG）

        afr 组（投影 W 与 α 头）不做权重衰减，W 保持在单位阵附近。
        """
        preset = get_optimizer_preset(self.config.optimizer_preset)
        lrs = dict(preset.lr)
        if self.config.lr is not None:
            lrs = {name: self.config.lr for name in lrs}
        candidates = [
            ("encoder", self.encoder.parameters(), lrs["encoder"]),
            ("decoder", self.decoder.parameters(), lrs["decoder"]),
            ("head", self.pixel_head.parameters() if self.pixel_head is not None else [], lrs["head"]),
            ("afr", self.afr.parameters() if self.afr is not None else [], lrs["afr"]),
            ("aux", self.aux.trainable_parameters(self.config.layer_index) if self.aux is not None else [], lrs["encoder"]),
        ]
        groups = [{"name": name, "params": params, "lr": lr} for name, params, lr in candidates if params]
        for group in groups:
            if group["name"] == "afr":
                group["weight_decay"] = 0.0
        return groups

    def build_optimizer(self) -> Optimizer:
        preset = get_optimizer_preset(self.config.optimizer_preset)
        weight_decay = preset.weight_decay if self.config.weight_decay is None else self.config.weight_decay
        return build_optimizer(preset.kind, self.param_groups(), weight_decay=weight_decay)

    def meta_arrays(self) -> Dict[str, np.ndarray]:
        enc, dec = self.encoder_cfg, self.decoder_cfg
        return {
            "meta.encoder": np.array(
                [enc.num_layers, enc.hidden_size, enc.num_attention_heads, enc.patch_size,
                 enc.image_size, enc.num_channels, enc.mlp_ratio],
                dtype=np.float64,
            ),
            "meta.decoder": np.array(
                [CORRELATIONS.index(dec.correlation), float(dec.use_mlp), dec.temperature, dec.depth, dec.mlp_ratio],
                dtype=np.float64,
            ),
            "meta.regime": np.array([REGIME_CODES[self.config.regime_kind], self.config.layer_index or 0], dtype=np.float64),
        }

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """检查点内容：全部参数 + 独立辅助编码器 + 架构元数据"""
        arrays = self.state_dict()
        if self.aux is not None:
            arrays.update(self.aux.state_dict())
        arrays.update(self.meta_arrays())
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        params = {k: v for k, v in arrays.items() if not k.startswith(("meta.", "aux_encoder."))}
        self.load_state_dict(params)
        if self.aux is not None:
            self.aux.load_state_dict(arrays)


class Trainer:
    """预训练循环"""

    def __init__(self, config: TrainConfig, dataset: LabeledDataset):
        """
        Args:
            config: 训练配置
            dataset: 源域数据（标签不参与预训练）

        Raises:
            DataError: 数据集为空或图像尺寸与配置不符
        """
        if len(dataset) == 0:
            raise DataError("预训练数据集为空")
        expected = (config.image_size, config.image_size, config.channels)
        if dataset.images.shape[1:] != expected:
            raise DataError(f"图像尺寸 {dataset.images.shape[1:]} 与配置 {expected} 不符")
        self.config = config
        self.dataset = dataset
        self.model = PretrainModel(config)
        logger.info(f"训练器初始化完成: {len(dataset)} 张图像, {config.steps} 步, batch={config.batch_size}")

    def _batch_indices(self, rng: np.random.Generator) -> np.ndarray:
        total = len(self.dataset)
        return rng.choice(total, size=self.config.batch_size, replace=total < self.config.batch_size)

    def train(self) -> TrainResult:
        """
        执行训练

        Returns:
            TrainResult（模型、逐步日志、最终检查点字节）

        Raises:
            NumericAbort: 损失出现 NaN/Inf，附带最后一次正常状态的检查点
        """
        config = self.config
        model = self.model
        log: List[TrainLogRecord] = []
        if config.steps == 0:
            logger.info("steps=0，直接返回初始权重")
            return TrainResult(model=model, log=log, checkpoint=save_checkpoint(model.state_arrays()))

        optimizer = model.build_optimizer()
        logger.info(f"优化器预设 {config.optimizer_preset}: {get_preset_description(config.optimizer_preset)}")
        logger.info(f"优化器信息: {optimizer.get_info()}")
        batch_rng = np.random.default_rng([config.seed, 0xBA7C])
        num_patches = model.encoder_cfg.num_patches
        last_good = model.state_arrays()

        logger.info("=" * 60)
        logger.info(f"开始预训练: regime={config.regime}, seed={config.seed}")
        progress = tqdm(range(config.steps), desc=f"pretrain[{config.regime}]", leave=False)
        for step in progress:
            started = time.perf_counter()
            images = self.dataset.images[self._batch_indices(batch_rng)]
            masks = sample_batch_masks(len(images), num_patches, config.mask_ratio, config.seed, step)
            try:
                loss, alpha = model(images, masks)
                tc.check_finite(loss, f"第 {step + 1} 步损失")
            except NumericError as e:
                logger.error(f"❌ 训练在第 {step + 1} 步数值异常中止: {e}")
                raise NumericAbort(str(e), checkpoint=save_checkpoint(last_good), step=step + 1) from e
            last_good = model.state_arrays()

            loss.backward()
            optimizer.step()
            if model.aux is not None:
                model.aux.update()

            elapsed = (time.perf_counter() - started) * 1000.0 if config.record_timing else 0.0
            log.append(TrainLogRecord(step=step + 1, regime=config.regime, loss=loss.item(), alpha=alpha, ms=elapsed))
            progress.set_postfix(loss=f"{loss.item():.4f}")
            if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
                logger.info(f"step {step + 1}/{config.steps}: loss={loss.item():.6f}")

        result = TrainResult(model=model, log=log, checkpoint=save_checkpoint(model.state_arrays()))
        logger.info(f"✅ 预训练完成: 首窗口损失 {result.window_loss('first'):.6f} → 末窗口损失 {result.window_loss('final'):.6f}")
        logger.info("=" * 60)
        return result


def train(config: TrainConfig, dataset: LabeledDataset) -> TrainResult:
    return Trainer(config, dataset).train()

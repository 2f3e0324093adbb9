"""
聚合特征重建目标模块
逐层投影 W^(l)、由逐层重建损失生成权重 α 的线性+softmax 头，以及加权聚合目标 F
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, NumericError, ShapeError
from .layers import Linear, Module
from .tensor_core import DiffTensor, Parameter
from .vit_encoder import LayerFeatures

logger = logging.getLogger(__name__)

FeatureList = Union[LayerFeatures, Sequence[DiffTensor]]


@dataclass
class AggregatedTarget:
    """重建目标 F 及生成它的 α、对齐特征和逐层损失"""
    target: DiffTensor
    alpha: DiffTensor
    aligned: List[DiffTensor]
    layer_losses: np.ndarray

    @property
    def alpha_values(self) -> np.ndarray:
        return np.asarray(self.alpha.data, dtype=np.float64)


def _feature_list(features: FeatureList) -> List[DiffTensor]:
    return list(features.features) if isinstance(features, LayerFeatures) else list(features)


class ProjectionBank(Module):
    """L 个 d×d 无偏置投影，初始化为单位阵"""

    def __init__(self, num_layers: int, dim: int, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.projections = [Linear(dim, dim, rng, bias=False) for _ in range(num_layers)]
        for proj in self.projections:
            proj.weight.data = np.eye(dim, dtype=proj.weight.dtype)

    @property
    def num_layers(self) -> int:
        return len(self.projections)

    def forward(self, features: FeatureList) -> List[DiffTensor]:
        return align_layer(self, features)


def align_layer(bank: ProjectionBank, features: FeatureList) -> List[DiffTensor]:
    """
    f̃^(l) = f^(l)·W^(l)ᵀ（行向量约定）

    Raises:
        ConfigError: 特征层数与投影数不一致
    """
    feats = _feature_list(features)
    if len(feats) != bank.num_layers:
        raise ConfigError(f"特征层数 {len(feats)} 与投影数 {bank.num_layers} 不一致")
    return [proj(f) for proj, f in zip(bank.projections, feats)]


def layer_losses(reconstruction: Union[DiffTensor, np.ndarray], aligned: Sequence[DiffTensor]) -> np.ndarray:
    """
    ℓ_l = MSE(R, f̃^(l))，在 detach 后的数值上计算

    Raises:
        ShapeError: 形状不一致
    """
    r = reconstruction.data if isinstance(reconstruction, DiffTensor) else np.asarray(reconstruction)
    losses = []
    for idx, f in enumerate(aligned):
        f_data = f.data if isinstance(f, DiffTensor) else np.asarray(f)
        if f_data.shape != r.shape:
            raise ShapeError(f"第 {idx + 1} 层对齐特征形状 {f_data.shape} 与重建 {r.shape} 不一致")
        diff = r.astype(np.float64) - f_data.astype(np.float64)
        losses.append(np.mean(diff * diff))
    return np.asarray(losses, dtype=np.float64)


class AlphaHead(Module):
    """α = softmax(Wₐ·ℓ + bₐ)，权重与偏置零初始化（初始 α 均匀）"""

    def __init__(self, num_layers: int):
        self.weight = Parameter(np.zeros((num_layers, num_layers)))
        self.bias = Parameter(np.zeros(num_layers))

    @property
    def num_layers(self) -> int:
        return self.bias.shape[0]

    def forward(self, losses: np.ndarray) -> DiffTensor:
        return compute_alpha(self, losses)


def compute_alpha(head: AlphaHead, losses: np.ndarray) -> DiffTensor:
    """
    由逐层损失生成 α

    Raises:
        NumericError: 损失中含 NaN
        ShapeError: 长度与头不符
    """
    losses = np.asarray(losses, dtype=np.float64)
    if np.isnan(losses).any():
        raise NumericError(f"逐层损失包含 NaN: {losses}")
    if losses.shape != (head.num_layers,):
        raise ShapeError(f"逐层损失长度 {losses.shape} 与 AlphaHead 层数 {head.num_layers} 不符")
    ell = tc.as_tensor(losses.reshape(1, -1), like=head.weight)
    logits = ell @ head.weight.mT + head.bias
    return tc.softmax(logits, axis=-1).reshape(head.num_layers)


def aggregate(aligned: Sequence[DiffTensor], alpha: DiffTensor, losses: Optional[np.ndarray] = None) -> AggregatedTarget:
    """
    F = Σ_l α^(l)·f̃^(l)

    Raises:
        ShapeError: α 长度与层数不符或各层形状不一致
    """
    aligned = list(aligned)
    if not aligned or alpha.shape != (len(aligned),):
        raise ShapeError(f"α 形状 {alpha.shape} 与对齐特征层数 {len(aligned)} 不符")
    shape = aligned[0].shape
    for idx, f in enumerate(aligned):
        if f.shape != shape:
            raise ShapeError(f"第 {idx + 1} 层对齐特征形状 {f.shape} 与第 1 层 {shape} 不一致")
    target = alpha[0] * aligned[0]
    for layer in range(1, len(aligned)):
        target = target + alpha[layer] * aligned[layer]
    if losses is None:
        losses = np.full(len(aligned), np.nan)
    return AggregatedTarget(target=target, alpha=alpha, aligned=aligned, layer_losses=losses)


class AFRTarget(Module):
    """
    投影 + α 头的组合

    loss_ema > 0 时用逐层损失的滑动平均作为 α 头输入，0 表示使用当前步损失。
    """

    def __init__(self, num_layers: int, dim: int, loss_ema: float = 0.0, rng: Optional[np.random.Generator] = None):
        if not 0.0 <= loss_ema < 1.0:
            raise ConfigError(f"alpha_loss_ema 必须在 [0, 1) 内: {loss_ema}")
        self.bank = ProjectionBank(num_layers, dim, rng)
        self.head = AlphaHead(num_layers)
        self.loss_ema = loss_ema
        self._running: Optional[np.ndarray] = None
        logger.info(f"AFR 目标初始化完成: L={num_layers}, d={dim}, loss_ema={loss_ema}")

    def forward(self, reconstruction: DiffTensor, features: FeatureList) -> AggregatedTarget:
        aligned = self.bank(features)
        losses = layer_losses(reconstruction, aligned)
        head_input = losses
        if self.loss_ema > 0:
            if self._running is None:
                self._running = losses
            else:
                self._running = self.loss_ema * self._running + (1.0 - self.loss_ema) * losses
            head_input = self._running
        alpha = self.head(head_input)
        return aggregate(aligned, alpha, losses)

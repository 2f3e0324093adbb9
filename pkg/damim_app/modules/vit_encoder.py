"""
ViT 编码器模块
小型 Vision Transformer：可见 token 编码、全图逐层特征抽头与辅助编码器模式
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from easydict import EasyDict as adict

from . import tensor_core as tc
from .errors import ConfigError, ShapeError
from .layers import FeedForward, LayerNorm, Linear, Module, normal_init
from .patch_mask import patchify
from .tensor_core import DiffTensor, Parameter

logger = logging.getLogger(__name__)


vit_model_cfg = adict(
    num_layers=6,
    hidden_size=32,
    num_attention_heads=4,
    patch_size=4,
    image_size=32,
    num_channels=3,
    mlp_ratio=4.0,
    layernorm_epsilon=1e-5,
)

AUX_MODES = ("shared_with_grad_detached", "IWG", "IOG", "IE", "SOG")


def build_encoder_config(**overrides) -> adict:
    """
    构建编码器配置，未指定的字段取桌面规模默认值

    Raises:
        ConfigError: 未知字段、d 不能被头数整除或图像边长不能被 P 整除
    """
    unknown = set(overrides) - set(vit_model_cfg)
    if unknown:
        raise ConfigError(f"未知编码器配置项: {sorted(unknown)}")
    cfg = adict(dict(vit_model_cfg, **overrides))
    if cfg.hidden_size % cfg.num_attention_heads:
        raise ConfigError(f"hidden_size={cfg.hidden_size} 不能被 num_attention_heads={cfg.num_attention_heads} 整除")
    if cfg.image_size % cfg.patch_size:
        raise ConfigError(f"image_size={cfg.image_size} 不能被 patch_size={cfg.patch_size} 整除")
    cfg.num_patches = (cfg.image_size // cfg.patch_size) ** 2
    cfg.patch_dim = cfg.patch_size * cfg.patch_size * cfg.num_channels
    cfg.ffn_hidden_size = int(cfg.hidden_size * cfg.mlp_ratio)
    return cfg


def expected_encoder_parameters(cfg: adict) -> int:
    """由配置直接算出的参数量"""
    d, h = cfg.hidden_size, cfg.ffn_hidden_size
    embed = cfg.patch_dim * d + d + cfg.num_patches * d
    block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)
    return embed + cfg.num_layers * block + 2 * d


@dataclass
class LayerFeatures:
    """逐层特征 f^(1..L)，每个形状 B×N×d"""
    features: List[DiffTensor]
    provenance: str

    @property
    def num_layers(self) -> int:
        return len(self.features)

    def __getitem__(self, layer: int) -> DiffTensor:
        """按 1 起始的层号取特征"""
        return self.features[layer - 1]


@dataclass
class TokenDisruption:
    """在第 layer 个 block 输出处把 keep == 0 的 token 向量置零"""
    layer: int
    keep: np.ndarray


class Attention(Module):
    def __init__(self, cfg: adict, rng: np.random.Generator):
        self.num_heads = cfg.num_attention_heads
        self.head_dim = cfg.hidden_size // cfg.num_attention_heads
        self.qkv_proj = Linear(cfg.hidden_size, cfg.hidden_size * 3, rng)
        self.out_proj = Linear(cfg.hidden_size, cfg.hidden_size, rng)

    def forward(self, x: DiffTensor) -> DiffTensor:
        bsz, seqlen, dim = x.shape
        xqkv = self.qkv_proj(x).reshape(bsz, seqlen, 3, self.num_heads, self.head_dim)
        # (3, B, heads, S, head_dim)
        xqkv = xqkv.transpose(2, 0, 3, 1, 4)
        xq, xk, xv = xqkv[0], xqkv[1], xqkv[2]
        scores = (xq @ xk.mT) * (1.0 / math.sqrt(self.head_dim))
        output = tc.softmax(scores, axis=-1) @ xv
        output = output.transpose(0, 2, 1, 3).reshape(bsz, seqlen, dim)
        return self.out_proj(output)


class TransformerBlock(Module):
    """pre-norm block: x + Attn(LN(x))，再 + MLP(LN(x))"""

    def __init__(self, cfg: adict, layer_id: int, rng: np.random.Generator):
        self.layer_id = layer_id
        self.layer_norm1 = LayerNorm(cfg.hidden_size, eps=cfg.layernorm_epsilon)
        self.self_attn = Attention(cfg, rng)
        self.layer_norm2 = LayerNorm(cfg.hidden_size, eps=cfg.layernorm_epsilon)
        self.mlp = FeedForward(cfg.hidden_size, cfg.ffn_hidden_size, rng)

    def forward(self, x: DiffTensor) -> DiffTensor:
        h = x + self.self_attn(self.layer_norm1(x))
        return h + self.mlp(self.layer_norm2(h))


class VitEncoder(Module):
    """
    patch 嵌入 + 可学习位置编码 + L 个 block + 最终 LayerNorm

    不使用 [CLS] token；图像特征为全部 patch token 的均值。
    """

    def __init__(self, cfg: adict, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.hidden_size, rng)
        self.pos_embed = Parameter(normal_init(rng, (cfg.num_patches, cfg.hidden_size)))
        self.blocks = [TransformerBlock(cfg, layer_id + 1, rng) for layer_id in range(cfg.num_layers)]
        self.norm = LayerNorm(cfg.hidden_size, eps=cfg.layernorm_epsilon)
        logger.info(
            f"ViT 编码器初始化完成: L={cfg.num_layers}, d={cfg.hidden_size}, "
            f"heads={cfg.num_attention_heads}, N={cfg.num_patches}, 参数量={self.num_parameters()}"
        )

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    def embed_tokens(self, patches: np.ndarray, positions: np.ndarray) -> DiffTensor:
        """patch 线性嵌入并加上对应位置的位置编码"""
        positions = np.asarray(positions, dtype=np.int64)
        patches = np.asarray(patches)
        if patches.ndim != 3 or patches.shape[-1] != self.cfg.patch_dim:
            raise ShapeError(f"patch 形状应为 B×N'×{self.cfg.patch_dim}，实际 {patches.shape}")
        if positions.shape != patches.shape[:2]:
            raise ShapeError(f"位置索引形状 {positions.shape} 与 patch 形状 {patches.shape[:2]} 不符")
        if positions.size and (positions.min() < 0 or positions.max() >= self.cfg.num_patches):
            raise ShapeError(
                f"位置索引越界: 范围 [0, {self.cfg.num_patches})，实际 [{positions.min()}, {positions.max()}]"
            )
        tokens = self.patch_embed(tc.as_tensor(patches, like=self.pos_embed))
        return tokens + self.pos_embed[positions]

    def run_blocks(
        self,
        x: DiffTensor,
        disruption: Optional[TokenDisruption] = None,
        up_to_layer: Optional[int] = None,
    ) -> Tuple[DiffTensor, List[DiffTensor]]:
        """
        依次通过 block，返回最后输出和每个 block 的输出（未经最终 LayerNorm）

        up_to_layer 给定时只运行前 up_to_layer 个 block。
        """
        taps = []
        for block in self.blocks[:up_to_layer]:
            x = block(x)
            if disruption is not None and disruption.layer == block.layer_id and not disruption.keep.all():
                x = x * disruption.keep.astype(x.dtype)[None, :, None]
            taps.append(x)
        return x, taps

    def encode_visible(self, visible: np.ndarray, positions: np.ndarray) -> DiffTensor:
        """
        编码可见 patch

        Args:
            visible: B×N'×(P·P·C) 可见 patch
            positions: B×N' 每个可见 patch 的原始序号

        Returns:
            Z: B×N'×d（经最终 LayerNorm）

        Raises:
            ShapeError: 位置索引越界
        """
        hidden, _ = self.run_blocks(self.embed_tokens(visible, positions))
        return self.norm(hidden)

    def encode_full(
        self,
        patches: np.ndarray,
        disruption: Optional[TokenDisruption] = None,
    ) -> Tuple[DiffTensor, List[DiffTensor]]:
        """
        编码全部 N 个 patch

        Returns:
            (经最终 LayerNorm 的输出, 每层 block 输出列表)
        """
        patches = np.asarray(patches)
        if patches.ndim != 3 or patches.shape[1] != self.cfg.num_patches:
            raise ShapeError(f"全图编码需要 B×{self.cfg.num_patches}×D 的 patch，实际 {patches.shape}")
        positions = np.broadcast_to(np.arange(self.cfg.num_patches), patches.shape[:2])
        hidden, taps = self.run_blocks(self.embed_tokens(patches, positions), disruption)
        return self.norm(hidden), taps

    def layer_taps(self, patches: np.ndarray, up_to_layer: Optional[int] = None) -> List[DiffTensor]:
        """全图前 up_to_layer 个 block 的输出（默认全部 L 个）"""
        patches = np.asarray(patches)
        if patches.ndim != 3 or patches.shape[1] != self.cfg.num_patches:
            raise ShapeError(f"全图编码需要 B×{self.cfg.num_patches}×D 的 patch，实际 {patches.shape}")
        positions = np.broadcast_to(np.arange(self.cfg.num_patches), patches.shape[:2])
        _, taps = self.run_blocks(self.embed_tokens(patches, positions), up_to_layer=up_to_layer)
        return taps

    def encode_pooled(self, images: np.ndarray) -> DiffTensor:
        """可求导的图像特征 B×d（微调使用）"""
        batch = patchify(images, self.cfg.patch_size)
        encoded, _ = self.encode_full(batch.patches)
        return encoded.mean(axis=1)

    def pooled_features(
        self,
        images: np.ndarray,
        batch_size: int = 64,
        disruption: Optional[TokenDisruption] = None,
    ) -> np.ndarray:
        """
        冻结权重下的图像特征（全部 token 的均值），形状 B×d
        """
        images = np.asarray(images)
        if images.shape[0] == 0:
            return np.zeros((0, self.cfg.hidden_size), dtype=tc.default_dtype())
        chunks = []
        with tc.no_grad():
            for start in range(0, images.shape[0], batch_size):
                batch = patchify(images[start:start + batch_size], self.cfg.patch_size)
                encoded, _ = self.encode_full(batch.patches, disruption)
                chunks.append(encoded.data.mean(axis=1))
        return np.concatenate(chunks, axis=0)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return self.pooled_features(images)


class AuxiliaryEncoder:
    """
    处理全图 patch、输出逐层特征的辅助编码器

    模式：
        shared_with_grad_detached  与主编码器共享权重，记录计算图后把抽头 detach（默认）
        SOG  共享权重，无梯度前向
        IWG  独立副本，抽头保留梯度，副本参数参与优化
        IOG  独立冻结副本
        IE   独立副本，按 EMA 跟随主编码器
    """

    def __init__(self, primary: VitEncoder, mode: str = "shared_with_grad_detached", ema_decay: float = 0.99):
        canonical = {m.lower(): m for m in AUX_MODES}
        if mode.lower() not in canonical:
            raise ConfigError(f"未知辅助编码器模式: {mode}，可选 {list(AUX_MODES)}")
        if not 0.0 <= ema_decay <= 1.0:
            raise ConfigError(f"ema_decay 必须在 [0, 1] 内: {ema_decay}")
        self.mode = canonical[mode.lower()]
        self.primary = primary
        self.ema_decay = ema_decay
        self.encoder = primary if self.is_shared else primary.copy()
        logger.info(f"辅助编码器模式: {self.mode}")

    @property
    def is_shared(self) -> bool:
        return self.mode in ("shared_with_grad_detached", "SOG")

    def trainable_parameters(self, up_to_layer: Optional[int] = None) -> List[Parameter]:
        """
        需要加入优化器的辅助参数（仅 IWG）

        只包含嵌入与前 up_to_layer 个 block；之后的 block 与最终 LayerNorm 不在抽头路径上，没有梯度。
        """
        if self.mode != "IWG":
            return []
        depth = self.encoder.num_layers if up_to_layer is None else up_to_layer
        params = self.encoder.patch_embed.parameters() + [self.encoder.pos_embed]
        for block in self.encoder.blocks[:depth]:
            params.extend(block.parameters())
        return params

    def encode_full_with_taps(self, patches: np.ndarray, up_to_layer: Optional[int] = None) -> LayerFeatures:
        """
        全图前向并返回 block 输出

        Args:
            up_to_layer: 只需要前 l 层时给定，返回的 LayerFeatures 只有 l 层

        Raises:
            ShapeError: patch 形状与配置不符
        """
        if self.mode == "IWG":
            return LayerFeatures(features=self.encoder.layer_taps(patches, up_to_layer), provenance="attached")
        # 分离模式的抽头不参与反向，前向不必记录计算图
        with tc.no_grad():
            taps = self.encoder.layer_taps(patches, up_to_layer)
        return LayerFeatures(features=[tap.detach() for tap in taps], provenance="detached")

    def update(self) -> None:
        """每个优化步之后调用；IE 模式执行 aux = decay·aux + (1−decay)·primary"""
        if self.mode != "IE":
            return
        decay = self.ema_decay
        for (_, aux), (_, src) in zip(self.encoder.named_parameters(), self.primary.named_parameters()):
            aux.data = (decay * aux.data + (1.0 - decay) * src.data).astype(aux.dtype)

    def state_dict(self, prefix: str = "aux_encoder.") -> dict:
        """独立副本的权重（共享模式为空）"""
        return {} if self.is_shared else self.encoder.state_dict(prefix)

    def load_state_dict(self, state: dict, prefix: str = "aux_encoder.") -> None:
        if not self.is_shared:
            self.encoder.load_state_dict(state, prefix=prefix, strict=False)


def encode_full_with_taps(encoder: VitEncoder, patches: np.ndarray, grad_mode: str = "shared_with_grad_detached") -> LayerFeatures:
    """
    单次调用形式：为 encoder 构造对应模式的辅助编码器并返回逐层特征

    Raises:
        ConfigError: 未知模式
    """
    return AuxiliaryEncoder(encoder, grad_mode).encode_full_with_taps(patches)

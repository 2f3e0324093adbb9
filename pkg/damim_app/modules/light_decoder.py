"""
轻量解码器模块
单块单头解码器：用 token 间相关性（默认余弦相似度）代替 query-key 注意力，默认去掉 MLP
"""

import logging
import math
from typing import List

import numpy as np
from easydict import EasyDict as adict

from . import tensor_core as tc
from .errors import ConfigError, ShapeError
from .layers import FeedForward, LayerNorm, Linear, Module, normal_init
from .tensor_core import DiffTensor, Parameter

logger = logging.getLogger(__name__)

CORRELATIONS = ("cosine", "euclidean", "identity", "qk_attention")

decoder_cfg = adict(
    correlation="cosine",
    use_mlp=False,
    temperature=1.0,
    hidden_size=32,
    depth=1,
    mlp_ratio=4.0,
    layernorm_epsilon=1e-5,
    cosine_eps=1e-8,
)


def build_decoder_config(**overrides) -> adict:
    """
    构建解码器配置，默认即轻量解码器 (cosine, 无 MLP, τ=1)

    Raises:
        ConfigError: 未知字段或取值非法
    """
    unknown = set(overrides) - set(decoder_cfg)
    if unknown:
        raise ConfigError(f"未知解码器配置项: {sorted(unknown)}")
    cfg = adict(dict(decoder_cfg, **overrides))
    if cfg.correlation not in CORRELATIONS:
        raise ConfigError(f"未知相关性类型: {cfg.correlation}，可选 {list(CORRELATIONS)}")
    if cfg.temperature <= 0:
        raise ConfigError(f"温度 τ 必须为正: {cfg.temperature}")
    if cfg.depth < 1:
        raise ConfigError(f"解码器层数必须 ≥ 1: {cfg.depth}")
    cfg.ffn_hidden_size = int(cfg.hidden_size * cfg.mlp_ratio)
    return cfg


def expected_num_parameters(cfg: adict) -> int:
    """
    由配置算出的参数量

    每块: V、O 投影 2(d²+d)，qk_attention 另加 Q、K 2(d²+d)，
    MLP 2dh+h+d，块后 LayerNorm 2d；另有共享 mask token d。
    """
    d, h = cfg.hidden_size, cfg.ffn_hidden_size
    block = 2 * (d * d + d) + 2 * d
    if cfg.correlation == "qk_attention":
        block += 2 * (d * d + d)
    if cfg.use_mlp:
        block += 2 * d * h + h + d
    return d + cfg.depth * block


def cosine_scores(tokens: DiffTensor, eps: float = 1e-8) -> DiffTensor:
    """S_ij = t_i·t_j / ((‖t_i‖+ε)(‖t_j‖+ε))"""
    return tc.cosine_similarity_matrix(tokens, eps)


def euclidean_scores(tokens: DiffTensor) -> DiffTensor:
    """S_ij = −‖t_i − t_j‖²，对角为 0"""
    lead, (n, d) = tokens.shape[:-2], tokens.shape[-2:]
    rows = tokens.reshape(*lead, n, 1, d)
    cols = tokens.reshape(*lead, 1, n, d)
    diff = rows - cols
    return -(diff * diff).sum(axis=-1)


class MaskTokenBank(Module):
    """所有被遮挡位置共享的可学习 mask token，位置信息只来自位置编码"""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.mask_token = Parameter(normal_init(rng, (dim,)))

    def tokens(self, batch_size: int, count: int) -> DiffTensor:
        base = tc.zeros((batch_size, count, self.mask_token.shape[0]))
        return base + self.mask_token


class CorrelationBlock(Module):
    """
    mixed = softmax(S/τ)·V(T)，out = T + O(mixed)，可选 MLP 残差，最后 LayerNorm
    """

    def __init__(self, cfg: adict, rng: np.random.Generator):
        d = cfg.hidden_size
        self.correlation = cfg.correlation
        self.temperature = float(cfg.temperature)
        self.cosine_eps = cfg.cosine_eps
        if cfg.correlation == "qk_attention":
            self.q_proj = Linear(d, d, rng)
            self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.o_proj = Linear(d, d, rng)
        self.mlp = FeedForward(d, cfg.ffn_hidden_size, rng) if cfg.use_mlp else None
        self.norm = LayerNorm(d, eps=cfg.layernorm_epsilon)

    def scores(self, tokens: DiffTensor) -> DiffTensor:
        if self.correlation == "cosine":
            return cosine_scores(tokens, self.cosine_eps)
        if self.correlation == "euclidean":
            return euclidean_scores(tokens)
        if self.correlation == "identity":
            n = tokens.shape[-2]
            return tc.as_tensor(np.broadcast_to(np.eye(n), (*tokens.shape[:-1], n)).copy(), like=tokens)
        q, k = self.q_proj(tokens), self.k_proj(tokens)
        return (q @ k.mT) * (1.0 / math.sqrt(tokens.shape[-1]))

    def mixing_weights(self, tokens: DiffTensor) -> DiffTensor:
        """行随机矩阵 softmax(S/τ)"""
        return tc.softmax(self.scores(tokens) * (1.0 / self.temperature), axis=-1)

    def forward(self, tokens: DiffTensor) -> DiffTensor:
        mixed = self.mixing_weights(tokens) @ self.v_proj(tokens)
        out = tokens + self.o_proj(mixed)
        if self.mlp is not None:
            out = out + self.mlp(out)
        return self.norm(out)


class LightDecoder(Module):
    """把可见表示与 mask token 按原始顺序拼接后做相关性混合，输出 N×d 的重建 R"""

    def __init__(self, cfg: adict, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.mask_bank = MaskTokenBank(cfg.hidden_size, rng)
        self.blocks: List[CorrelationBlock] = [CorrelationBlock(cfg, rng) for _ in range(cfg.depth)]
        logger.info(
            f"解码器初始化完成: correlation={cfg.correlation}, use_mlp={cfg.use_mlp}, "
            f"τ={cfg.temperature}, depth={cfg.depth}, 参数量={self.num_parameters()}"
        )

    def decode_tokens(self, tokens: DiffTensor) -> DiffTensor:
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def forward(self, latent: DiffTensor, pos_embed: DiffTensor, ids_restore: np.ndarray) -> DiffTensor:
        return self.decode(latent, pos_embed, ids_restore)

    def decode(self, latent: DiffTensor, pos_embed: DiffTensor, ids_restore: np.ndarray) -> DiffTensor:
        """
        Args:
            latent: B×N'×d 可见 token 表示 Z
            pos_embed: N×d 位置编码（与编码器共享）
            ids_restore: B×N，原始第 i 个位置在 concat(Z, masks) 中的序号

        Returns:
            R: B×N×d

        Raises:
            ShapeError: ids_restore 不是 0..N−1 的排列，或与 Z / 位置编码不符
        """
        ids_restore = np.asarray(ids_restore, dtype=np.int64)
        if latent.ndim != 3 or ids_restore.ndim != 2 or ids_restore.shape[0] != latent.shape[0]:
            raise ShapeError(f"解码输入形状不符: Z={latent.shape}, ids_restore={ids_restore.shape}")
        batch_size, num_visible, _ = latent.shape
        num_patches = ids_restore.shape[1]
        if num_patches != pos_embed.shape[0] or num_visible > num_patches:
            raise ShapeError(
                f"token 数不符: N={num_patches}, N'={num_visible}, 位置编码长度 {pos_embed.shape[0]}"
            )
        expected = np.arange(num_patches)
        if not all(np.array_equal(np.sort(row), expected) for row in ids_restore):
            raise ShapeError("ids_restore 存在重复或越界索引，无法还原原始顺序")

        masks = self.mask_bank.tokens(batch_size, num_patches - num_visible)
        tokens = tc.gather_rows(tc.concat([latent, masks], axis=1), ids_restore)
        is_mask = (ids_restore >= num_visible).astype(tokens.dtype)[:, :, None]
        tokens = tokens + pos_embed * is_mask
        return self.decode_tokens(tokens)

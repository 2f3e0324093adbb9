"""
图像分块与掩码模块
把图像切成不重叠的 patch，按掩码率随机遮挡，并划分可见 / 被遮挡集合
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from einops import rearrange

from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

# patch 向量内的展开顺序：(patch 行, patch 列) 决定 token 序号，
# token 内部按 (像素行, 像素列, 通道) 行优先展开
PATCHIFY_PATTERN = "b (h p1) (w p2) c -> b (h w) (p1 p2 c)"
UNPATCHIFY_PATTERN = "b (h w) (p1 p2 c) -> b (h p1) (w p2) c"

Seed = Union[int, Sequence[int]]


@dataclass
class PatchBatch:
    """形状 B×N×(P·P·C) 的 patch 序列"""
    patches: np.ndarray
    patch_size: int
    grid: Tuple[int, int]
    channels: int

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def batch_size(self) -> int:
        return self.patches.shape[0]


@dataclass
class MaskVector:
    """
    单张图像的二值掩码：1 = 可见，0 = 被遮挡
    """
    m: np.ndarray
    ratio: float

    @property
    def num_patches(self) -> int:
        return int(self.m.shape[0])

    @property
    def num_masked(self) -> int:
        return int((self.m == 0).sum())

    @property
    def num_visible(self) -> int:
        return int((self.m == 1).sum())

    @property
    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(self.m == 1)

    @property
    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.m == 0)


@dataclass
class MaskSplit:
    """
    可见 / 被遮挡划分及索引映射

    ids_restore[b, i] 给出原始第 i 个 patch 在 concat(visible, masked) 中的位置。
    """
    visible: np.ndarray
    masked: np.ndarray
    ids_keep: np.ndarray
    ids_masked: np.ndarray
    ids_restore: np.ndarray
    mask: np.ndarray

    @property
    def num_visible(self) -> int:
        return int(self.ids_keep.shape[1])

    @property
    def num_masked(self) -> int:
        return int(self.ids_masked.shape[1])


def round_half_up(value: float) -> int:
    """四舍五入（0.5 向上），跨平台结果一致"""
    return int(math.floor(value + 0.5))


def patchify(images: np.ndarray, patch_size: int) -> PatchBatch:
    """
    把 B×H×W×C（或单张 H×W×C）图像切成 patch 序列

    Args:
        images: 取值 [0,1] 的图像数组
        patch_size: patch 边长 P

    Returns:
        PatchBatch

    Raises:
        ShapeError: H 或 W 不能被 P 整除
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ShapeError(f"图像必须是 B×H×W×C 或 H×W×C，实际形状 {images.shape}")
    _, height, width, channels = images.shape
    if patch_size <= 0 or height % patch_size or width % patch_size:
        raise ShapeError(f"图像尺寸 {height}×{width} 不能被 patch 边长 {patch_size} 整除")
    patches = rearrange(images, PATCHIFY_PATTERN, p1=patch_size, p2=patch_size)
    return PatchBatch(
        patches=patches,
        patch_size=patch_size,
        grid=(height // patch_size, width // patch_size),
        channels=channels,
    )


def unpatchify(batch: PatchBatch) -> np.ndarray:
    """patchify 的逆变换，返回 B×H×W×C"""
    rows, cols = batch.grid
    return rearrange(
        batch.patches,
        UNPATCHIFY_PATTERN,
        h=rows,
        w=cols,
        p1=batch.patch_size,
        p2=batch.patch_size,
        c=batch.channels,
    )


def masked_count(num_patches: int, ratio: float) -> int:
    """被遮挡数量 round(N·r)，夹到 [1, N−1]"""
    count = round_half_up(num_patches * ratio)
    clamped = min(max(count, 1), num_patches - 1)
    if clamped != count:
        logger.warning(f"掩码数量 round({num_patches}×{ratio}) = {count} 越界，已夹到 {clamped}")
    return clamped


def sample_mask(num_patches: int, ratio: float, seed: Seed) -> MaskVector:
    """
    无放回均匀采样 round(N·r) 个被遮挡位置

    Args:
        num_patches: patch 数 N（≥ 2）
        ratio: 掩码率 r ∈ (0, 1)
        seed: 随机种子（整数或整数序列）

    Returns:
        MaskVector

    Raises:
        ConfigError: N < 2 或 r 不在 (0, 1)
    """
    if num_patches < 2:
        raise ConfigError(f"patch 数必须 ≥ 2，实际 {num_patches}")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"掩码率必须在 (0, 1) 内，实际 {ratio}")
    count = masked_count(num_patches, ratio)
    rng = np.random.default_rng(seed)
    masked = rng.choice(num_patches, size=count, replace=False)
    m = np.ones(num_patches, dtype=np.int8)
    m[masked] = 0
    return MaskVector(m=m, ratio=ratio)


def sample_batch_masks(batch_size: int, num_patches: int, ratio: float, seed: int, step: int = 0) -> List[MaskVector]:
    """
    每张图像独立采样掩码，第 b 张使用种子 (seed, step, b)
    """
    return [sample_mask(num_patches, ratio, [seed, step, b]) for b in range(batch_size)]


def split_by_mask(patches: Union[PatchBatch, np.ndarray], masks: Union[MaskVector, Sequence[MaskVector]]) -> MaskSplit:
    """
    按掩码划分可见与被遮挡 patch

    Args:
        patches: PatchBatch 或 B×N×D 数组
        masks: 单个 MaskVector（整个批次共用）或每个样本一个

    Returns:
        MaskSplit，索引均按原始顺序升序

    Raises:
        ShapeError: 掩码长度与 N 不符，或批内可见数量不一致
    """
    data = patches.patches if isinstance(patches, PatchBatch) else np.asarray(patches)
    if data.ndim != 3:
        raise ShapeError(f"patch 数组必须是 B×N×D，实际 {data.shape}")
    batch_size, num_patches, _ = data.shape
    if isinstance(masks, MaskVector):
        masks = [masks] * batch_size
    if len(masks) != batch_size:
        raise ShapeError(f"掩码个数 {len(masks)} 与批大小 {batch_size} 不符")
    for mask in masks:
        if mask.num_patches != num_patches:
            raise ShapeError(f"掩码长度 {mask.num_patches} 与 patch 数 {num_patches} 不符")
    counts = {mask.num_visible for mask in masks}
    if len(counts) != 1:
        raise ShapeError(f"批内各样本可见数量不一致: {sorted(counts)}")

    ids_keep = np.stack([mask.visible_indices for mask in masks]).astype(np.int64)
    ids_masked = np.stack([mask.masked_indices for mask in masks]).reshape(batch_size, -1).astype(np.int64)
    ids_shuffle = np.concatenate([ids_keep, ids_masked], axis=1)
    ids_restore = np.argsort(ids_shuffle, axis=1, kind="stable")
    rows = np.arange(batch_size)[:, None]
    return MaskSplit(
        visible=data[rows, ids_keep],
        masked=data[rows, ids_masked],
        ids_keep=ids_keep,
        ids_masked=ids_masked,
        ids_restore=ids_restore,
        mask=np.stack([mask.m for mask in masks]),
    )


def restore_order(visible: np.ndarray, masked: np.ndarray, ids_restore: np.ndarray) -> np.ndarray:
    """把 concat(visible, masked) 按 ids_restore 还原成原始顺序"""
    merged = np.concatenate([visible, masked], axis=1)
    rows = np.arange(merged.shape[0])[:, None]
    return merged[rows, ids_restore]

"""
合成双域数据模块
五类几何形状；域 B 与域 A 几何完全相同，只施加低层变换（亮度偏移、通道置换、低频色偏）
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .dataset import LabeledDataset

logger = logging.getLogger(__name__)

SHAPES: Tuple[str, ...] = ("square", "disk", "cross", "stripes", "ring")
PPM_CHANNELS = (1, 3)


class SyntheticSpec(BaseModel):
    """合成数据规格"""
    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(default=32, ge=8, description="图像边长")
    channels: int = Field(default=3, ge=1, le=3, description="通道数: 1（灰度）或 3（RGB）")
    per_class: int = Field(default=40, ge=1, description="每类样本数")
    base_brightness: float = Field(default=0.15, description="域 A 背景亮度")
    contrast: float = Field(default=0.45, description="形状相对背景的亮度")
    channel_gains: Tuple[float, ...] = Field(default=(1.0, 0.85, 0.7), description="域 A 通道增益")
    noise_std: float = Field(default=0.02, ge=0.0, description="像素噪声标准差")
    brightness_offset: float = Field(default=0.3, description="域 B 亮度偏移")
    channel_permutation: Tuple[int, ...] = Field(default=(2, 0, 1), description="域 B 通道置换")
    cast_amplitude: float = Field(default=0.1, ge=0.0, description="域 B 低频色偏幅度")

    @field_validator("channel_gains", "channel_permutation", mode="before")
    @classmethod
    def _split_list(cls, value):
        # 配置文件与命令行中以逗号分隔
        if isinstance(value, str):
            return tuple(part.strip() for part in value.split(",") if part.strip())
        return value

    @field_validator("channels")
    @classmethod
    def _check_channels(cls, value):
        # P6 为 RGB，灰度写出时扩展为三通道
        if value not in PPM_CHANNELS:
            raise ValueError(f"channels 只能是 1 或 3: {value}")
        return value

    @field_validator("channel_permutation")
    @classmethod
    def _check_permutation(cls, value):
        if sorted(value) != list(range(len(value))):
            raise ValueError(f"channel_permutation 不是排列: {value}")
        return value

    def gains(self) -> np.ndarray:
        gains = np.resize(np.asarray(self.channel_gains, dtype=np.float64), self.channels)
        return gains

    def permutation(self) -> np.ndarray:
        perm = np.asarray(self.channel_permutation, dtype=np.int64)
        if perm.shape[0] != self.channels:
            perm = np.roll(np.arange(self.channels), 1)
        return perm


@dataclass
class SyntheticDomains:
    domain_a: LabeledDataset
    domain_b: LabeledDataset
    # 裁剪前域 B 与域 A 的平均像素差
    unclamped_mean_gap: float


def draw_shape(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """用 Pillow 绘制单个形状，返回 size×size 的 {0,1} 掩膜"""
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    scale = size / 32.0
    cx = size / 2 + rng.uniform(-3, 3) * scale
    cy = size / 2 + rng.uniform(-3, 3) * scale
    radius = rng.uniform(6, 10) * scale
    thickness = max(1, int(round(rng.uniform(2, 4) * scale)))
    box = [cx - radius, cy - radius, cx + radius, cy + radius]
    if shape == "square":
        draw.rectangle(box, fill=255)
    elif shape == "disk":
        draw.ellipse(box, fill=255)
    elif shape == "cross":
        half = thickness
        draw.rectangle([cx - radius, cy - half, cx + radius, cy + half], fill=255)
        draw.rectangle([cx - half, cy - radius, cx + half, cy + radius], fill=255)
    elif shape == "stripes":
        period = int(rng.integers(6, 10) * scale)
        phase = int(rng.integers(0, period))
        for x0 in range(phase, 2 * size, period):
            draw.line([(x0, 0), (x0 - size, size)], fill=255, width=thickness)
    elif shape == "ring":
        draw.ellipse(box, outline=255, width=thickness)
    else:
        raise ValueError(f"未知形状: {shape}")
    return (np.asarray(canvas, dtype=np.float64) > 127).astype(np.float64)


def color_cast(size: int, channels: int, amplitude: float) -> np.ndarray:
    """每个通道一个完整周期的正弦色偏，整幅图均值为 0"""
    coords = np.arange(size) / size
    rows, cols = np.meshgrid(coords, coords, indexing="ij")
    layers = [
        amplitude * np.sin(2 * np.pi * cols + 2 * np.pi * c / channels) * np.cos(2 * np.pi * rows)
        for c in range(channels)
    ]
    return np.stack(layers, axis=-1)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticDomains:
    """
    生成域 A / 域 B 两个带标签数据集

    类别只由形状决定；两个域的第 i 个样本几何与噪声完全相同。
    """
    rng = np.random.default_rng(seed)
    size, channels = spec.image_size, spec.channels
    gains = spec.gains()
    perm = spec.permutation()
    cast = color_cast(size, channels, spec.cast_amplitude)

    raw_a, raw_b, labels = [], [], []
    for label, shape in enumerate(SHAPES):
        for _ in range(spec.per_class):
            geometry = draw_shape(shape, size, rng)
            gray = spec.base_brightness + spec.contrast * geometry
            noise = rng.normal(0.0, spec.noise_std, size=(size, size, channels)) if spec.noise_std else 0.0
            a = gray[:, :, None] * gains + noise
            b = a[:, :, perm] + spec.brightness_offset + cast
            raw_a.append(a)
            raw_b.append(b)
            labels.append(label)

    raw_a = np.stack(raw_a)
    raw_b = np.stack(raw_b)
    gap = float(raw_b.mean() - raw_a.mean())
    labels = np.asarray(labels, dtype=np.int64)
    domain_a = LabeledDataset(np.clip(raw_a, 0.0, 1.0).astype(np.float32), labels, domain="A")
    domain_b = LabeledDataset(np.clip(raw_b, 0.0, 1.0).astype(np.float32), labels.copy(), domain="B")
    logger.info(
        f"✅ 合成数据生成完成: {len(SHAPES)} 类 × {spec.per_class} 张, {size}×{size}×{channels}, "
        f"域间平均亮度差(裁剪前) {gap:.4f}"
    )
    return SyntheticDomains(domain_a=domain_a, domain_b=domain_b, unclamped_mean_gap=gap)

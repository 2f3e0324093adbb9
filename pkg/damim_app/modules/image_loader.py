"""
图像读写模块
二进制 PPM (P6) 解析、按标签 CSV 载入数据集，以及把数据集写成 PPM 文件
"""

import csv
import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from PIL import Image

from .dataset import LabeledDataset
from .errors import DataError, PPMParseError, ShapeError

logger = logging.getLogger(__name__)

PPM_MAGIC = b"P6"
WHITESPACE = b" \t\n\r\v\f"
LABELS_FILENAME = "labels.csv"
CSV_COLUMNS = ("filename", "class_index")


class _HeaderReader:
    """按字节扫描 PPM 头部，支持 # 注释"""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def skip_whitespace_and_comments(self) -> None:
        while self.pos < len(self.data):
            ch = self.data[self.pos:self.pos + 1]
            if ch in WHITESPACE and ch:
                self.pos += 1
            elif ch == b"#":
                end = self.data.find(b"\n", self.pos)
                self.pos = len(self.data) if end < 0 else end + 1
            else:
                return

    def integer(self, what: str) -> int:
        self.skip_whitespace_and_comments()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos:self.pos + 1].isdigit():
            self.pos += 1
        if start == self.pos:
            raise PPMParseError(f"PPM 头部缺少{what}", start)
        return int(self.data[start:self.pos])


def parse_ppm(data: bytes) -> np.ndarray:
    """
    解析 P6 PPM 字节

    Returns:
        H×W×3 的 float32 数组，按 maxval 缩放到 [0,1]

    Raises:
        PPMParseError: 头部非法或像素数据不足，附带字节偏移
    """
    if data[:2] != PPM_MAGIC:
        raise PPMParseError(f"magic 应为 P6，实际 {data[:2]!r}", 0)
    reader = _HeaderReader(data)
    reader.pos = 2
    if reader.pos >= len(data) or data[reader.pos:reader.pos + 1] not in (b" ", b"\t", b"\n", b"\r", b"#"):
        raise PPMParseError("magic 后缺少空白", reader.pos)
    width = reader.integer("宽度")
    height = reader.integer("高度")
    offset = reader.pos
    maxval = reader.integer("maxval")
    if width <= 0 or height <= 0:
        raise PPMParseError(f"图像尺寸非法: {width}×{height}", offset)
    if not 0 < maxval < 65536:
        raise PPMParseError(f"maxval 必须在 1..65535，实际 {maxval}", offset)
    if reader.pos >= len(data) or data[reader.pos:reader.pos + 1] not in WHITESPACE:
        raise PPMParseError("maxval 后缺少单个空白字符", reader.pos)
    raster_start = reader.pos + 1

    sample_dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    expected = width * height * 3 * sample_dtype.itemsize
    available = len(data) - raster_start
    if available < expected:
        raise PPMParseError(f"像素数据不足: 需要 {expected} 字节，只有 {available} 字节", len(data))
    samples = np.frombuffer(data, dtype=sample_dtype, count=width * height * 3, offset=raster_start)
    return (samples.reshape(height, width, 3).astype(np.float32) / np.float32(maxval)).astype(np.float32)


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    return parse_ppm(Path(path).read_bytes())


def _read_label_rows(labels_csv: Path) -> List[Tuple[str, int]]:
    rows = []
    with open(labels_csv, newline="", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if lineno == 1 and row[0].strip() == CSV_COLUMNS[0]:
                continue
            if len(row) < 2:
                raise DataError(f"{labels_csv} 第 {lineno} 行缺少列: {row}")
            try:
                rows.append((row[0].strip(), int(row[1])))
            except ValueError:
                raise DataError(f"{labels_csv} 第 {lineno} 行类别不是整数: {row[1]!r}")
    return rows


def load_images(directory: Union[str, Path], labels_csv: Union[str, Path, None] = None) -> LabeledDataset:
    """
    按 CSV (filename,class_index) 载入 PPM 图像

    Args:
        directory: 图像目录
        labels_csv: 标签文件，默认 directory/labels.csv

    Returns:
        LabeledDataset；CSV 为空时返回空数据集

    Raises:
        DataError: 标签文件缺失、图像文件缺失（列出全部）或尺寸不一致
        PPMParseError: PPM 解析失败
    """
    directory = Path(directory)
    labels_csv = Path(labels_csv) if labels_csv is not None else directory / LABELS_FILENAME
    if not labels_csv.exists():
        raise DataError(f"标签文件不存在: {labels_csv}")
    rows = _read_label_rows(labels_csv)
    if not rows:
        logger.warning(f"标签文件 {labels_csv} 为空，返回空数据集")
        return LabeledDataset(np.zeros((0, 0, 0, 3), dtype=np.float32), np.zeros(0, dtype=np.int64), domain=directory.name)

    missing = [name for name, _ in rows if not (directory / name).is_file()]
    if missing:
        raise DataError(f"{len(missing)} 个图像文件缺失: {missing}")

    images = []
    for name, _ in rows:
        try:
            images.append(read_ppm(directory / name))
        except PPMParseError as e:
            logger.error(f"❌ 解析 {name} 失败: {e}")
            raise
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise DataError(f"图像尺寸不一致: {sorted(shapes)}")
    dataset = LabeledDataset(
        np.stack(images),
        np.asarray([label for _, label in rows], dtype=np.int64),
        domain=directory.name,
        filenames=[name for name, _ in rows],
    )
    logger.info(f"✅ 载入 {len(dataset)} 张图像: {directory}（{len(dataset.classes)} 类）")
    return dataset


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_dataset(dataset: LabeledDataset, directory: Union[str, Path], prefix: str = "") -> Path:
    """
    把数据集写成 PPM 文件与 labels.csv，返回标签文件路径

    Raises:
        ShapeError: 通道数不是 1 或 3
    """
    if dataset.images.ndim != 4 or dataset.images.shape[-1] not in (1, 3):
        raise ShapeError(f"PPM 只支持 1 或 3 通道图像，实际形状 {dataset.images.shape}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    prefix = prefix or dataset.domain or "img"
    names = []
    for index, (image, label) in enumerate(zip(dataset.images, dataset.labels)):
        pixels = to_uint8(image)
        if pixels.shape[-1] == 1:
            pixels = np.repeat(pixels, 3, axis=-1)
        name = f"{prefix}_{index:05d}_c{int(label)}.ppm"
        Image.fromarray(pixels).save(directory / name, format="PPM")
        names.append((name, int(label)))
    labels_csv = directory / LABELS_FILENAME
    with open(labels_csv, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        writer.writerows(names)
    logger.info(f"✅ 已写出 {len(names)} 张 PPM 图像到 {directory}")
    return labels_csv

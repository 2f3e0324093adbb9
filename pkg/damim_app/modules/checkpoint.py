"""
检查点格式模块
DAMIM01 二进制格式（小端）：

    magic "DAMIM01" | version u16 | count u32 |
    每个数组: name_len u16 + UTF-8 名称 | dtype u8 (0=f32, 1=f64) | rank u8 | dims u32 × rank | 原始数据 |
    CRC32(之前全部字节) u32
"""

import logging
import struct
import zlib
from pathlib import Path
from typing import Dict, Iterable, Mapping, Tuple, Union

import numpy as np

from .errors import CheckpointCorruptionError, CheckpointVersionError, ContractError, DataError

logger = logging.getLogger(__name__)

MAGIC = b"DAMIM01"
FORMAT_VERSION = 1
HEADER = struct.Struct("<7sHI")
CRC = struct.Struct("<I")

DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

ArrayItems = Union[Mapping[str, np.ndarray], Iterable[Tuple[str, np.ndarray]]]


def _items(arrays: ArrayItems):
    if isinstance(arrays, Mapping):
        return sorted(arrays.items())
    items = list(arrays)
    seen = set()
    for name, _ in items:
        if name in seen:
            raise ContractError(f"检查点数组名重复: {name}")
        seen.add(name)
    return sorted(items, key=lambda item: item[0])


def save_checkpoint(arrays: ArrayItems) -> bytes:
    """
    序列化命名数组，按名称排序写入

    Raises:
        ContractError: 名称重复、名称过长或 dtype 不受支持
    """
    chunks = [HEADER.pack(MAGIC, FORMAT_VERSION, 0)]
    count = 0
    for name, array in _items(arrays):
        array = np.asarray(array)
        if array.dtype not in DTYPE_CODES:
            raise ContractError(f"数组 {name} 的 dtype {array.dtype} 不受支持（仅 float32 / float64）")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF or array.ndim > 0xFF:
            raise ContractError(f"数组 {name} 的名称或维数超出格式上限")
        code = DTYPE_CODES[array.dtype]
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<BB{array.ndim}I", code, array.ndim, *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=CODE_DTYPES[code]).tobytes())
        count += 1
    chunks[0] = HEADER.pack(MAGIC, FORMAT_VERSION, count)
    body = b"".join(chunks)
    return body + CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, body: bytes, offset: int):
        self.body = body
        self.offset = offset

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.body):
            raise CheckpointCorruptionError(f"检查点在字节偏移 {self.offset} 处被截断")
        chunk = self.body[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(payload: bytes) -> Dict[str, np.ndarray]:
    """
    解析检查点字节，返回按写入顺序排列的命名数组

    Raises:
        CheckpointCorruptionError: magic 不符、CRC 校验失败或结构损坏
        CheckpointVersionError: 未知格式版本
    """
    if len(payload) < HEADER.size + CRC.size:
        raise CheckpointCorruptionError(f"检查点长度 {len(payload)} 字节，小于最小长度 {HEADER.size + CRC.size}")
    body, (stored_crc,) = payload[:-CRC.size], CRC.unpack(payload[-CRC.size:])
    magic, version, count = HEADER.unpack(body[:HEADER.size])
    if magic != MAGIC:
        raise CheckpointCorruptionError(f"magic 不符: {magic!r}")
    actual_crc = zlib.crc32(body) & 0xFFFFFFFF
    if actual_crc != stored_crc:
        raise CheckpointCorruptionError(f"CRC 校验失败: 记录 {stored_crc:08x}，实际 {actual_crc:08x}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"未知检查点版本 {version}（支持 {FORMAT_VERSION}）")

    reader = _Reader(body, HEADER.size)
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointCorruptionError(f"数组名不是合法 UTF-8: {e}")
        code, rank = reader.unpack("<BB")
        if code not in CODE_DTYPES:
            raise CheckpointCorruptionError(f"数组 {name} 的 dtype 代码未知: {code}")
        dims = reader.unpack(f"<{rank}I")
        dtype = CODE_DTYPES[code]
        raw = reader.take(int(np.prod(dims, dtype=np.int64)) * dtype.itemsize)
        if name in arrays:
            raise CheckpointCorruptionError(f"检查点中数组名重复: {name}")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if reader.offset != len(body):
        raise CheckpointCorruptionError(f"检查点末尾有 {len(body) - reader.offset} 字节多余数据")
    logger.debug(f"检查点解析完成: {len(arrays)} 个数组")
    return arrays


def write_checkpoint(path: Union[str, Path], arrays: ArrayItems) -> bytes:
    payload = save_checkpoint(arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    logger.info(f"✅ 检查点已保存: {path} ({len(payload)} 字节)")
    return payload


def read_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """
    Raises:
        DataError: 文件无法读取
    """
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"无法读取检查点 {path}: {e}")
    return load_checkpoint(payload)

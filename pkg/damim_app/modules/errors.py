"""
异常定义模块
统一定义各组件抛出的错误类型，CLI 根据类型映射退出码
"""

from typing import Optional


class DamimError(Exception):
    """所有 DAMIM 组件错误的基类"""


class ShapeError(DamimError, ValueError):
    """张量/数组形状不匹配"""


class ConfigError(DamimError, ValueError):
    """配置项非法、未知配置键或取值越界"""


class ContractError(DamimError, RuntimeError):
    """调用方违反前置条件（如对非标量调用 backward）"""


class NumericError(DamimError, ArithmeticError):
    """数值异常（NaN / Inf）"""


class NumericAbort(NumericError):
    """训练因数值异常中止，附带最后一次正常状态的检查点字节"""

    def __init__(self, message: str, checkpoint: Optional[bytes] = None, step: int = -1):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step


class DataError(DamimError, ValueError):
    """数据集缺失、样本不足或文件缺失"""


class PPMParseError(DataError):
    """PPM 文件头或数据解析失败，offset 为出错处的字节偏移"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (字节偏移 {offset})")
        self.offset = offset


class CheckpointCorruptionError(DataError):
    """检查点 CRC 校验失败或结构损坏"""


class CheckpointVersionError(DataError):
    """检查点版本未知，拒绝解析"""

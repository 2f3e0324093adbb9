"""
配置加载模块
解析扁平 `key = value` 配置文件，按 默认值 < 配置文件 < 命令行 的优先级构建 pydantic 配置模型
"""

import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Type, TypeVar, Union

from pydantic import BaseModel, ValidationError

from .errors import ConfigError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


def parse_flat_config(text: str, source: str = "<config>") -> Dict[str, str]:
    """
    解析扁平配置文本

    空行与 # 开头的行被忽略；值两侧空白去除。

    Raises:
        ConfigError: 某行缺少 '=' 或键为空
    """
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source} 第 {lineno} 行缺少 '=': {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source} 第 {lineno} 行键为空")
        if key in values:
            logger.warning(f"{source} 第 {lineno} 行重复定义 {key}，以后者为准")
        values[key] = value
    return values


def read_flat_config(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"无法读取配置文件 {path}: {e}")
    values = parse_flat_config(text, source=str(path))
    logger.info(f"读取配置文件 {path}: {len(values)} 项")
    return values


def build_config(model_cls: Type[ModelT], **fields: Any) -> ModelT:
    """
    构建配置模型，校验失败统一转成 ConfigError

    Raises:
        ConfigError: 未知键或取值非法
    """
    try:
        return model_cls(**fields)
    except ValidationError as e:
        details = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"{model_cls.__name__} 配置非法: {details}")


def load_config(
    model_cls: Type[ModelT],
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ModelT:
    """
    默认值 < 配置文件 < 命令行覆盖（值为 None 的覆盖项忽略）
    """
    fields: Dict[str, Any] = {}
    if path is not None:
        fields.update(read_flat_config(path))
    if overrides:
        fields.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(model_cls, **fields)

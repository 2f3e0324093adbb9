"""
网络层模块
仿照 torch.nn 的 Module / Linear / LayerNorm / FeedForward，构建在 DiffTensor 之上
"""

import copy
import logging
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from .errors import ContractError, ShapeError
from .tensor_core import DiffTensor, Parameter, default_dtype, gelu, layer_norm

logger = logging.getLogger(__name__)


class Module:
    """参数容器基类：递归收集属性中的 Parameter / Module / Module 列表"""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for idx, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{idx}", item

    def named_parameters(self, prefix: str = "", _seen: Optional[set] = None) -> Iterator[Tuple[str, Parameter]]:
        """
        按属性定义顺序遍历参数

        同一参数对象被多处引用时只返回第一次出现的名字。
        """
        seen = set() if _seen is None else _seen
        for key, value in self._children():
            full_name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                if id(value) in seen:
                    continue
                seen.add(id(value))
                if value.name is None:
                    value.name = full_name
                yield full_name, value
            else:
                yield from value.named_parameters(prefix=f"{full_name}.", _seen=seen)

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(param.size for param in self.parameters()))

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {f"{prefix}{name}": param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
        """
        从数组字典恢复参数

        Raises:
            ContractError: strict 模式下缺少或多出参数
            ShapeError: 参数形状不一致
        """
        params = dict(self.named_parameters())
        expected = {f"{prefix}{name}" for name in params}
        provided = {name for name in state if name.startswith(prefix)}
        if strict and expected != provided:
            missing = sorted(expected - provided)
            unexpected = sorted(provided - expected)
            raise ContractError(f"参数不匹配: 缺少 {missing}，多余 {unexpected}")
        for name, param in params.items():
            key = f"{prefix}{name}"
            if key not in state:
                continue
            array = np.asarray(state[key])
            if array.shape != param.shape:
                raise ShapeError(f"参数 {key} 形状不一致: 期望 {param.shape}，实际 {array.shape}")
            param.data = array.astype(param.dtype, copy=True)

    def copy(self) -> "Module":
        """深拷贝（微调时保护原始权重）"""
        return copy.deepcopy(self)


def _init_array(array: np.ndarray) -> np.ndarray:
    return array.astype(default_dtype())


class Linear(Module):
    """y = x·Wᵀ + b，权重形状 (out, in)，Xavier 均匀初始化"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        limit = np.sqrt(6.0 / (in_features + out_features))
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(_init_array(rng.uniform(-limit, limit, size=(out_features, in_features))))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: DiffTensor) -> DiffTensor:
        out = x @ self.weight.mT
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: DiffTensor) -> DiffTensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"LayerNorm 维度不匹配: 输入 {x.shape}，期望最后一维 {self.weight.shape[0]}")
        return layer_norm(x, self.weight, self.bias, self.eps)


class FeedForward(Module):
    """fc1 → GELU(tanh) → fc2"""

    def __init__(self, dim: int, hidden_dim: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden_dim, rng)
        self.fc2 = Linear(hidden_dim, dim, rng)

    def forward(self, x: DiffTensor) -> DiffTensor:
        return self.fc2(gelu(self.fc1(x)))


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """N(0, std²) 初始化（位置编码、mask token 使用）"""
    return _init_array(rng.standard_normal(size=shape) * std)

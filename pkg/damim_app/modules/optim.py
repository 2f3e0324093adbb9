"""
优化器模块
AdamW 与 SGD(momentum)，支持 torch 风格的参数组（每组独立学习率）
"""

import logging
from typing import Dict, Iterable, List, Mapping, Sequence, Union

import numpy as np

from .errors import ConfigError, ContractError
from .tensor_core import Parameter

logger = logging.getLogger(__name__)

ParamGroups = Union[Iterable[Parameter], Sequence[Mapping]]


class Optimizer:
    """
    优化器基类

    状态（动量缓冲）按参数 id 存放，step_count 单调递增。
    step() 之后自动清空梯度。
    """

    kind = "base"

    def __init__(self, params: ParamGroups, defaults: Dict):
        self.defaults = dict(defaults)
        self.param_groups: List[Dict] = []
        self.state: Dict[int, Dict[str, np.ndarray]] = {}
        self.step_count = 0

        params = list(params)
        if not params:
            raise ConfigError("优化器参数列表为空")
        if isinstance(params[0], Mapping):
            for group in params:
                self.add_param_group(group)
        else:
            self.add_param_group({"params": params})

    def add_param_group(self, group: Mapping) -> None:
        entry = dict(self.defaults)
        entry.update(group)
        entry["params"] = list(group["params"])
        entry.setdefault("name", f"group{len(self.param_groups)}")
        if entry["lr"] <= 0:
            raise ConfigError(f"参数组 {entry['name']} 的学习率必须为正: {entry['lr']}")
        self.param_groups.append(entry)
        logger.debug(f"参数组 {entry['name']}: {len(entry['params'])} 个参数, lr={entry['lr']}")

    def parameters(self) -> List[Parameter]:
        return [p for group in self.param_groups for p in group["params"]]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def step(self) -> None:
        """
        按更新规则更新全部参数，然后清空梯度

        Raises:
            ContractError: 某个参数没有梯度
        """
        for group in self.param_groups:
            for idx, param in enumerate(group["params"]):
                if param.grad is None:
                    label = param.name or f"{group['name']}[{idx}]"
                    raise ContractError(f"参数 {label} 没有梯度，无法执行优化步")
        self.step_count += 1
        for group in self.param_groups:
            for param in group["params"]:
                self._update(param, group)
        self.zero_grad()

    def _update(self, param: Parameter, group: Dict) -> None:
        raise NotImplementedError

    def get_info(self) -> Dict[str, str]:
        return {
            "kind": self.kind,
            "step_count": str(self.step_count),
            "groups": ", ".join(f"{g['name']}(lr={g['lr']})" for g in self.param_groups),
        }


class SGD(Optimizer):
    """带动量的 SGD：buf = μ·buf + g（首步 buf = g），w -= lr·buf"""

    kind = "sgd_momentum"

    def __init__(self, params: ParamGroups, lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, {"lr": lr, "momentum": momentum, "weight_decay": weight_decay})

    def _update(self, param: Parameter, group: Dict) -> None:
        grad = param.grad
        if group["weight_decay"]:
            grad = grad + group["weight_decay"] * param.data
        state = self.state.setdefault(id(param), {})
        if "momentum_buffer" not in state:
            buf = np.array(grad, copy=True)
        else:
            buf = group["momentum"] * state["momentum_buffer"] + grad
        state["momentum_buffer"] = buf
        param.data = (param.data - group["lr"] * buf).astype(param.dtype)


class AdamW(Optimizer):
    """解耦权重衰减的 Adam"""

    kind = "adamw"

    def __init__(
        self,
        params: ParamGroups,
        lr: float = 1e-3,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        super().__init__(params, {"lr": lr, "betas": tuple(betas), "eps": eps, "weight_decay": weight_decay})

    def _update(self, param: Parameter, group: Dict) -> None:
        beta1, beta2 = group["betas"]
        state = self.state.setdefault(id(param), {})
        if "exp_avg" not in state:
            state["exp_avg"] = np.zeros_like(param.data)
            state["exp_avg_sq"] = np.zeros_like(param.data)
            state["step"] = 0
        state["step"] += 1
        t = state["step"]

        data = param.data
        if group["weight_decay"]:
            data = data * (1.0 - group["lr"] * group["weight_decay"])

        grad = param.grad
        state["exp_avg"] = beta1 * state["exp_avg"] + (1.0 - beta1) * grad
        state["exp_avg_sq"] = beta2 * state["exp_avg_sq"] + (1.0 - beta2) * grad * grad
        m_hat = state["exp_avg"] / (1.0 - beta1 ** t)
        v_hat = state["exp_avg_sq"] / (1.0 - beta2 ** t)
        param.data = (data - group["lr"] * m_hat / (np.sqrt(v_hat) + group["eps"])).astype(param.dtype)


def build_optimizer(kind: str, groups: Sequence[Mapping], **hyper) -> Optimizer:
    """
    按名称构建优化器

    Args:
        kind: 'adamw' 或 'sgd_momentum'
        groups: 参数组列表
        hyper: 其余超参数
    """
    if kind == "adamw":
        return AdamW(groups, **hyper)
    if kind == "sgd_momentum":
        return SGD(groups, **hyper)
    raise ConfigError(f"未知优化器类型: {kind}")

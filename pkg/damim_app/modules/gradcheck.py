"""
梯度检查模块
用中心差分验证每个可微算子的解析梯度（64 位模式）
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError
from .tensor_core import DiffTensor

logger = logging.getLogger(__name__)

# 相对误差阈值与绝对误差下限
RELATIVE_TOLERANCE = 1e-5
ABSOLUTE_FLOOR = 1e-8


@dataclass
class GradcheckResult:
    """单个算子的检查结果"""
    op: str
    points: int
    max_relative_error: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < RELATIVE_TOLERANCE


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABSOLUTE_FLOOR) -> np.ndarray:
    """
    逐元素相对误差；绝对误差低于 floor 的元素记为 0
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.where(diff < floor, 0.0, diff / scale)


def gradcheck(
    fn: Callable[..., DiffTensor],
    inputs: Sequence[DiffTensor],
    eps: float = 1e-6,
    seed: int = 0,
) -> float:
    """
    对 fn 的全部输入做中心差分检查

    非标量输出先与固定随机张量做内积化为标量。

    Args:
        fn: 以 DiffTensor 为输入的函数
        inputs: requires_grad 的 64 位输入
        eps: 差分步长
        seed: 投影张量的随机种子

    Returns:
        所有输入元素上的最大相对误差
    """
    rng = np.random.default_rng(seed)
    probe = fn(*inputs)
    projection = None if probe.ndim == 0 else rng.standard_normal(probe.shape)

    def scalar_value() -> DiffTensor:
        out = fn(*inputs)
        return out if projection is None else (out * projection).sum()

    for tensor in inputs:
        tensor.zero_grad()
    scalar_value().backward()

    worst = 0.0
    for tensor in inputs:
        if not tensor.requires_grad:
            continue
        analytic = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad
        numeric = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        with tc.no_grad():
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                plus = float(scalar_value().data)
                flat[i] = original - eps
                minus = float(scalar_value().data)
                flat[i] = original
                numeric.reshape(-1)[i] = (plus - minus) / (2.0 * eps)
        worst = max(worst, float(relative_errors(analytic, numeric).max(initial=0.0)))
    return worst


def _param(rng: np.random.Generator, shape, positive: bool = False) -> DiffTensor:
    values = rng.standard_normal(shape)
    if positive:
        values = np.abs(values) + 0.5
    return DiffTensor(values, requires_grad=True)


def _composite(rng):
    x = _param(rng, (3, 4))
    w = _param(rng, (4, 5))
    gamma = _param(rng, (5,))
    beta = _param(rng, (5,))
    target = DiffTensor(rng.standard_normal((3, 5)))

    def fn(x, w, gamma, beta):
        hidden = tc.gelu(tc.matmul(x, w))
        return tc.mse(tc.layer_norm(hidden, gamma, beta), target)

    return fn, [x, w, gamma, beta]


def _gather(rng):
    x = _param(rng, (2, 5, 3))
    index = np.array([[4, 0, 0], [1, 3, 2]])
    return (lambda x: tc.gather_rows(x, index)), [x]


def _cross_entropy(rng):
    logits = _param(rng, (4, 3))
    labels = np.array([0, 2, 1, 2])
    return (lambda z: tc.cross_entropy(z, labels)), [logits]


# 每个条目: 名称 -> 构造 (fn, inputs) 的工厂
OP_CASES: Dict[str, Callable] = {
    "add": lambda rng: (tc.add, [_param(rng, (3, 4)), _param(rng, (4,))]),
    "sub": lambda rng: (tc.sub, [_param(rng, (3, 4)), _param(rng, (3, 1))]),
    "mul": lambda rng: (tc.mul, [_param(rng, (2, 3)), _param(rng, (2, 3))]),
    "div": lambda rng: (tc.div, [_param(rng, (2, 3)), _param(rng, (2, 3), positive=True)]),
    "pow": lambda rng: ((lambda x: tc.power(x, 3.0)), [_param(rng, (2, 3))]),
    "exp": lambda rng: (tc.exp, [_param(rng, (2, 3))]),
    "log": lambda rng: (tc.log, [_param(rng, (2, 3), positive=True)]),
    "sqrt": lambda rng: (tc.sqrt, [_param(rng, (2, 3), positive=True)]),
    "tanh": lambda rng: (tc.tanh, [_param(rng, (2, 3))]),
    "gelu": lambda rng: (tc.gelu, [_param(rng, (3, 4))]),
    "matmul": lambda rng: (tc.matmul, [_param(rng, (3, 4)), _param(rng, (4, 2))]),
    "batched_matmul": lambda rng: (tc.matmul, [_param(rng, (2, 3, 4)), _param(rng, (4, 2))]),
    "sum": lambda rng: ((lambda x: tc.tensor_sum(x, axis=1)), [_param(rng, (2, 3, 4))]),
    "mean": lambda rng: ((lambda x: tc.tensor_mean(x, axis=-1, keepdims=True)), [_param(rng, (2, 3, 4))]),
    "reshape": lambda rng: ((lambda x: tc.reshape(x, (4, 3))), [_param(rng, (2, 6))]),
    "transpose": lambda rng: ((lambda x: tc.transpose(x, (2, 0, 1))), [_param(rng, (2, 3, 4))]),
    "getitem": lambda rng: ((lambda x: x[1:, ::2]), [_param(rng, (3, 4))]),
    "concat": lambda rng: ((lambda a, b: tc.concat([a, b], axis=1)), [_param(rng, (2, 2)), _param(rng, (2, 3))]),
    "gather_rows": _gather,
    "softmax_rows": lambda rng: (tc.softmax, [_param(rng, (2, 3))]),
    "log_softmax": lambda rng: (tc.log_softmax, [_param(rng, (2, 3))]),
    "cross_entropy": _cross_entropy,
    "layer_norm": lambda rng: (tc.layer_norm, [_param(rng, (3, 5)), _param(rng, (5,)), _param(rng, (5,))]),
    "mse": lambda rng: (tc.mse, [_param(rng, (3, 4)), _param(rng, (3, 4))]),
    "row_norm": lambda rng: (tc.row_norm, [_param(rng, (3, 4))]),
    "cosine_similarity_matrix": lambda rng: (tc.cosine_similarity_matrix, [_param(rng, (4, 3))]),
    "composite": _composite,
}


def run_gradcheck_suite(seed: int = 1, points: int = 3, ops: Sequence[str] = ()) -> List[GradcheckResult]:
    """
    在 64 位模式下对每个算子的若干随机点做梯度检查

    Args:
        seed: 随机种子
        points: 每个算子的随机点数
        ops: 仅检查指定算子，空则全部

    Returns:
        每个算子的 GradcheckResult
    """
    names = list(ops) or list(OP_CASES)
    unknown = [name for name in names if name not in OP_CASES]
    if unknown:
        raise ConfigError(f"未知算子: {unknown}，可选: {sorted(OP_CASES)}")
    order = list(OP_CASES)
    results = []
    with tc.precision(np.float64):
        for name in names:
            worst = 0.0
            for point in range(points):
                rng = np.random.default_rng([seed, point, order.index(name)])
                fn, inputs = OP_CASES[name](rng)
                worst = max(worst, gradcheck(fn, inputs, seed=seed + point))
            result = GradcheckResult(op=name, points=points, max_relative_error=worst)
            status = "✅" if result.passed else "❌"
            logger.info(f"{status} {name}: 最大相对误差 {worst:.3e}")
            results.append(result)
    return results

"""
可微张量核心模块
基于 numpy 的最小反向模式自动微分引擎：DiffTensor、算子集合、no_grad 与精度切换
"""

import logging
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, NumericError, ShapeError

logger = logging.getLogger(__name__)

# 训练默认 32 位；梯度测试切换到 64 位
_DEFAULT_DTYPE = np.float32
_grad_mode = threading.local()

# tanh 近似 GELU 的常数
GELU_COEF = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


def set_default_dtype(dtype) -> None:
    """
    设置新建张量的默认精度

    Args:
        dtype: np.float32 或 np.float64
    """
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"仅支持 float32 / float64 精度，收到: {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    """返回当前默认精度"""
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype) -> Iterator[None]:
    """临时切换默认精度（梯度检查使用 64 位模式）"""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    """当前线程是否记录计算图"""
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """
    关闭当前线程的计算图记录

    冻结权重的推理可以在多个线程中并发执行，每个线程的开关互不影响。
    """
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和还原到原始形状"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class DiffTensor:
    """
    参与反向模式求导的 n 维数组

    data 为 numpy 数组，grad 在 backward() 之后与 data 同形状。
    梯度默认累加，需要显式调用 zero_grad() 清零。
    """

    # 让 numpy 数组与 DiffTensor 混合运算时回落到本类的反射运算符
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["DiffTensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None

    # ------------------------------------------------------------------
    # 基本属性
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def mT(self) -> "DiffTensor":
        return swapaxes(self, -1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        """
        Raises:
            ShapeError: 张量不是单元素
        """
        if self.data.size != 1:
            raise ShapeError(f"item() 需要单元素张量，实际形状 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "DiffTensor":
        """返回阻断梯度的副本"""
        return _constant(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        return f"DiffTensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # ------------------------------------------------------------------
    # 运算符
    # ------------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "DiffTensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "DiffTensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "DiffTensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "DiffTensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "DiffTensor":
        return exp(self)

    def log(self) -> "DiffTensor":
        return log(self)

    def sqrt(self) -> "DiffTensor":
        return sqrt(self)

    def tanh(self) -> "DiffTensor":
        return tanh(self)

    # ------------------------------------------------------------------
    # 反向传播
    # ------------------------------------------------------------------
    def backward(self) -> None:
        """
        从标量损失出发做反向传播

        所有可达且 requires_grad 的叶子张量都会得到 grad；
        未清零时重复调用会累加梯度。

        Raises:
            ContractError: 损失不是标量或不在计算图中
        """
        if self.data.ndim != 0:
            raise ContractError(f"backward 只接受标量损失，收到形状 {self.shape}")
        if not self.requires_grad:
            raise ContractError("损失不依赖任何 requires_grad 张量，无法反向传播")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                grad = np.asarray(grad, dtype=node.data.dtype)
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad


class Parameter(DiffTensor):
    """可训练参数（默认 requires_grad=True 的叶子张量）"""

    def __init__(self, data, name: Optional[str] = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name}, shape={self.shape}, dtype={self.dtype})"


TensorLike = Union[DiffTensor, np.ndarray, float, int, Sequence]


def _topological_order(root: DiffTensor) -> list:
    """迭代式后序遍历，避免深图的递归深度限制"""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _constant(data: np.ndarray) -> DiffTensor:
    out = DiffTensor.__new__(DiffTensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    return out


def _result(data, parents: Tuple[DiffTensor, ...], backward) -> DiffTensor:
    out = _constant(np.asarray(data))
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(value: TensorLike, like: Optional[DiffTensor] = None) -> DiffTensor:
    """把数组或标量包装成常量张量，精度跟随 like"""
    if isinstance(value, DiffTensor):
        return value
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return _constant(np.asarray(value, dtype=dtype))


def _pair(a: TensorLike, b: TensorLike) -> Tuple[DiffTensor, DiffTensor]:
    if isinstance(a, DiffTensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ----------------------------------------------------------------------
# 逐元素算子
# ----------------------------------------------------------------------
def add(a: TensorLike, b: TensorLike) -> DiffTensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a: TensorLike, b: TensorLike) -> DiffTensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a: TensorLike, b: TensorLike) -> DiffTensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def div(a: TensorLike, b: TensorLike) -> DiffTensor:
    a, b = _pair(a, b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), backward)


def neg(x: DiffTensor) -> DiffTensor:
    return _result(-x.data, (x,), lambda g: (-g,))


def power(x: DiffTensor, exponent: float) -> DiffTensor:
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * np.power(x.data, exponent - 1.0),)

    return _result(np.power(x.data, exponent), (x,), backward)


def exp(x: DiffTensor) -> DiffTensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: DiffTensor) -> DiffTensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: DiffTensor) -> DiffTensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x: DiffTensor) -> DiffTensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def gelu(x: DiffTensor) -> DiffTensor:
    """tanh 近似 GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))"""
    data = x.data
    inner = GELU_COEF * (data + GELU_CUBIC * data ** 3)
    t = np.tanh(inner)
    out = 0.5 * data * (1.0 + t)

    def backward(g):
        d_inner = GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * data * data)
        local = 0.5 * (1.0 + t) + 0.5 * data * (1.0 - t * t) * d_inner
        return (g * local,)

    return _result(out, (x,), backward)


# ----------------------------------------------------------------------
# 矩阵与形状算子
# ----------------------------------------------------------------------
def matmul(a: TensorLike, b: TensorLike) -> DiffTensor:
    """
    (批量)矩阵乘法

    Raises:
        ShapeError: 内维不一致或维数不足 2
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul 维度不匹配: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), backward)


def _normalize_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(sorted(a % ndim for a in axis))


def tensor_sum(x: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    axes = _normalize_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _result(out, (x,), backward)


def tensor_mean(x: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    axes = _normalize_axis(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return tensor_sum(x, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(x: DiffTensor, shape) -> DiffTensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: DiffTensor, axes=None) -> DiffTensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: DiffTensor, axis1: int, axis2: int) -> DiffTensor:
    axes = list(range(x.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(x, axes)


def getitem(x: DiffTensor, index) -> DiffTensor:
    """索引/切片，反向用 np.add.at 处理重复索引"""

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward)


def concat(tensors: Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    tensors = [as_tensor(t) for t in tensors]
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def gather_rows(x: DiffTensor, index: np.ndarray) -> DiffTensor:
    """
    按样本收集 token: x[b, index[b, k], :]

    Args:
        x: 形状 B×N×d
        index: 形状 B×K 的整数索引

    Returns:
        形状 B×K×d 的张量

    Raises:
        ShapeError: 形状不符或索引越界
    """
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows 形状不匹配: x={x.shape}, index={index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise ShapeError(f"gather_rows 索引越界: 范围 [0, {x.shape[1]})，实际 [{index.min()}, {index.max()}]")
    batch = np.arange(x.shape[0])[:, None]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (batch, index), g)
        return (full,)

    return _result(x.data[batch, index], (x,), backward)


# ----------------------------------------------------------------------
# 归一化、softmax 与损失
# ----------------------------------------------------------------------
def softmax(x: DiffTensor, axis: int = -1) -> DiffTensor:
    """
    数值稳定的 softmax（减去行最大值）

    Raises:
        NumericError: 输入包含 NaN
    """
    if np.isnan(x.data).any():
        raise NumericError("softmax 输入包含 NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def log_softmax(x: DiffTensor, axis: int = -1) -> DiffTensor:
    if np.isnan(x.data).any():
        raise NumericError("log_softmax 输入包含 NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward)


def cross_entropy(logits: DiffTensor, labels: np.ndarray) -> DiffTensor:
    """多分类交叉熵（按样本取平均）"""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy 形状不匹配: logits={logits.shape}, labels={labels.shape}")
    picked = log_softmax(logits, axis=-1)[np.arange(logits.shape[0]), labels]
    return -tensor_mean(picked)


def layer_norm(
    x: DiffTensor,
    weight: Optional[DiffTensor] = None,
    bias: Optional[DiffTensor] = None,
    eps: float = 1e-5,
) -> DiffTensor:
    """沿最后一维做层归一化，可选仿射变换"""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat
    parents = [x]
    if weight is not None:
        out = out * weight.data
        parents.append(weight)
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * weight.data if weight is not None else g
        gx = rstd * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _result(out, tuple(parents), backward)


def mse(a: TensorLike, b: TensorLike) -> DiffTensor:
    """逐元素平方误差的均值（标量）"""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse 形状不匹配: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    scale = 2.0 / max(diff.size, 1)

    def backward(g):
        local = g * scale * diff
        return local, -local

    return _result(np.mean(diff * diff), (a, b), backward)


def row_norm(x: DiffTensor) -> DiffTensor:
    """最后一维的 L2 范数（keepdims），零向量处梯度取 0"""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))

    def backward(g):
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm > 0, g * x.data / safe, 0.0),)

    return _result(norm, (x,), backward)


def cosine_similarity_matrix(tokens: DiffTensor, eps: float = 1e-8) -> DiffTensor:
    """
    token 两两余弦相似度: S_ij = t_i·t_j / ((‖t_i‖+ε)(‖t_j‖+ε))

    Args:
        tokens: 形状 (..., N, d)

    Returns:
        形状 (..., N, N) 的对称矩阵
    """
    unit = tokens / (row_norm(tokens) + eps)
    return matmul(unit, swapaxes(unit, -1, -2))


def zeros(shape, requires_grad: bool = False) -> DiffTensor:
    return DiffTensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> DiffTensor:
    return DiffTensor(np.ones(shape), requires_grad=requires_grad)


def check_finite(value: DiffTensor, what: str) -> None:
    """NaN/Inf 检查"""
    if not np.all(np.isfinite(value.data)):
        raise NumericError(f"{what} 出现非有限数值")

#!/usr/bin/env python3
"""
最小反向模式自动微分层
基于 numpy 的 Tensor + 线程私有的计算带（tape），提供网络、MPSM 与损失所需的全部算子。
所有计算使用 float64，特征图布局为 NHWC。
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.errors import DimensionError, UsageError

logger = logging.getLogger(__name__)

DTYPE = np.float64
NORM_EPS = 1e-8

_state = threading.local()


class ComputationTape:
    """按执行顺序记录算子输出，backward 时严格逆序遍历"""

    def __init__(self):
        self.nodes: List["Tensor"] = []

    def record(self, node: "Tensor"):
        node._tape_pos = len(self.nodes)
        self.nodes.append(node)

    def contains(self, node: "Tensor") -> bool:
        pos = node._tape_pos
        return pos is not None and pos < len(self.nodes) and self.nodes[pos] is node

    def clear(self):
        for node in self.nodes:
            node._tape_pos = None
            node._parents = ()
            node._backward = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


def get_tape() -> ComputationTape:
    """当前线程的计算带"""
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = ComputationTape()
        _state.tape = tape
    return tape


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """关闭记录，用于评估与有限差分"""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """带梯度累加器的张量"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._op = ""
        self._tape_pos: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        get_tape().record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回原形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(tensor: Tensor, grad: np.ndarray):
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=DTYPE, copy=True)
    else:
        tensor.grad = tensor.grad + grad


def backward(loss: Tensor):
    """
    从标量损失反向传播，梯度累加到所有 requires_grad 的张量上，结束后清空计算带

    Raises:
        UsageError: 损失不是标量，或不在当前计算带上
    """
    if loss.size != 1:
        raise UsageError(f"backward 需要标量损失，实际形状 {loss.shape}")
    tape = get_tape()
    if not loss.requires_grad or not tape.contains(loss):
        raise UsageError("损失没有连接到当前计算带")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes[: loss._tape_pos + 1]):
        if node.grad is None or node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, grad in zip(node._parents, grads):
            if grad is None or not parent.requires_grad:
                continue
            _accumulate(parent, grad)
    tape.clear()


# ---------------------------------------------------------------------------
# 逐元素算子
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), _backward, "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), _backward, "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), _backward, "mul")


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def _backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out_data / b.data, b.shape)
        return ga, gb

    return _make(out_data, (a, b), _backward, "div")


def power(a: TensorLike, exponent: float) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data ** exponent, (a,), _backward, "pow")


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def _backward(g):
        return (g * 0.5 / out_data,)

    return _make(out_data, (a,), _backward, "sqrt")


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def _backward(g):
        return (g * out_data,)

    return _make(out_data, (a,), _backward, "exp")


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), _backward, "log")


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    active = a.data > 0

    def _backward(g):
        return (g * active,)

    return _make(np.where(active, a.data, 0.0), (a,), _backward, "relu")


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # 分段计算避免 exp 溢出
    z = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def _backward(g):
        return (g * out_data * (1.0 - out_data),)

    return _make(out_data, (a,), _backward, "sigmoid")


def clip(a: TensorLike, low: float, high: float) -> Tensor:
    """截断到 [low, high]，区间外梯度为 0，边界上保留梯度"""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)

    def _backward(g):
        return (g * inside,)

    return _make(np.clip(a.data, low, high), (a,), _backward, "clip")


# ---------------------------------------------------------------------------
# 归约与形状算子
# ---------------------------------------------------------------------------

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), _backward, "sum")


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), _backward, "mean")


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), _backward, "reshape")


def flatten(a: TensorLike) -> Tensor:
    """保留批维，其余展平"""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def transpose(a: TensorLike, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)

    def _backward(g):
        return (g.transpose(inverse),)

    return _make(a.data.transpose(axes), (a,), _backward, "transpose")


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat 至少需要一个张量")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise DimensionError(f"concat 形状不匹配: {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward, "concat")


def split(a: TensorLike, widths: Sequence[int], axis: int = -1) -> List[Tensor]:
    """按给定宽度切分（默认通道维）"""
    a = as_tensor(a)
    axis = axis % a.ndim
    if sum(widths) != a.shape[axis]:
        raise DimensionError(f"split 宽度之和 {sum(widths)} 与维度 {a.shape[axis]} 不一致")
    outputs = []
    start = 0
    for width in widths:
        index = np.arange(start, start + width)

        def _backward(g, index=index):
            full = np.zeros(a.shape, dtype=DTYPE)
            slicer = [slice(None)] * a.ndim
            slicer[axis] = slice(index[0], index[-1] + 1)
            full[tuple(slicer)] = g
            return (full,)

        outputs.append(_make(np.take(a.data, index, axis=axis), (a,), _backward, "split"))
        start += width
    return outputs


def pad(a: TensorLike, pad_width: Sequence[Tuple[int, int]]) -> Tensor:
    """常数 0 填充"""
    a = as_tensor(a)
    slicer = tuple(slice(before, before + extent) for (before, _), extent in zip(pad_width, a.shape))

    def _backward(g):
        return (g[slicer],)

    return _make(np.pad(a.data, pad_width), (a,), _backward, "pad")


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul 形状不匹配: {a.shape} @ {b.shape}")

    def _backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), _backward, "matmul")


def dense(x: TensorLike, weight: TensorLike, bias: Optional[TensorLike] = None) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense 形状不匹配: {x.shape} x {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def l2_norm(a: TensorLike, axis=None, keepdims: bool = False, eps: float = NORM_EPS) -> Tensor:
    """L2/Frobenius 范数，梯度分母以 eps 为下限"""
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    norm = np.sqrt((a.data ** 2).sum(axis=axes, keepdims=True))

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * a.data / np.maximum(norm, eps),)

    out_data = norm if keepdims else np.squeeze(norm, axis=axes)
    return _make(out_data, (a,), _backward, "l2_norm")


# ---------------------------------------------------------------------------
# 卷积网络算子（NHWC）
# ---------------------------------------------------------------------------

def conv2d(x: TensorLike, kernel: TensorLike, bias: Optional[TensorLike] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    标准互相关卷积

    Args:
        x: (N, H, W, Cin)
        kernel: (kh, kw, Cin, Cout)
        bias: (Cout,) 或 None

    Returns:
        (N, Ho, Wo, Cout)，Ho = floor((H + 2p - kh) / stride) + 1
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d 需要 4 维输入与卷积核: {x.shape}, {kernel.shape}")
    if x.shape[3] != kernel.shape[2]:
        raise DimensionError(f"conv2d 输入通道 {x.shape[3]} 与卷积核 {kernel.shape[2]} 不一致")
    kh, kw, _, cout = kernel.shape
    n, h, w, _ = x.shape
    p = padding
    padded = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    if kh > padded.shape[1] or kw > padded.shape[2]:
        raise DimensionError(f"卷积核 {kh}x{kw} 超过填充后输入 {padded.shape[1]}x{padded.shape[2]}")

    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = windows.shape[1], windows.shape[2]
    out_data = np.tensordot(windows, kernel.data.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data
        parents.append(bias)

    def _backward(g):
        g_kernel = np.tensordot(windows, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        g_padded = np.zeros(padded.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                g_padded[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += \
                    g @ kernel.data[i, j].T
        g_x = g_padded[:, p:p + h, p:p + w, :]
        grads = [g_x, g_kernel]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return _make(out_data, parents, _backward, "conv2d")


def batchnorm(x: TensorLike, gamma: TensorLike, beta: TensorLike,
              running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """
    按通道（最后一维）批归一化。训练模式使用批统计并原地更新 running_mean/running_var，
    评估模式只读 running 统计。
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(f"batchnorm 参数形状应为 ({channels},)")
    axes = tuple(range(x.ndim - 1))
    count = x.size // channels

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased
    else:
        mu = running_mean.copy()
        var = running_var.copy()

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu) * inv_std
    out_data = gamma.data * x_hat + beta.data

    def _backward(g):
        g_gamma = (g * x_hat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        d_hat = g * gamma.data
        if training:
            g_x = inv_std / count * (count * d_hat - d_hat.sum(axis=axes) - x_hat * (d_hat * x_hat).sum(axis=axes))
        else:
            g_x = d_hat * inv_std
        return g_x, g_gamma, g_beta

    return _make(out_data, (x, gamma, beta), _backward, "batchnorm")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """一维双线性插值矩阵（像素中心对齐，边界截断）"""
    out_idx = np.arange(n_out, dtype=DTYPE)
    src = np.clip((out_idx + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
    lower = np.floor(src).astype(int)
    upper = np.minimum(lower + 1, n_in - 1)
    frac = src - lower
    matrix = np.zeros((n_out, n_in), dtype=DTYPE)
    np.add.at(matrix, (np.arange(n_out), lower), 1.0 - frac)
    np.add.at(matrix, (np.arange(n_out), upper), frac)
    return matrix


def resize_bilinear(x: TensorLike, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or min(x.shape[1:3]) < 1 or out_h < 1 or out_w < 1:
        raise DimensionError(f"resize_bilinear 输入非法: {x.shape} -> {out_h}x{out_w}")
    rows = bilinear_matrix(x.shape[1], out_h)
    cols = bilinear_matrix(x.shape[2], out_w)
    out_data = np.einsum("oh,nhwc,pw->nopc", rows, x.data, cols, optimize=True)

    def _backward(g):
        return (np.einsum("oh,nopc,pw->nhwc", rows, g, cols, optimize=True),)

    return _make(out_data, (x,), _backward, "resize_bilinear")


def avg_pool2x2(x: TensorLike) -> Tensor:
    """2x2 平均池化，步长 2，奇数边向下取整"""
    x = as_tensor(x)
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise DimensionError(f"avg_pool2x2 输入过小: {x.shape}")
    cropped = x.data[:, :2 * h2, :2 * w2, :]
    out_data = cropped.reshape(n, h2, 2, w2, 2, c).mean(axis=(2, 4))

    def _backward(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[:, :2 * h2, :2 * w2, :] = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
        return (full,)

    return _make(out_data, (x,), _backward, "avg_pool2x2")


def global_pool(x: TensorLike) -> Tensor:
    """全局平均池化 (N, H, W, C) -> (N, C)"""
    return mean(x, axis=(1, 2))


# ---------------------------------------------------------------------------
# 梯度检查
# ---------------------------------------------------------------------------

def numerical_gradient_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], probes: int = 20,
                             h: float = 1e-4, seed: int = 0, floor: float = 1e-3) -> float:
    """
    中心差分检查：随机抽取 probes 个元素，返回最大相对误差
    相对误差分母为 max(|解析|, |数值|, floor)
    """
    for tensor in tensors:
        tensor.grad = None
    loss = fn()
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for _ in range(probes):
            which = int(rng.integers(len(tensors)))
            tensor = tensors[which]
            index = np.unravel_index(int(rng.integers(tensor.size)), tensor.shape)
            original = tensor.data[index]
            tensor.data[index] = original + h
            plus = fn().item()
            tensor.data[index] = original - h
            minus = fn().item()
            tensor.data[index] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = analytic[which][index]
            err = abs(numeric - exact) / max(abs(numeric), abs(exact), floor)
            worst = max(worst, err)
    logger.debug(f"梯度检查完成: {probes} 个探针, 最大相对误差 {worst:.3e}")
    return worst

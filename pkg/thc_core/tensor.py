"""
张量与反向模式自动微分

模型的全部数学运算都基于这里的 Tensor：float64 稠密数组，构造后只读，
只有梯度累加器可写。在 Tape 上下文中执行的运算会被记录下来，backward
按记录的逆序访问每个节点一次。

    with Tape():
        loss = sum_all(softmax_rows(matmul(x, w)))
        grads = backward(loss, [w])
"""
import itertools
import logging
import threading
import weakref
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from thc_core.exceptions import ContractError, DimensionError, NumericDomainError

logger = logging.getLogger(__name__)

_local = threading.local()


def _tape_stack() -> List['Tape']:
    if not hasattr(_local, 'stack'):
        _local.stack = []
    return _local.stack


def current_tape() -> Optional['Tape']:
    """当前线程上活动的 Tape"""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """稠密 float64 张量"""

    # 让 ndarray 与 Tensor 混合运算时走 Tensor 的反向运算符
    __array_priority__ = 1000

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(values, dtype=np.float64)
        array.setflags(write=False)
        self.values = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_id: Optional[int] = None
        self.name = name

    @classmethod
    def _from_array(cls, array: np.ndarray) -> 'Tensor':
        """包装运算结果，不复制数据"""
        tensor = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        array.setflags(write=False)
        tensor.values = array
        tensor.requires_grad = False
        tensor.grad = None
        tensor.tape_id = None
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def T(self) -> 'Tensor':
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() 只适用于标量，实际形状 {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def accumulate_grad(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError(f"梯度形状 {grad.shape} 与张量形状 {self.shape} 不一致")
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ''
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]
GradientFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeNode:
    """一条原语运算记录"""
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: GradientFn


class Tape:
    """一次前向计算的运算记录，backward 之后释放"""

    _ids = itertools.count(1)
    _registry: 'weakref.WeakValueDictionary[int, Tape]' = weakref.WeakValueDictionary()
    _lock = threading.Lock()

    def __init__(self):
        with Tape._lock:
            self.tape_id = next(Tape._ids)
            Tape._registry[self.tape_id] = self
        self.nodes: List[TapeNode] = []
        self.released = False

    def __enter__(self) -> 'Tape':
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    @classmethod
    def lookup(cls, tape_id: Optional[int]) -> Optional['Tape']:
        if tape_id is None:
            return None
        with cls._lock:
            return cls._registry.get(tape_id)

    def record(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], backward_fn: GradientFn) -> None:
        if self.released:
            raise ContractError(f"Tape {self.tape_id} 已释放，不能继续记录")
        output.tape_id = self.tape_id
        self.nodes.append(TapeNode(op, output, inputs, backward_fn))

    def release(self) -> None:
        self.nodes = []
        self.released = True


def _wrap(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(op: str, values: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: GradientFn) -> Tensor:
    out = Tensor._from_array(values)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, out, inputs, backward_fn)
    return out


def _strip_leading_ones(shape: Tuple[int, ...]) -> Tuple[int, ...]:
    index = 0
    while index < len(shape) and shape[index] == 1:
        index += 1
    return tuple(shape[index:])


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    """只支持标量和尾部维度一致的向量广播"""
    if a == b:
        return a
    for big, small in ((a, b), (b, a)):
        if len(small) > len(big):
            continue
        core = _strip_leading_ones(small)
        if not core or tuple(big[len(big) - len(core):]) == core:
            return big
    raise DimensionError(f"形状 {a} 与 {b} 无法广播")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _first_index(mask: np.ndarray) -> Tuple[int, ...]:
    return tuple(int(i) for i in np.argwhere(mask)[0])


def _require_finite(a: Tensor, op: str) -> None:
    finite = np.isfinite(a.values)
    if not finite.all():
        raise NumericDomainError(f"{op} 的输入在位置 {_first_index(~finite)} 处非有限")


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """矩阵乘法 [m×n]·[n×p]"""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul 形状不匹配: {a.shape} 与 {b.shape}")
    av, bv = a.values, b.values
    return _result('matmul', av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: TensorLike) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose 需要二维张量，实际形状 {a.shape}")
    return _result('transpose', a.values.T, (a,), lambda g: (g.T,))


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    try:
        values = a.values.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"无法把形状 {a.shape} 变换为 {tuple(shape)}") from e
    original = a.shape
    return _result('reshape', values, (a,), lambda g: (g.reshape(original),))


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape)
    return _result('add', a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape)
    return _result('sub', a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.values, b.values
    return _result('mul', av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.values, b.values
    zero = bv == 0
    if zero.any():
        raise NumericDomainError(f"除数在位置 {_first_index(zero)} 处为零")
    return _result('div', av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def neg(a: TensorLike) -> Tensor:
    a = _wrap(a)
    return _result('neg', -a.values, (a,), lambda g: (-g,))


def scale(a: TensorLike, factor: float) -> Tensor:
    a = _wrap(a)
    factor = float(factor)
    return _result('scale', a.values * factor, (a,), lambda g: (g * factor,))


def exp(a: TensorLike) -> Tensor:
    a = _wrap(a)
    _require_finite(a, 'exp')
    out = np.exp(a.values)
    if not np.isfinite(out).all():
        raise NumericDomainError(f"exp 在位置 {_first_index(~np.isfinite(out))} 处溢出")
    return _result('exp', out, (a,), lambda g: (g * out,))


def log(a: TensorLike) -> Tensor:
    a = _wrap(a)
    av = a.values
    bad = ~(av > 0)
    if bad.any():
        raise NumericDomainError(f"log 的输入在位置 {_first_index(bad)} 处非正: {av[_first_index(bad)]}")
    return _result('log', np.log(av), (a,), lambda g: (g / av,))


def tanh(a: TensorLike) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.values)
    return _result('tanh', out, (a,), lambda g: (g * (1.0 - out * out),))


def clamp(a: TensorLike, low: float, high: float) -> Tensor:
    """截断到 [low, high]，区间外梯度为零"""
    a = _wrap(a)
    av = a.values
    inside = (av >= low) & (av <= high)
    return _result('clamp', np.clip(av, low, high), (a,), lambda g: (g * inside,))


def sum_all(a: TensorLike) -> Tensor:
    a = _wrap(a)
    shape = a.shape
    return _result('sum', np.asarray(a.values.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean_all(a: TensorLike) -> Tensor:
    a = _wrap(a)
    return div(sum_all(a), float(a.size))


def average(tensors: Sequence[Tensor]) -> Tensor:
    """逐个相加后除以个数"""
    if not tensors:
        raise ContractError("average 至少需要一个张量")
    total = tensors[0]
    for tensor in tensors[1:]:
        total = add(total, tensor)
    return div(total, float(len(tensors)))


def softmax_rows(a: TensorLike) -> Tensor:
    """逐行 softmax，先减去每行最大值保证数值稳定"""
    a = _wrap(a)
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows 需要二维张量，实际形状 {a.shape}")
    _require_finite(a, 'softmax_rows')
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result('softmax_rows', out, (a,), grad_fn)


def log_softmax_rows(a: TensorLike) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise DimensionError(f"log_softmax_rows 需要二维张量，实际形状 {a.shape}")
    _require_finite(a, 'log_softmax_rows')
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return _result('log_softmax_rows', out, (a,),
                   lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """反向传播

    Args:
        loss: 标量损失，必须在某个 Tape 上产生
        params: 需要返回梯度的参数；未给出时返回所有可达叶子张量

    Returns:
        参数到本次梯度的映射，不可达参数得到全零梯度。叶子张量的 grad 同时被累加。

    Raises:
        ContractError: 损失不是标量或没有连接到 Tape
    """
    if loss.size != 1:
        raise ContractError(f"backward 需要标量损失，实际形状 {loss.shape}")
    tape = Tape.lookup(loss.tape_id)
    if tape is None or tape.released:
        raise ContractError("损失没有连接到可用的 Tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: Dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            grad = _unbroadcast(np.asarray(grad, dtype=np.float64), tensor.shape)
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad
            if tensor.tape_id != tape.tape_id:
                leaves[key] = tensor

    for key, tensor in leaves.items():
        tensor.accumulate_grad(grads[key])
    tape.release()

    if params is None:
        return {tensor: grads[key] for key, tensor in leaves.items()}
    return {p: grads[id(p)] if id(p) in leaves else np.zeros(p.shape) for p in params}


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """中心差分梯度，fn 接收与 x 同形状的数组并返回标量"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        original = x[index]
        x[index] = original + eps
        upper = fn(x.copy())
        x[index] = original - eps
        lower = fn(x.copy())
        x[index] = original
        grad[index] = (upper - lower) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """最大相对误差，分母加下限避免零梯度处失真"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale_ = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale_)) if analytic.size else 0.0

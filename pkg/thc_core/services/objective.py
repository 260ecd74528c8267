"""
THC 训练目标：交叉熵 + 稀疏正则 + 逐元素熵正则
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Union

import numpy as np

from thc_core.exceptions import ConfigError, ContractError
from thc_core.services.thc_model import ForwardTrace
from thc_core.tensor import (
    Tensor, add, average, clamp, log, log_softmax_rows, mean_all, mul, neg, reshape, scale, sub, sum_all,
)

logger = logging.getLogger(__name__)

ENTROPY_EPS = 1e-12
ENTROPY_FORMS = ('binary', 'literal')

TensorStack = Union[Tensor, Sequence[Tensor]]


@dataclass(frozen=True)
class LossWeights:
    sparsity: float = 1.0
    entropy: float = 1.0
    entropy_form: str = 'binary'

    def __post_init__(self):
        if self.entropy_form not in ENTROPY_FORMS:
            raise ConfigError(f"未知的熵损失形式: {self.entropy_form}，可选 {ENTROPY_FORMS}")


@dataclass
class LossBreakdown:
    """损失分解，total 严格等于 ce + λ_sps·sparsity + λ_ent·entropy"""
    ce: Tensor
    sparsity: Tensor
    entropy: Tensor
    total: Tensor
    weights: LossWeights

    def as_dict(self) -> Dict[str, float]:
        return {
            'ce': self.ce.item(),
            'sparsity': self.sparsity.item(),
            'entropy': self.entropy.item(),
            'total': self.total.item(),
        }


def _as_list(stack: TensorStack) -> list:
    return [stack] if isinstance(stack, Tensor) else list(stack)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """−log softmax(logits)[label]，在对数空间计算"""
    row = reshape(logits, (1, logits.size))
    n_classes = logits.size
    if isinstance(label, bool) or int(label) != label or not 0 <= int(label) < n_classes:
        raise ContractError(f"标签 {label} 不在 [0, {n_classes}) 内")
    one_hot = np.zeros((1, n_classes))
    one_hot[0, int(label)] = 1.0
    return neg(sum_all(mul(log_softmax_rows(row), one_hot)))


def sparsity_loss(assignments: TensorStack) -> Tensor:
    """Σ_{i,j} A_ij，层次模型对所有层求和"""
    layers = _as_list(assignments)
    if not layers:
        return Tensor(0.0)
    total = sum_all(layers[0])
    for a in layers[1:]:
        total = add(total, sum_all(a))
    return total


def _binary_entropy(a: Tensor, first: Optional[Tensor] = None) -> Tensor:
    log_a = log(clamp(a, ENTROPY_EPS, 1.0))
    log_not_a = log(clamp(sub(1.0, a), ENTROPY_EPS, 1.0))
    lead = a if first is None else first
    return neg(mean_all(add(mul(lead, log_a), mul(sub(1.0, a), log_not_a))))


def entropy_loss(assignments: TensorStack, form: str = 'binary',
                 logits: Optional[TensorStack] = None) -> Tensor:
    """逐元素熵 −(A·log A + (1−A)·log(1−A)) 的均值，多层时对各层均值求和

    Args:
        assignments: A^i 或各层 A^i 列表
        form: 'binary' 使用 A·log A；'literal' 第一项改用分配 logits Z^i
        logits: literal 形式需要的 Z^i，与 assignments 一一对应
    """
    if form not in ENTROPY_FORMS:
        raise ConfigError(f"未知的熵损失形式: {form}")
    layers = _as_list(assignments)
    if not layers:
        return Tensor(0.0)
    if form == 'literal':
        if logits is None:
            raise ContractError("literal 熵损失需要分配 logits")
        leads = _as_list(logits)
        if len(leads) != len(layers):
            raise ContractError("分配 logits 与分配矩阵层数不一致")
    else:
        leads = [None] * len(layers)
    total = _binary_entropy(layers[0], leads[0])
    for a, lead in zip(layers[1:], leads[1:]):
        total = add(total, _binary_entropy(a, lead))
    return total


def _compose(ce: Tensor, assignments: list, assignment_logits: list, weights: LossWeights) -> LossBreakdown:
    sparsity = sparsity_loss(assignments)
    entropy = entropy_loss(assignments, weights.entropy_form, assignment_logits)
    total = add(add(ce, scale(sparsity, weights.sparsity)), scale(entropy, weights.entropy))
    return LossBreakdown(ce=ce, sparsity=sparsity, entropy=entropy, total=total, weights=weights)


def total_loss(trace: ForwardTrace, label: int, weights: Optional[LossWeights] = None) -> LossBreakdown:
    """单样本损失，交叉熵作用在平均后的 y 上"""
    weights = weights or LossWeights()
    if trace.logits is None:
        raise ContractError("前向记录不完整")
    return _compose(cross_entropy(trace.logits, label), trace.assignments, trace.assignment_logits, weights)


def batch_loss(traces: Sequence[ForwardTrace], labels: Sequence[int],
               weights: Optional[LossWeights] = None) -> LossBreakdown:
    """批损失：交叉熵取批平均，正则项作用于批内共享的分配矩阵"""
    weights = weights or LossWeights()
    if not traces or len(traces) != len(labels):
        raise ContractError(f"批次大小不一致: {len(traces)} 个前向记录, {len(labels)} 个标签")
    ce = average([cross_entropy(t.logits, y) for t, y in zip(traces, labels)])
    return _compose(ce, traces[0].assignments, traces[0].assignment_logits, weights)

"""
聚类与分类评估指标
熵均使用自然对数；C 为预测划分，T 为真实划分
"""
import logging
from dataclasses import dataclass
from typing import Dict, Sequence, Union

import numpy as np
from scipy.special import gammaln
from sklearn.metrics import accuracy_score, roc_auc_score
from sklearn.metrics.cluster import contingency_matrix

from thc_core.exceptions import ContractError, MetricError
from thc_core.models import Partition

logger = logging.getLogger(__name__)

PartitionLike = Union[Partition, Sequence[int], np.ndarray]


def _labels(p: PartitionLike) -> np.ndarray:
    return p.assignment if isinstance(p, Partition) else np.asarray(p).reshape(-1)


def contingency(c: PartitionLike, t: PartitionLike) -> np.ndarray:
    """行是预测簇，列是真实类别"""
    c, t = _labels(c), _labels(t)
    if c.shape != t.shape:
        raise ContractError(f"两个划分的节点数不一致: {c.size} vs {t.size}")
    if c.size == 0:
        raise ContractError("划分为空")
    return contingency_matrix(c, t)


def entropy(counts: np.ndarray) -> float:
    """−Σ p log p，计数为 0 的项不计"""
    counts = np.asarray(counts, dtype=np.float64).reshape(-1)
    total = counts.sum()
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def _entropies(table: np.ndarray):
    h_c = entropy(table.sum(axis=1))
    h_t = entropy(table.sum(axis=0))
    h_ct = entropy(table)
    return h_c, h_t, h_ct


def conditional_entropy(c: PartitionLike, t: PartitionLike) -> float:
    """H(C|T) = H(C,T) − H(T)"""
    h_c, h_t, h_ct = _entropies(contingency(c, t))
    return max(h_ct - h_t, 0.0)


def mutual_information(c: PartitionLike, t: PartitionLike) -> float:
    h_c, h_t, h_ct = _entropies(contingency(c, t))
    return max(h_c + h_t - h_ct, 0.0)


def purity(c: PartitionLike, t: PartitionLike) -> float:
    """Σ_c max_t |c∩t| / N"""
    table = contingency(c, t)
    return float(table.max(axis=1).sum() / table.sum())


def nmi(c: PartitionLike, t: PartitionLike) -> float:
    """I(C;T) / mean(H(C), H(T))，两个划分都只有一个簇时定义为 1"""
    h_c, h_t, h_ct = _entropies(contingency(c, t))
    mean_h = (h_c + h_t) / 2.0
    if mean_h == 0.0:
        return 1.0
    return float(np.clip((h_c + h_t - h_ct) / mean_h, 0.0, 1.0))


def expected_mutual_information(table: np.ndarray) -> float:
    """置换（超几何）模型下互信息的期望"""
    table = np.asarray(table)
    n = int(table.sum())
    if n == 0:
        return 0.0
    a = table.sum(axis=1).astype(np.int64)
    b = table.sum(axis=0).astype(np.int64)
    log_n_fact = gammaln(n + 1)
    emi = 0.0
    for ai in a:
        for bj in b:
            low = max(1, ai + bj - n)
            high = min(ai, bj)
            if low > high:
                continue
            nij = np.arange(low, high + 1, dtype=np.float64)
            log_p = (gammaln(ai + 1) + gammaln(bj + 1) + gammaln(n - ai + 1) + gammaln(n - bj + 1)
                     - log_n_fact - gammaln(nij + 1) - gammaln(ai - nij + 1) - gammaln(bj - nij + 1)
                     - gammaln(n - ai - bj + nij + 1))
            term = (nij / n) * np.log(n * nij / (float(ai) * float(bj)))
            emi += float((term * np.exp(log_p)).sum())
    return emi


def nmi_literal(c: PartitionLike, t: PartitionLike) -> float:
    """H(C) − H(C|T) − E[H(C) − H(C|T)]，即减去期望后的互信息（未归一化）"""
    table = contingency(c, t)
    h_c, h_t, h_ct = _entropies(table)
    return (h_c + h_t - h_ct) - expected_mutual_information(table)


def homogeneity(c: PartitionLike, t: PartitionLike) -> float:
    """1 − H(C|T)/H(C)；C 只有一个簇时约定为 1.0"""
    h_c, h_t, h_ct = _entropies(contingency(c, t))
    if h_c == 0.0:
        logger.warning("预测划分只有一个簇，H(C)=0，homogeneity 按约定取 1.0")
        return 1.0
    return float(np.clip(1.0 - (h_ct - h_t) / h_c, 0.0, 1.0))


def homogeneity_standard(c: PartitionLike, t: PartitionLike) -> float:
    """常用定义 1 − H(T|C)/H(T)；T 只有一个类别时取 1.0"""
    h_c, h_t, h_ct = _entropies(contingency(c, t))
    if h_t == 0.0:
        logger.warning("真实划分只有一个类别，H(T)=0，标准 homogeneity 取 1.0")
        return 1.0
    return float(np.clip(1.0 - (h_ct - h_c) / h_t, 0.0, 1.0))


@dataclass
class ClusterReport:
    purity: float
    nmi: float
    nmi_literal: float
    homogeneity: float
    homogeneity_standard: float
    contingency: np.ndarray

    @property
    def n_clusters(self) -> int:
        return int(self.contingency.shape[0])

    def as_row(self) -> Dict[str, float]:
        return {
            'purity': self.purity,
            'nmi': self.nmi,
            'nmi_literal': self.nmi_literal,
            'homogeneity': self.homogeneity,
            'homogeneity_std': self.homogeneity_standard,
            'n_clusters': self.n_clusters,
        }


def cluster_report(c: PartitionLike, t: PartitionLike) -> ClusterReport:
    return ClusterReport(
        purity=purity(c, t),
        nmi=nmi(c, t),
        nmi_literal=nmi_literal(c, t),
        homogeneity=homogeneity(c, t),
        homogeneity_standard=homogeneity_standard(c, t),
        contingency=contingency(c, t),
    )


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """基于秩的 AUROC，同分记 0.5"""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ContractError(f"分数与标签长度不一致: {scores.size} vs {labels.size}")
    if not set(np.unique(labels)) <= {0, 1}:
        raise ContractError(f"标签必须是 0/1: {sorted(set(np.unique(labels)))}")
    if len(np.unique(labels)) < 2:
        raise MetricError("只有一个类别，AUROC 无定义")
    return float(roc_auc_score(labels, scores))


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    predictions = np.asarray(predictions).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if predictions.shape != labels.shape:
        raise ContractError(f"预测与标签长度不一致: {predictions.size} vs {labels.size}")
    if labels.size == 0:
        raise ContractError("没有可评估的样本")
    return float(accuracy_score(labels, predictions))

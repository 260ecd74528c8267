"""
经典聚类基线：Lloyd（k-means）与 Louvain，均作用于数据集平均邻接矩阵
"""
import logging
from dataclasses import dataclass, field
from typing import List, Union

import networkx as nx
import numpy as np
from sklearn.cluster import KMeans

from thc_core.exceptions import ConfigError, ContractError
from thc_core.models import BrainDataset, Partition

logger = logging.getLogger(__name__)

MODULARITY_TOLERANCE = 1e-12

GraphSource = Union[BrainDataset, np.ndarray]


def _matrix(source: GraphSource) -> np.ndarray:
    if isinstance(source, BrainDataset):
        return source.mean_adjacency()
    matrix = np.asarray(source, dtype=np.float64)
    if matrix.ndim != 2:
        raise ContractError(f"需要二维矩阵，实际形状 {matrix.shape}")
    return matrix


@dataclass
class LloydResult:
    partition: Partition
    inertia: float
    n_iter: int


def lloyd_fit(source: GraphSource, k: int, seed: int = 0) -> LloydResult:
    """对节点连接谱（平均邻接矩阵的行）做 k-means

    k-means++ 初始化，最多 300 次迭代；空簇由 scikit-learn 用最远点重新播种。
    """
    profiles = _matrix(source)
    if not 1 <= k <= profiles.shape[0]:
        raise ConfigError(f"簇数 k={k} 必须在 [1, {profiles.shape[0]}]")
    kmeans = KMeans(n_clusters=k, init='k-means++', n_init=10, max_iter=300,
                    random_state=seed, algorithm='lloyd')
    labels = kmeans.fit_predict(profiles)
    logger.debug(f"Lloyd k={k}: inertia={kmeans.inertia_:.6g}, 迭代 {kmeans.n_iter_} 次")
    return LloydResult(Partition.from_labels(labels), float(kmeans.inertia_), int(kmeans.n_iter_))


def lloyd(source: GraphSource, k: int, seed: int = 0) -> Partition:
    return lloyd_fit(source, k, seed).partition


@dataclass
class LouvainResult:
    partition: Partition
    modularity: float
    phase_modularity: List[float] = field(default_factory=list)


def build_graph(adjacency: np.ndarray) -> nx.Graph:
    """负权截断为 0、去掉自环后构造无向加权图"""
    matrix = np.array(adjacency, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ContractError(f"邻接矩阵必须是方阵，实际形状 {matrix.shape}")
    negative = int((matrix < 0).sum())
    if negative:
        logger.warning(f"Louvain 输入含 {negative} 个负权，已截断为 0")
        matrix = np.clip(matrix, 0.0, None)
    np.fill_diagonal(matrix, 0.0)
    graph = nx.Graph()
    graph.add_nodes_from(range(matrix.shape[0]))
    rows, cols = np.nonzero(np.triu(matrix, k=1))
    graph.add_weighted_edges_from((int(i), int(j), float(matrix[i, j])) for i, j in zip(rows, cols))
    if graph.size(weight='weight') <= 0:
        raise ContractError("图中没有正权边，Louvain 无法运行")
    return graph


def louvain_fit(source: GraphSource, seed: int = 0) -> LouvainResult:
    """贪心模块度优化，逐阶段聚合直到没有增益"""
    graph = build_graph(_matrix(source))
    phases = []
    phase_modularity: List[float] = []
    for communities in nx.community.louvain_partitions(graph, weight='weight', seed=seed):
        q = nx.community.modularity(graph, communities, weight='weight')
        if phase_modularity and q < phase_modularity[-1] - MODULARITY_TOLERANCE:
            logger.error(f"Louvain 第 {len(phases)} 阶段模块度下降: {phase_modularity[-1]} -> {q}")
            raise ContractError("Louvain 聚合阶段的模块度下降")
        phases.append(communities)
        phase_modularity.append(float(q))

    labels = np.empty(graph.number_of_nodes(), dtype=np.int64)
    for cluster, members in enumerate(phases[-1]):
        labels[list(members)] = cluster
    logger.debug(f"Louvain: {len(phases)} 个阶段, Q={phase_modularity[-1]:.6f}")
    return LouvainResult(Partition.from_labels(labels), phase_modularity[-1], phase_modularity)


def louvain(source: GraphSource, seed: int = 0) -> Partition:
    return louvain_fit(source, seed).partition


def modularity(adjacency: np.ndarray, partition: Partition) -> float:
    """按与 louvain 相同的预处理计算划分的加权模块度"""
    graph = build_graph(adjacency)
    communities = [set(np.flatnonzero(partition.assignment == c).tolist()) for c in range(partition.n_clusters)]
    return float(nx.community.modularity(graph, communities, weight='weight'))

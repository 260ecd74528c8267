"""
THC 共享数据模型
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from thc_core.exceptions import ConfigError, ContractError

SYMMETRY_TOLERANCE = 1e-9


@dataclass
class BrainGraph:
    """一个样本：V×V 加权邻接矩阵和二分类标签"""
    adjacency: np.ndarray
    label: int
    id: str = ''

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        self.label = int(self.label)
        self.validate()

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def validate(self) -> None:
        x = self.adjacency
        if x.ndim != 2 or x.shape[0] != x.shape[1]:
            raise ConfigError(f"样本 {self.id} 的邻接矩阵不是方阵: {x.shape}")
        if not np.isfinite(x).all():
            raise ConfigError(f"样本 {self.id} 的邻接矩阵包含非有限值")
        if np.max(np.abs(x - x.T), initial=0.0) > SYMMETRY_TOLERANCE:
            raise ConfigError(f"样本 {self.id} 的邻接矩阵不对称")


@dataclass
class BrainDataset:
    """样本集合及可选的节点级真实社区标签"""
    graphs: List[BrainGraph]
    fine_labels: Optional[np.ndarray] = None
    coarse_labels: Optional[np.ndarray] = None
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.graphs:
            raise ConfigError("数据集为空")
        sizes = {g.n_nodes for g in self.graphs}
        if len(sizes) != 1:
            raise ConfigError(f"数据集中的样本节点数不一致: {sorted(sizes)}")
        for name in ('fine_labels', 'coarse_labels'):
            labels = getattr(self, name)
            if labels is None:
                continue
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (self.n_nodes,):
                raise ConfigError(f"{name} 长度 {labels.shape} 与节点数 {self.n_nodes} 不一致")
            setattr(self, name, labels)

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def n_nodes(self) -> int:
        return self.graphs[0].n_nodes

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    @property
    def has_ground_truth(self) -> bool:
        return self.fine_labels is not None and self.coarse_labels is not None

    def subset(self, indices: Sequence[int]) -> List[BrainGraph]:
        return [self.graphs[i] for i in indices]

    def mean_adjacency(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        graphs = self.graphs if indices is None else self.subset(indices)
        return np.mean([g.adjacency for g in graphs], axis=0)


@dataclass
class Partition:
    """硬划分：节点到簇编号的映射，簇编号稠密地落在 [0, n_clusters)"""
    assignment: np.ndarray
    n_clusters: int

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.assignment.ndim != 1:
            raise ContractError(f"划分必须是一维数组，实际形状 {self.assignment.shape}")
        used = np.unique(self.assignment)
        if used.size and (used[0] < 0 or used[-1] >= self.n_clusters):
            raise ContractError(f"簇编号超出 [0, {self.n_clusters})")
        if used.size != self.n_clusters:
            raise ContractError(f"簇编号不稠密: 使用了 {used.size} 个，声明 {self.n_clusters} 个")

    @classmethod
    def from_labels(cls, labels: Sequence) -> 'Partition':
        """任意标签重新编号为稠密编号"""
        _, dense = np.unique(np.asarray(labels), return_inverse=True)
        dense = dense.reshape(-1)
        return cls(dense, int(dense.max()) + 1 if dense.size else 0)

    @property
    def n_nodes(self) -> int:
        return int(self.assignment.size)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_clusters)


@dataclass
class AssignmentStack:
    """逐层软分配矩阵 A¹…A^k 与聚类规模"""
    assignments: List[np.ndarray]
    schedule: List[int]

    def __post_init__(self):
        self.assignments = [np.asarray(a, dtype=np.float64) for a in self.assignments]
        if len(self.assignments) != len(self.schedule):
            raise ContractError("分配矩阵个数与聚类规模个数不一致")
        for i, a in enumerate(self.assignments):
            if a.shape[1] != self.schedule[i]:
                raise ContractError(f"第 {i + 1} 层分配矩阵列数 {a.shape[1]} 与规模 {self.schedule[i]} 不一致")
            if i and a.shape[0] != self.assignments[i - 1].shape[1]:
                raise ContractError(f"第 {i + 1} 层分配矩阵与上一层无法相乘")

    @property
    def depth(self) -> int:
        return len(self.assignments)

    @property
    def n_nodes(self) -> int:
        return self.assignments[0].shape[0]

    def flatten(self, depth: Optional[int] = None) -> np.ndarray:
        """A^flat = A¹·A²·…，可只压平前 depth 层"""
        depth = self.depth if depth is None else depth
        flat = self.assignments[0]
        for a in self.assignments[1:depth]:
            flat = flat @ a
        return flat

    def hard_partitions(self) -> List[Partition]:
        """逐层按行取 argmax 的硬划分（第 i 层划分的是第 i 层的输入单元）"""
        return [Partition.from_labels(np.argmax(a, axis=1)) for a in self.assignments]

    def node_partition(self, depth: Optional[int] = None) -> Partition:
        """把压平后的分配硬化为节点级划分"""
        return Partition.from_labels(np.argmax(self.flatten(depth), axis=1))

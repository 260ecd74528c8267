from typing import Dict, List, Optional, Sequence, Tuple
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from evaluation.baselines import lloyd, louvain_fit
from evaluation.metrics import ClusterReport, cluster_report
from thc_core.exceptions import ContractError
from thc_core.models import AssignmentStack, BrainDataset, Partition

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ['method', 'level', 'purity', 'nmi', 'nmi_literal', 'homogeneity', 'homogeneity_std',
                  'n_clusters', 'modularity']


class ClusterEvaluator:
    """聚类质量评估服务"""

    def __init__(self, fine_truth: Partition, coarse_truth: Partition):
        if fine_truth.n_nodes != coarse_truth.n_nodes:
            raise ContractError(f"细、粗真实划分节点数不一致: {fine_truth.n_nodes} vs {coarse_truth.n_nodes}")
        if fine_truth.n_clusters < coarse_truth.n_clusters:
            raise ContractError(f"细真实划分的簇数 {fine_truth.n_clusters} 少于粗划分 {coarse_truth.n_clusters}")
        self.fine_truth = fine_truth
        self.coarse_truth = coarse_truth

    @classmethod
    def from_dataset(cls, dataset: BrainDataset) -> 'ClusterEvaluator':
        if not dataset.has_ground_truth:
            raise ContractError("数据集没有真实社区标签")
        return cls(Partition.from_labels(dataset.fine_labels), Partition.from_labels(dataset.coarse_labels))

    @property
    def n_nodes(self) -> int:
        return self.fine_truth.n_nodes

    def truth_for(self, level: int) -> Partition:
        """第 1 层对细划分，其余层对粗划分"""
        return self.fine_truth if level == 1 else self.coarse_truth

    def level_partitions(self, stack: AssignmentStack) -> List[Tuple[str, Partition, Partition]]:
        """(层名, 节点级预测划分, 对应真实划分)，最后附加压平后的整体划分"""
        if stack.n_nodes != self.n_nodes:
            raise ContractError(f"分配矩阵的节点数 {stack.n_nodes} 与真实划分 {self.n_nodes} 不一致")
        levels = [(f"level{d}", stack.node_partition(d), self.truth_for(d)) for d in range(1, stack.depth + 1)]
        levels.append(('flat', stack.node_partition(), self.coarse_truth))
        return levels

    def hierarchy_report(self, stack: AssignmentStack) -> List[Tuple[str, ClusterReport]]:
        return [(name, cluster_report(pred, truth)) for name, pred, truth in self.level_partitions(stack)]

    def compare_methods(self, dataset: BrainDataset, stack: Optional[AssignmentStack],
                        schedule: Sequence[int], seed: int = 0) -> pd.DataFrame:
        """THC、Lloyd、Louvain 在各层级上的指标对比"""
        rows: List[Dict] = []
        if stack is not None:
            for name, report in self.hierarchy_report(stack):
                rows.append({'method': 'THC', 'level': name, **report.as_row()})

        mean_adjacency = dataset.mean_adjacency()
        for level, k in enumerate(schedule, start=1):
            partition = lloyd(mean_adjacency, int(k), seed)
            rows.append({'method': 'Lloyd', 'level': f"level{level}",
                         **cluster_report(partition, self.truth_for(level)).as_row()})

        try:
            result = louvain_fit(mean_adjacency, seed)
        except ContractError as e:
            logger.warning(f"Louvain 跳过: {e}")
        else:
            for level in range(1, len(schedule) + 1):
                rows.append({'method': 'Louvain', 'level': f"level{level}",
                             **cluster_report(result.partition, self.truth_for(level)).as_row(),
                             'modularity': result.modularity})
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)

    def cluster_rows(self, stack: AssignmentStack) -> pd.DataFrame:
        """每层每个节点的预测簇与真实标签"""
        rows = []
        for name, pred, truth in self.level_partitions(stack):
            for node in range(self.n_nodes):
                rows.append({'level': name, 'cluster_id': int(pred.assignment[node]),
                             'node_id': node, 'truth_label': int(truth.assignment[node])})
        return pd.DataFrame(rows, columns=['level', 'cluster_id', 'node_id', 'truth_label'])

    def composition(self, stack: AssignmentStack) -> pd.DataFrame:
        """每个簇内各真实标签的计数与占比，以及簇纯度"""
        rows = []
        for name, pred, truth in self.level_partitions(stack):
            table = pd.crosstab(pd.Series(pred.assignment, name='cluster_id'),
                                pd.Series(truth.assignment, name='truth_label'))
            for cluster_id, counts in table.iterrows():
                size = int(counts.sum())
                cluster_purity = counts.max() / size
                for truth_label, count in counts.items():
                    if count == 0:
                        continue
                    rows.append({'level': name, 'cluster_id': int(cluster_id), 'truth_label': int(truth_label),
                                 'count': int(count), 'fraction': count / size,
                                 'cluster_purity': cluster_purity})
        return pd.DataFrame(rows, columns=['level', 'cluster_id', 'truth_label', 'count', 'fraction',
                                           'cluster_purity'])

    def write_reports(self, out_dir: Path, dataset: BrainDataset, stack: Optional[AssignmentStack],
                      schedule: Sequence[int], seed: int = 0) -> Dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {'report': out_dir / 'report.csv'}
        self.compare_methods(dataset, stack, schedule, seed).to_csv(paths['report'], index=False,
                                                                     lineterminator='\n')
        if stack is not None:
            paths['clusters'] = out_dir / 'clusters.csv'
            paths['composition'] = out_dir / 'composition.csv'
            self.cluster_rows(stack).to_csv(paths['clusters'], index=False, lineterminator='\n')
            self.composition(stack).to_csv(paths['composition'], index=False, lineterminator='\n')
        logger.info(f"聚类报告已写入 {out_dir}")
        return paths

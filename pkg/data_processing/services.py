"""
合成脑网络生成：两级嵌套的种植社区结构 + 高斯噪声 + 类别效应
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from config import settings
from thc_core.exceptions import ConfigError
from thc_core.models import BrainDataset, BrainGraph
from thc_core.storage import load_yaml

logger = logging.getLogger(__name__)


@dataclass
class PlantedSpec:
    """种植社区规格

    细社区按节点顺序连续均分，粗社区再把相邻的细社区均分成组，
    因此细划分总是精确地细化粗划分。
    """
    n_nodes: int = 60
    n_fine: int = 6
    n_coarse: int = 3
    within: float = 0.8
    coarse_within: Optional[float] = None
    between: float = 0.2
    sigma: float = 0.1
    class_shift: float = 0.15
    effect_blocks: List[int] = field(default_factory=lambda: [0, 1])
    n_samples: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.coarse_within is None:
            self.coarse_within = (self.within + self.between) / 2.0
        self.effect_blocks = [int(b) for b in self.effect_blocks]
        self.validate()

    def validate(self) -> None:
        if self.n_nodes < 1 or self.n_samples < 1:
            raise ConfigError(f"节点数和样本数必须为正: V={self.n_nodes}, n={self.n_samples}")
        if not 1 <= self.n_fine <= self.n_nodes:
            raise ConfigError(f"细社区数 {self.n_fine} 会产生空社区（V={self.n_nodes}）")
        if not 1 <= self.n_coarse <= self.n_fine:
            raise ConfigError(f"粗社区数 {self.n_coarse} 会产生空社区（细社区 {self.n_fine} 个）")
        if self.sigma < 0:
            raise ConfigError(f"噪声标准差不能为负: {self.sigma}")
        if not self.within > self.between:
            raise ConfigError(f"社区内均值 {self.within} 必须大于社区间均值 {self.between}")
        if not self.between <= self.coarse_within <= self.within:
            raise ConfigError(f"粗社区内均值 {self.coarse_within} 应介于 {self.between} 与 {self.within} 之间")
        for block in self.effect_blocks:
            if not 0 <= block < self.n_fine:
                raise ConfigError(f"类别效应社区编号 {block} 超出 [0, {self.n_fine})")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PlantedSpec':
        data = dict(data)
        preset = data.pop('preset', None)
        base: Dict[str, Any] = {}
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"未知的生成预设: {preset}，可选 {sorted(PRESETS)}")
            base = asdict(PRESETS[preset])
            base['coarse_within'] = None
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"生成规格中有未知字段: {sorted(unknown)}")
        base.update(data)
        try:
            return cls(**base)
        except TypeError as e:
            raise ConfigError(f"生成规格字段错误: {e}") from e

    @classmethod
    def from_yaml(cls, path) -> 'PlantedSpec':
        return cls.from_dict(load_yaml(path))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def fine_labels(self) -> np.ndarray:
        labels = np.empty(self.n_nodes, dtype=np.int64)
        for block, nodes in enumerate(np.array_split(np.arange(self.n_nodes), self.n_fine)):
            labels[nodes] = block
        return labels

    def coarse_of_fine(self) -> np.ndarray:
        mapping = np.empty(self.n_fine, dtype=np.int64)
        for group, blocks in enumerate(np.array_split(np.arange(self.n_fine), self.n_coarse)):
            mapping[blocks] = group
        return mapping

    def coarse_labels(self) -> np.ndarray:
        return self.coarse_of_fine()[self.fine_labels()]

    def template(self, label: int = 0) -> np.ndarray:
        """类别 label 的块均值模板"""
        fine = self.fine_labels()
        coarse = self.coarse_labels()
        same_fine = fine[:, None] == fine[None, :]
        same_coarse = coarse[:, None] == coarse[None, :]
        means = np.where(same_fine, self.within, np.where(same_coarse, self.coarse_within, self.between))
        if label == 1 and self.class_shift:
            effect = np.isin(fine, self.effect_blocks)
            means = means + self.class_shift * (same_fine & effect[:, None] & effect[None, :])
        return means


PRESETS: Dict[str, PlantedSpec] = {
    'planted60': PlantedSpec(),
    'hcp360_like': PlantedSpec(n_nodes=360, n_fine=20, n_coarse=6),
    'craddock200_like': PlantedSpec(n_nodes=200, n_fine=20, n_coarse=6),
}


class PlantedGenerator:
    """按种植规格生成带标签的脑网络数据集"""

    def __init__(self, spec: PlantedSpec, workers: Optional[int] = None):
        self.spec = spec
        self.workers = settings.WORKER_COUNT if workers is None else max(1, workers)
        self._templates = (spec.template(0), spec.template(1))

    def generate(self, n_samples: Optional[int] = None) -> BrainDataset:
        """生成数据集

        每个样本的随机流由 SeedSequence 派生，结果与工作线程数无关。
        """
        n = self.spec.n_samples if n_samples is None else n_samples
        if n < 1:
            raise ConfigError(f"样本数必须为正: {n}")
        label_seed, *sample_seeds = np.random.SeedSequence(self.spec.seed).spawn(n + 1)
        labels = np.array([0] * (n // 2) + [1] * (n - n // 2), dtype=np.int64)
        labels = np.random.default_rng(label_seed).permutation(labels)
        jobs = list(zip(range(n), labels, sample_seeds))

        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as executor:
                graphs = list(executor.map(self._sample, jobs))
        else:
            graphs = [self._sample(job) for job in jobs]

        logger.info(f"生成合成数据集: {n} 个样本, V={self.spec.n_nodes}, "
                    f"细社区 {self.spec.n_fine}, 粗社区 {self.spec.n_coarse}, σ={self.spec.sigma}")
        return BrainDataset(
            graphs=graphs,
            fine_labels=self.spec.fine_labels(),
            coarse_labels=self.spec.coarse_labels(),
            metadata={'generator': self.spec.to_dict()},
        )

    def _sample(self, job: Tuple[int, int, np.random.SeedSequence]) -> BrainGraph:
        index, label, seed = job
        adjacency = self._templates[label].copy()
        if self.spec.sigma > 0:
            noise = np.random.default_rng(seed).normal(0.0, self.spec.sigma, size=adjacency.shape)
            adjacency = adjacency + (noise + noise.T) / 2.0
        return BrainGraph(adjacency, int(label), f"s{index:05d}")


def generate(spec: PlantedSpec, n_samples: Optional[int] = None) -> BrainDataset:
    return PlantedGenerator(spec).generate(n_samples)

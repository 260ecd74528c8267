"""
训练配置：YAML 分节（model / training / loss / split），默认值可打印
"""
import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Sequence, Tuple, Union

import yaml

from thc_core.exceptions import ConfigError
from thc_core.services.thc_model import ABLATION_MODES
from thc_core.services.objective import ENTROPY_FORMS, LossWeights
from thc_core.storage import load_yaml

logger = logging.getLogger(__name__)

# 大图谱与小图谱的两层聚类规模
SCHEDULE_PRESETS: Dict[str, Tuple[int, ...]] = {
    'large': (90, 4),
    'small': (20, 4),
}

SECTIONS: Dict[str, Tuple[str, ...]] = {
    'model': ('schedule', 'heads', 'd_k', 'd_v', 'readout_hidden', 'ablation'),
    'training': ('epochs', 'batch_size', 'lr', 'beta1', 'beta2', 'eps', 'weight_decay', 'seed', 'folds'),
    'loss': ('sparsity_weight', 'entropy_weight', 'entropy_form'),
    'split': ('train_ratio', 'val_ratio', 'test_ratio'),
}


def parse_schedule(value: Union[str, Sequence[int]]) -> List[int]:
    """预设名、逗号分隔字符串或整数序列"""
    if isinstance(value, str):
        text = value.strip()
        if text in SCHEDULE_PRESETS:
            return list(SCHEDULE_PRESETS[text])
        try:
            value = [int(part) for part in text.split(',') if part.strip()]
        except ValueError:
            raise ConfigError(f"无法解析聚类规模: {text!r}（可用预设 {sorted(SCHEDULE_PRESETS)}）")
    try:
        schedule = [int(c) for c in value]
    except (TypeError, ValueError):
        raise ConfigError(f"无法解析聚类规模: {value!r}")
    if not schedule:
        raise ConfigError("聚类规模不能为空")
    for before, after in zip(schedule, schedule[1:]):
        if after >= before:
            raise ConfigError(f"聚类规模必须严格递减: {schedule}")
    if schedule[-1] < 1:
        raise ConfigError(f"最后一层聚类数必须 ≥ 1: {schedule}")
    return schedule


@dataclass
class TrainConfig:
    schedule: List[int] = field(default_factory=lambda: list(SCHEDULE_PRESETS['small']))
    heads: int = 4
    d_k: int = 64
    d_v: int = 64
    readout_hidden: int = 32
    ablation: str = 'full'

    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    folds: int = 1

    sparsity_weight: float = 1.0
    entropy_weight: float = 1.0
    entropy_form: str = 'binary'

    train_ratio: float = 0.7
    val_ratio: float = 0.2
    test_ratio: float = 0.1

    def __post_init__(self):
        self.schedule = parse_schedule(self.schedule)
        self.validate()

    def validate(self) -> None:
        if self.ablation not in ABLATION_MODES:
            raise ConfigError(f"未知的消融模式: {self.ablation}，可选 {ABLATION_MODES}")
        if self.entropy_form not in ENTROPY_FORMS:
            raise ConfigError(f"未知的熵损失形式: {self.entropy_form}，可选 {ENTROPY_FORMS}")
        for name in ('heads', 'd_k', 'd_v', 'readout_hidden', 'batch_size', 'folds'):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} 必须 ≥ 1，实际 {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs 不能为负: {self.epochs}")
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("学习率与权重衰减不能为负，eps 必须为正")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"Adam 动量系数必须在 [0, 1): {self.beta1}, {self.beta2}")
        ratios = self.ratios
        if any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
            raise ConfigError(f"划分比例必须为正且和为 1: {ratios}")

    @property
    def ratios(self) -> Tuple[float, float, float]:
        return (self.train_ratio, self.val_ratio, self.test_ratio)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.sparsity_weight, self.entropy_weight, self.entropy_form)

    def model_kwargs(self) -> Dict[str, Any]:
        return {
            'schedule': list(self.schedule),
            'heads': self.heads,
            'd_k': self.d_k,
            'd_v': self.d_v,
            'readout_hidden': self.readout_hidden,
            'ablation': self.ablation,
        }

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {
            section: {key: (list(getattr(self, key)) if key == 'schedule' else getattr(self, key))
                      for key in keys}
            for section, keys in SECTIONS.items()
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainConfig':
        flat = cls.flatten(data)
        try:
            return cls(**flat)
        except TypeError as e:
            raise ConfigError(f"配置字段错误: {e}") from e

    @staticmethod
    def flatten(data: Dict[str, Any]) -> Dict[str, Any]:
        """分节配置展平为字段字典，未知节或字段报错"""
        flat: Dict[str, Any] = {}
        for section, values in (data or {}).items():
            if section not in SECTIONS:
                raise ConfigError(f"未知的配置节: {section}，可选 {sorted(SECTIONS)}")
            if values is None:
                continue
            if not isinstance(values, dict):
                raise ConfigError(f"配置节 {section} 必须是映射")
            for key, value in values.items():
                if key not in SECTIONS[section]:
                    raise ConfigError(f"配置节 {section} 中未知的字段: {key}")
                flat[key] = value
        return flat

    @classmethod
    def from_yaml(cls, path) -> 'TrainConfig':
        return cls.from_dict(load_yaml(path))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, allow_unicode=True)

    def with_overrides(self, **overrides) -> 'TrainConfig':
        """命令行覆盖，None 表示不覆盖"""
        known = {f.name for f in fields(self)}
        values = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"未知的配置字段: {sorted(unknown)}")
        return replace(self, **values)

"""
THC 存储：数据集目录、模型检查点、运行清单
"""
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import yaml

from config import settings
from thc_core import __version__
from thc_core.exceptions import ConfigError, ParseError
from thc_core.models import BrainDataset, BrainGraph

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
DATASET_VERSION = 1
CHECKPOINT_FORMAT = 'thc-checkpoint'
CHECKPOINT_VERSION = 1

PathLike = Union[str, Path]


def atomic_write(path: PathLike, text: str) -> None:
    """先写同目录临时文件再替换，中断时旧文件保持完整"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_json(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise ParseError("文件不存在", path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"JSON 格式错误: {e.msg}", path, e.lineno) from e


def format_matrix(matrix: np.ndarray) -> str:
    """首行为 V，随后 V 行、每行 V 个 17 位有效数字的数值"""
    lines = [str(matrix.shape[0])]
    lines.extend(' '.join(format(float(v), '.17g') for v in row) for row in matrix)
    return '\n'.join(lines) + '\n'


def parse_matrix(path: PathLike, expected_size: Optional[int] = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ParseError("矩阵文件不存在", path)
    with open(path, 'r', encoding='utf-8') as f:
        lines = [line.strip() for line in f]
    while lines and not lines[-1]:
        lines.pop()
    if not lines:
        raise ParseError("矩阵文件为空", path, 1)
    try:
        size = int(lines[0])
    except ValueError:
        raise ParseError(f"首行应为节点数 V，实际为 {lines[0]!r}", path, 1)
    if size < 1:
        raise ParseError(f"节点数必须为正: {size}", path, 1)
    if expected_size is not None and size != expected_size:
        raise ParseError(f"节点数 {size} 与清单中的 {expected_size} 不一致", path, 1)
    if len(lines) - 1 != size:
        raise ParseError(f"应有 {size} 行数据，实际 {len(lines) - 1} 行", path, len(lines))
    matrix = np.empty((size, size), dtype=np.float64)
    for i, line in enumerate(lines[1:]):
        tokens = line.split()
        if len(tokens) != size:
            raise ParseError(f"矩阵不是方阵: 应有 {size} 列，实际 {len(tokens)} 列", path, i + 2)
        try:
            matrix[i] = [float(t) for t in tokens]
        except ValueError as e:
            raise ParseError(f"无法解析数值: {e}", path, i + 2) from e
    return matrix


class DatasetStorage:
    """数据集目录管理器：manifest.json + 每个样本一个矩阵文件"""

    def __init__(self, path: PathLike):
        self.path = Path(path)

    @property
    def manifest_path(self) -> Path:
        return self.path / MANIFEST_NAME

    def save(self, dataset: BrainDataset) -> Path:
        """保存数据集，返回清单路径"""
        self.path.mkdir(parents=True, exist_ok=True)
        width = max(4, len(str(len(dataset) - 1)))
        samples = []
        for index, graph in enumerate(dataset.graphs):
            name = f"sample_{index:0{width}d}.txt"
            atomic_write(self.path / name, format_matrix(graph.adjacency))
            samples.append({'id': graph.id or f"s{index:0{width}d}", 'label': graph.label, 'matrix': name})

        manifest: Dict[str, Any] = {
            'version': DATASET_VERSION,
            'V': dataset.n_nodes,
            'samples': samples,
        }
        if dataset.has_ground_truth:
            manifest['ground_truth'] = {
                'fine': [int(v) for v in dataset.fine_labels],
                'coarse': [int(v) for v in dataset.coarse_labels],
            }
        if dataset.metadata:
            manifest['metadata'] = dataset.metadata
        atomic_write(self.manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + '\n')
        logger.info(f"数据集已写入 {self.path}: {len(dataset)} 个样本, V={dataset.n_nodes}")
        return self.manifest_path

    def load(self) -> BrainDataset:
        manifest = _read_json(self.manifest_path)
        try:
            version = manifest['version']
            n_nodes = int(manifest['V'] if 'V' in manifest else manifest['n_nodes'])
            entries = manifest['samples']
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"清单缺少必需字段: {e}", self.manifest_path) from e
        if version != DATASET_VERSION:
            raise ParseError(f"不支持的数据集版本: {version}", self.manifest_path)
        if not isinstance(entries, list) or not entries:
            raise ParseError("清单中没有样本", self.manifest_path)

        graphs: List[BrainGraph] = []
        for entry in entries:
            try:
                matrix_path = self.path / entry['matrix']
                label = int(entry['label'])
                sample_id = str(entry.get('id', entry['matrix']))
            except (KeyError, TypeError, ValueError) as e:
                raise ParseError(f"样本条目格式错误: {entry!r}", self.manifest_path) from e
            if label not in (0, 1):
                raise ParseError(f"样本 {sample_id} 的标签必须是 0 或 1，实际 {label}", self.manifest_path)
            matrix = parse_matrix(matrix_path, n_nodes)
            try:
                graphs.append(BrainGraph(matrix, label, sample_id))
            except ConfigError as e:
                raise ParseError(str(e), matrix_path) from e

        fine = coarse = None
        truth = manifest.get('ground_truth')
        if truth is not None:
            try:
                fine = np.asarray(truth['fine'], dtype=np.int64)
                coarse = np.asarray(truth['coarse'], dtype=np.int64)
            except (KeyError, TypeError, ValueError) as e:
                raise ParseError(f"真实社区标签格式错误: {e}", self.manifest_path) from e
        try:
            dataset = BrainDataset(graphs, fine, coarse, manifest.get('metadata', {}))
        except ConfigError as e:
            raise ParseError(str(e), self.manifest_path) from e
        logger.info(f"已加载数据集 {self.path}: {len(dataset)} 个样本, V={dataset.n_nodes}")
        return dataset


def save_dataset(dataset: BrainDataset, path: PathLike) -> Path:
    return DatasetStorage(path).save(dataset)


def load_dataset(path: PathLike) -> BrainDataset:
    return DatasetStorage(path).load()


def checkpoint_text(model, metadata: Optional[Dict[str, Any]] = None) -> str:
    """检查点的规范文本：键排序、浮点数按 repr 输出，保证逐字节可复现"""
    payload = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'hyperparameters': model.hyperparameters(),
        'parameters': {
            name: {'shape': list(values.shape), 'values': [float(v) for v in values.reshape(-1)]}
            for name, values in model.state_dict().items()
        },
        'metadata': metadata or {},
    }
    return json.dumps(payload, sort_keys=True, allow_nan=False) + '\n'


def save_checkpoint(model, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    atomic_write(path, checkpoint_text(model, metadata))
    logger.info(f"检查点已保存: {path}")
    return path


def load_checkpoint(path: PathLike) -> Tuple[Any, Dict[str, Any]]:
    """读取检查点，返回 (ThcModel, metadata)"""
    from thc_core.services.thc_model import ThcModel

    path = Path(path)
    payload = _read_json(path)
    if payload.get('format') != CHECKPOINT_FORMAT or payload.get('version') != CHECKPOINT_VERSION:
        raise ParseError(f"不是受支持的检查点: format={payload.get('format')!r}, "
                         f"version={payload.get('version')!r}", path)
    try:
        model = ThcModel.from_hyperparameters(payload['hyperparameters'])
        state = {
            name: np.asarray(entry['values'], dtype=np.float64).reshape(entry['shape'])
            for name, entry in payload['parameters'].items()
        }
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"检查点内容损坏: {e}", path) from e
    model.load_state_dict(state)
    return model, payload.get('metadata', {})


@dataclass
class RunManifest:
    """一次运行的可复现记录"""
    command: str
    config: Dict[str, Any]
    seed: int
    version: str = __version__
    outputs: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    status: str = 'running'

    def write(self, path: Optional[PathLike] = None) -> Path:
        path = Path(path or Path(self.outputs.get('out_dir', settings.OUTPUT_DIR)) / settings.RUN_MANIFEST_NAME)
        atomic_write(path, json.dumps(asdict(self), indent=2, sort_keys=True) + '\n')
        return path

    @classmethod
    def load(cls, path: PathLike) -> 'RunManifest':
        path = Path(path)
        payload = _read_json(path)
        try:
            return cls(**payload)
        except TypeError as e:
            raise ParseError(f"运行清单字段错误: {e}", path) from e


def load_yaml(path: PathLike) -> Dict[str, Any]:
    """读取 YAML 配置，语法错误带行号"""
    path = Path(path)
    if not path.exists():
        raise ParseError("配置文件不存在", path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        raise ParseError(f"YAML 格式错误: {getattr(e, 'problem', e)}", path,
                         mark.line + 1 if mark is not None else None) from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ParseError("配置文件顶层必须是映射", path, 1)
    return data

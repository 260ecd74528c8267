"""
THC 训练服务：数据划分、批次、训练循环、模型选择、全局分配提取
"""
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from evaluation.metrics import accuracy, auroc
from optimization.config import TrainConfig
from optimization.optimizer import Adam
from thc_core.exceptions import ConfigError, ContractError, MetricError, NonFiniteLossError
from thc_core.models import AssignmentStack, BrainDataset, BrainGraph, Partition
from thc_core.services.objective import batch_loss
from thc_core.services.thc_model import (
    ABLATION_MODES, EVAL, TRAIN, ForwardTrace, ThcModel, forward, forward_batch, predict_proba,
)
from thc_core.storage import save_checkpoint
from thc_core.tensor import Tape, backward

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['epoch', 'ce', 'sparsity', 'entropy', 'total', 'train_auroc', 'val_auroc', 'val_acc']


@dataclass(frozen=True)
class DataSplit:
    train: Tuple[int, ...]
    val: Tuple[int, ...]
    test: Tuple[int, ...]
    seed: int

    def to_dict(self) -> Dict:
        return {'train': list(self.train), 'val': list(self.val), 'test': list(self.test), 'seed': self.seed}

    @classmethod
    def from_dict(cls, data: Dict) -> 'DataSplit':
        return cls(tuple(data['train']), tuple(data['val']), tuple(data['test']), int(data['seed']))


def split_sizes(n: int, ratios: Sequence[float]) -> List[int]:
    """最大余数法分配各部分样本数"""
    raw = [r * n for r in ratios]
    sizes = [int(math.floor(x + 1e-9)) for x in raw]
    remainders = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in remainders[:n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(labels: Sequence[int], ratios: Sequence[float] = (0.7, 0.2, 0.1), seed: int = 0) -> DataSplit:
    """分层随机划分 train/val/test

    每个类别内部打乱后赋予分位键 (j+0.5)/n_c，全体按键排序再切成连续块，
    这样每一块里的类别比例都接近全局比例。
    """
    labels = np.asarray(labels)
    n = labels.size
    if n == 0:
        raise ConfigError("数据集为空，无法划分")
    if len(ratios) != 3 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"划分比例必须是三个且和为 1: {tuple(ratios)}")
    sizes = split_sizes(n, ratios)
    if min(sizes) < 1:
        raise ConfigError(f"{n} 个样本按 {tuple(ratios)} 划分后有部分少于 1 个样本: {sizes}")

    rng = np.random.default_rng(seed)
    keyed = []
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        tiebreak = rng.random(members.size)
        for j, (index, tie) in enumerate(zip(members, tiebreak)):
            keyed.append(((j + 0.5) / members.size, tie, int(index)))
    order = [index for _, _, index in sorted(keyed)]
    train_end = sizes[0]
    val_end = sizes[0] + sizes[1]
    return DataSplit(
        train=tuple(sorted(order[:train_end])),
        val=tuple(sorted(order[train_end:val_end])),
        test=tuple(sorted(order[val_end:])),
        seed=seed,
    )


def kfold(labels: Sequence[int], ratios: Sequence[float], seed: int, folds: int) -> List[DataSplit]:
    """folds 个独立的分层划分，种子依次为 seed, seed+1, ..."""
    if folds < 1:
        raise ConfigError(f"折数必须 ≥ 1: {folds}")
    return [split(labels, ratios, seed + fold) for fold in range(folds)]


def make_batches(indices: Sequence[int], batch_size: int, rng: np.random.Generator) -> List[List[int]]:
    if batch_size < 1:
        raise ConfigError(f"批大小必须 ≥ 1: {batch_size}")
    shuffled = [int(i) for i in rng.permutation(np.asarray(indices, dtype=np.int64))]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


@dataclass(frozen=True)
class Snapshot:
    """某个 epoch 的参数快照，数组只读"""
    epoch: int
    val_auroc: float
    parameters: Dict[str, np.ndarray]

    @classmethod
    def capture(cls, model: ThcModel, epoch: int, val_auroc: float) -> 'Snapshot':
        parameters = model.state_dict()
        for values in parameters.values():
            values.setflags(write=False)
        return cls(epoch, val_auroc, parameters)


@dataclass
class EpochRecord:
    epoch: int
    ce: float
    sparsity: float
    entropy: float
    total: float
    train_auroc: float
    val_auroc: float
    val_acc: float


@dataclass
class TrainState:
    model: ThcModel
    optimizer: Adam
    epoch: int = 0
    best: Optional[Snapshot] = None
    history: List[EpochRecord] = field(default_factory=list)

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.history], columns=METRIC_COLUMNS)


def _safe_auroc(scores, labels, what: str) -> float:
    try:
        return auroc(scores, labels)
    except MetricError:
        logger.warning(f"{what} 只有一个类别，AUROC 记为 NaN")
        return float('nan')


def _score(value: float) -> float:
    return -math.inf if math.isnan(value) else value


def evaluate(model: ThcModel, graphs: Sequence[BrainGraph]) -> Dict[str, float]:
    """评估模式下的 AUROC 与准确率"""
    if not graphs:
        raise ContractError("没有可评估的样本")
    labels = np.array([g.label for g in graphs])
    probs = predict_proba(model, graphs)
    return {
        'auroc': _safe_auroc(probs, labels, '评估集'),
        'accuracy': accuracy((probs > 0.5).astype(np.int64), labels),
    }


def train_epoch(state: TrainState, batches: Sequence[Sequence[BrainGraph]], config: TrainConfig,
                rng: np.random.Generator, val: Optional[Sequence[BrainGraph]] = None) -> TrainState:
    """每个批次一次优化步；追加本 epoch 的指标并按验证 AUROC 更新最佳快照"""
    if not batches:
        raise ContractError("没有训练批次")
    model = state.model
    weights = config.loss_weights
    sums = {'ce': 0.0, 'sparsity': 0.0, 'entropy': 0.0, 'total': 0.0}
    seen = 0
    scores: List[float] = []
    labels: List[int] = []

    for batch_index, batch in enumerate(batches):
        batch_labels = [g.label for g in batch]
        named = model.named_parameters()
        with Tape():
            traces = forward_batch(batch, model, TRAIN, rng)
            loss = batch_loss(traces, batch_labels, weights)
            components = loss.as_dict()
            for component, value in components.items():
                if not math.isfinite(value):
                    raise NonFiniteLossError(batch_index, component, value)
            grads = backward(loss.total, [tensor for _, tensor in named])
        new_state = state.optimizer.step(
            {name: tensor.values for name, tensor in named},
            {name: grads[tensor] for name, tensor in named},
        )
        model.load_state_dict(new_state)

        for key in sums:
            sums[key] += components[key] * len(batch)
        seen += len(batch)
        scores.extend(float(t.probabilities()[1]) for t in traces)
        labels.extend(batch_labels)

    val_metrics = evaluate(model, val) if val else {'auroc': float('nan'), 'accuracy': float('nan')}
    state.epoch += 1
    record = EpochRecord(
        epoch=state.epoch,
        **{key: total / seen for key, total in sums.items()},
        train_auroc=_safe_auroc(scores, labels, '训练批次'),
        val_auroc=val_metrics['auroc'],
        val_acc=val_metrics['accuracy'],
    )
    state.history.append(record)
    if state.best is None or _score(record.val_auroc) > _score(state.best.val_auroc):
        state.best = Snapshot.capture(model, state.epoch, record.val_auroc)
    logger.info(f"epoch {state.epoch}: total={record.total:.4f} ce={record.ce:.4f} "
                f"val_auroc={record.val_auroc:.4f} val_acc={record.val_acc:.4f}")
    return state


def select_and_test(state: TrainState, val: Sequence[BrainGraph], test: Sequence[BrainGraph]) -> Dict:
    """恢复验证 AUROC 最高（并列取最早）的快照，报告测试指标"""
    if state.epoch < 1 or state.best is None:
        raise ContractError("至少需要完成一个 epoch")
    state.model.load_state_dict(state.best.parameters)
    test_metrics = evaluate(state.model, test)
    result = {
        'best_epoch': state.best.epoch,
        'val_auroc': state.best.val_auroc,
        'test_auroc': test_metrics['auroc'],
        'test_acc': test_metrics['accuracy'],
    }
    logger.info(f"选择第 {state.best.epoch} 个 epoch: test_auroc={result['test_auroc']:.4f}, "
                f"test_acc={result['test_acc']:.4f}")
    return result


@dataclass
class FinalAssignment:
    stack: AssignmentStack
    partitions: List[Partition]
    flat: np.ndarray

    def node_partition(self, depth: Optional[int] = None) -> Partition:
        return self.stack.node_partition(depth)


def finalize_assignment(model: ThcModel, graphs: Sequence[BrainGraph]) -> FinalAssignment:
    """在整个训练集上做一次评估模式批量前向，得到 logits 平均后再 softmax 的全局分配"""
    if model.ablation == 'no_cluster':
        raise ContractError("no_cluster 模型没有聚类分配")
    if not graphs:
        raise ContractError("训练集为空")
    trace = forward_batch(graphs, model, EVAL)[0]
    stack = trace.assignment_stack()
    return FinalAssignment(stack=stack, partitions=stack.hard_partitions(), flat=stack.flatten())


def ablation_model(model: ThcModel, mode: str) -> ThcModel:
    """同一超参数下换成另一种消融模式的模型

    名称与形状都一致的参数（注意力、W_V、编码器 MLP、读出层）直接沿用 model 的取值，
    其余参数按 model 的种子初始化。mode 与 model 相同时返回 model 本身。
    """
    if mode not in ABLATION_MODES:
        raise ConfigError(f"未知的消融模式: {mode}，可选 {ABLATION_MODES}")
    if mode == model.ablation:
        return model
    sibling = ThcModel.from_hyperparameters({**model.hyperparameters(), 'ablation': mode})
    state = sibling.state_dict()
    shared = {name: values for name, values in model.state_dict().items()
              if name in state and state[name].shape == values.shape}
    state.update(shared)
    sibling.load_state_dict(state)
    logger.debug(f"{model.ablation} → {mode}: 沿用 {len(shared)} 个参数")
    return sibling


def ablation_forward(graph, model: ThcModel, mode: str, phase: str = EVAL,
                     rng: Optional[np.random.Generator] = None) -> ForwardTrace:
    """按消融模式前向

    no_cluster 跳过聚类，读出直接使用全分辨率嵌入，记录里没有分配矩阵；
    linear_cluster 的分配矩阵是自由参数的 softmax，与输入无关；full 为完整模型。
    """
    if phase not in (TRAIN, EVAL):
        raise ContractError(f"未知的模式: {phase}")
    return forward(graph, ablation_model(model, mode), phase, rng)


@dataclass
class FoldResult:
    fold: int
    split: DataSplit
    state: TrainState
    test: Optional[Dict] = None


class ThcTrainer:
    """一次完整实验：初始化、训练、选择、测试，按需写出检查点与指标"""

    def __init__(self, config: TrainConfig, dataset: BrainDataset, out_dir: Optional[Path] = None,
                 checkpoint_name: str = 'checkpoint.json', metrics_name: str = 'metrics.csv'):
        self.config = config
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.checkpoint_name = checkpoint_name
        self.metrics_name = metrics_name

    def build_state(self, seed: int) -> TrainState:
        model = ThcModel(self.dataset.n_nodes, seed=seed, **self.config.model_kwargs())
        optimizer = Adam(self.config.lr, (self.config.beta1, self.config.beta2),
                         self.config.eps, self.config.weight_decay)
        return TrainState(model=model, optimizer=optimizer)

    def fold_dir(self, fold: int) -> Optional[Path]:
        if self.out_dir is None:
            return None
        return self.out_dir if self.config.folds == 1 else self.out_dir / f"fold_{fold}"

    def _checkpoint(self, state: TrainState, data_split: DataSplit, fold: int, path: Path) -> None:
        best = state.best
        metadata = {
            'config': self.config.to_dict(),
            'split': data_split.to_dict(),
            'fold': fold,
            'epoch': best.epoch if best else 0,
            'val_auroc': None if best is None or math.isnan(best.val_auroc) else best.val_auroc,
        }
        save_checkpoint(state.model, path, metadata)

    def fit(self, data_split: DataSplit, fold: int = 0,
            on_epoch: Optional[Callable[[TrainState], None]] = None) -> FoldResult:
        config = self.config
        seed = config.seed + fold
        state = self.build_state(seed)
        rng = np.random.default_rng(seed)
        train = self.dataset.subset(data_split.train)
        val = self.dataset.subset(data_split.val)
        test = self.dataset.subset(data_split.test)
        fold_dir = self.fold_dir(fold)
        checkpoint_path = fold_dir / self.checkpoint_name if fold_dir else None
        if checkpoint_path is not None:
            self._checkpoint(state, data_split, fold, checkpoint_path)

        progress = tqdm(range(config.epochs), desc=f"fold {fold}", disable=not sys.stderr.isatty())
        try:
            for _ in progress:
                previous_best = state.best
                batches = [self.dataset.subset(b) for b in make_batches(data_split.train, config.batch_size, rng)]
                train_epoch(state, batches, config, rng, val)
                progress.set_postfix(loss=f"{state.history[-1].total:.4f}")
                if checkpoint_path is not None and state.best is not previous_best:
                    best_params = state.best.parameters
                    current = state.model.state_dict()
                    state.model.load_state_dict(best_params)
                    self._checkpoint(state, data_split, fold, checkpoint_path)
                    state.model.load_state_dict(current)
                if on_epoch is not None:
                    on_epoch(state)
        finally:
            progress.close()
            if fold_dir is not None:
                self.write_metrics(state, fold_dir / self.metrics_name)

        result = FoldResult(fold=fold, split=data_split, state=state)
        if state.epoch >= 1:
            result.test = select_and_test(state, val, test)
        else:
            logger.info("epochs=0，跳过模型选择与测试")
        return result

    def write_metrics(self, state: TrainState, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        state.history_frame().to_csv(path, index=False, float_format='%.17g', lineterminator='\n')

    def run(self) -> List[FoldResult]:
        splits = kfold(self.dataset.labels, self.config.ratios, self.config.seed, self.config.folds)
        return [self.fit(s, fold) for fold, s in enumerate(splits)]


def summarize_folds(results: Sequence[FoldResult]) -> pd.DataFrame:
    """每折一行，外加 mean 与 std 行"""
    rows = []
    for r in results:
        test = r.test or {}
        rows.append({
            'fold': str(r.fold),
            'best_epoch': test.get('best_epoch', 0),
            'val_auroc': test.get('val_auroc', float('nan')),
            'test_auroc': test.get('test_auroc', float('nan')),
            'test_acc': test.get('test_acc', float('nan')),
        })
    frame = pd.DataFrame(rows, columns=['fold', 'best_epoch', 'val_auroc', 'test_auroc', 'test_acc'])
    numeric = frame[['val_auroc', 'test_auroc', 'test_acc']]
    mean_row = {'fold': 'mean', 'best_epoch': float('nan'), **numeric.mean().to_dict()}
    std_row = {'fold': 'std', 'best_epoch': float('nan'), **numeric.std(ddof=0).to_dict()}
    return pd.concat([frame, pd.DataFrame([mean_row, std_row])], ignore_index=True)

"""
THC 模型服务
随机注意力编码器 + BCluster 分配层 + 层次堆叠 + 逐层 MLP 读出

约定（行向量）：
    S^(i,m) = (X W_Q^m)(X W_K^m)ᵀ / √d_K          C_i × C_i
    X'      = (1/M) Σ_m softmax(S'^(i,m)) X W_V    C_i × d_V
    A^i     = softmax(mean_batch (1/M) Σ_m S'^(i,m) W_A)
    X^{i+1} = (A^i)ᵀ MLP(X')                       C_{i+1} × C_{i+1}
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import settings
from thc_core.exceptions import ConfigError, ContractError, DimensionError, NumericDomainError
from thc_core.models import AssignmentStack, BrainGraph
from thc_core.tensor import (
    Tensor, add, average, matmul, reshape, scale, softmax_rows, tanh, transpose,
)

logger = logging.getLogger(__name__)

TRAIN = 'train'
EVAL = 'eval'
ABLATION_MODES = ('full', 'no_cluster', 'linear_cluster')

GraphInput = Union[np.ndarray, Tensor, BrainGraph]


@dataclass
class MlpParams:
    """单隐层 MLP：tanh 隐层，线性输出"""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        hidden = tanh(add(matmul(x, self.w1), self.b1))
        return add(matmul(hidden, self.w2), self.b2)

    @property
    def in_features(self) -> int:
        return self.w1.shape[0]

    @property
    def out_features(self) -> int:
        return self.w2.shape[1]


@dataclass
class LayerParams:
    """第 i 层参数：把 C_i×C_i 的 X^i 压缩为 C_{i+1}×C_{i+1}"""
    in_size: int
    out_size: int
    w_q: List[Tensor]
    w_k: List[Tensor]
    w_v: Tensor
    mlp: MlpParams
    w_a: Optional[Tensor] = None
    cluster_logits: Optional[Tensor] = None

    @property
    def heads(self) -> int:
        return len(self.w_q)

    @property
    def d_k(self) -> int:
        return self.w_q[0].shape[1]

    @property
    def d_v(self) -> int:
        return self.w_v.shape[1]

    @property
    def clusters(self) -> bool:
        return self.w_a is not None or self.cluster_logits is not None

    def validate(self) -> None:
        if self.heads < 1 or len(self.w_k) != self.heads:
            raise ConfigError(f"注意力头数无效: W_Q {len(self.w_q)} 个, W_K {len(self.w_k)} 个")
        if self.d_k < 1:
            raise ConfigError("d_K 必须 ≥ 1")
        for w in self.w_q + self.w_k:
            if w.shape != (self.in_size, self.d_k):
                raise DimensionError(f"W_Q/W_K 形状 {w.shape} 应为 {(self.in_size, self.d_k)}")
        if self.w_v.shape[0] != self.in_size:
            raise DimensionError(f"W_V 形状 {self.w_v.shape} 与输入规模 {self.in_size} 不一致")
        if self.mlp.in_features != self.d_v or self.mlp.out_features != self.out_size:
            raise DimensionError(
                f"编码器 MLP 应为 {self.d_v}→{self.out_size}，"
                f"实际 {self.mlp.in_features}→{self.mlp.out_features}")
        if self.clusters and self.out_size >= self.in_size:
            raise ConfigError(f"聚类规模必须严格递减: C_i={self.in_size}, C_(i+1)={self.out_size}")
        if self.w_a is not None and self.w_a.shape != (self.in_size, self.out_size):
            raise DimensionError(f"W_A 形状 {self.w_a.shape} 应为 {(self.in_size, self.out_size)}")
        if self.cluster_logits is not None and self.cluster_logits.shape != (self.in_size, self.out_size):
            raise DimensionError(f"线性聚类参数形状 {self.cluster_logits.shape} 应为 {(self.in_size, self.out_size)}")


def validate_schedule(n_nodes: int, schedule: Sequence[int]) -> List[int]:
    schedule = [int(c) for c in schedule]
    if not schedule:
        raise ConfigError("聚类规模不能为空，至少需要一层")
    sizes = [int(n_nodes)] + schedule
    for before, after in zip(sizes, sizes[1:]):
        if after < 1 or after >= before:
            raise ConfigError(f"聚类规模必须严格递减且 ≥ 1: {sizes}")
    return schedule


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _param(values: np.ndarray, name: str) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _mlp(rng: np.random.Generator, n_in: int, n_hidden: int, n_out: int, prefix: str) -> MlpParams:
    return MlpParams(
        w1=_param(_glorot(rng, n_in, n_hidden), f"{prefix}.w1"),
        b1=_param(np.zeros(n_hidden), f"{prefix}.b1"),
        w2=_param(_glorot(rng, n_hidden, n_out), f"{prefix}.w2"),
        b2=_param(np.zeros(n_out), f"{prefix}.b2"),
    )


class ThcModel:
    """THC 模型的全部可学习参数"""

    def __init__(self, n_nodes: int, schedule: Sequence[int], heads: int = 4, d_k: int = 64,
                 d_v: int = 64, readout_hidden: int = 32, n_classes: int = 2,
                 ablation: str = 'full', seed: int = 0):
        if ablation not in ABLATION_MODES:
            raise ConfigError(f"未知的消融模式: {ablation}，可选 {ABLATION_MODES}")
        if heads < 1 or d_k < 1 or d_v < 1 or readout_hidden < 1:
            raise ConfigError("heads、d_k、d_v、readout_hidden 都必须 ≥ 1")
        if n_classes < 2:
            raise ConfigError("类别数至少为 2")
        self.n_nodes = int(n_nodes)
        self.schedule = validate_schedule(n_nodes, schedule)
        self.heads = int(heads)
        self.d_k = int(d_k)
        self.d_v = int(d_v)
        self.readout_hidden = int(readout_hidden)
        self.n_classes = int(n_classes)
        self.ablation = ablation
        self.seed = int(seed)

        rng = np.random.default_rng(self.seed)
        self.layers: List[LayerParams] = []
        self.readouts: List[MlpParams] = []
        for i, (c_in, c_out) in enumerate(self.layer_sizes()):
            prefix = f"layers.{i}"
            layer = LayerParams(
                in_size=c_in,
                out_size=c_out,
                w_q=[_param(_glorot(rng, c_in, self.d_k), f"{prefix}.w_q.{m}") for m in range(self.heads)],
                w_k=[_param(_glorot(rng, c_in, self.d_k), f"{prefix}.w_k.{m}") for m in range(self.heads)],
                w_v=_param(_glorot(rng, c_in, self.d_v), f"{prefix}.w_v"),
                mlp=_mlp(rng, self.d_v, 2 * c_out, c_out, f"{prefix}.mlp"),
            )
            if ablation == 'full':
                layer.w_a = _param(_glorot(rng, c_in, c_out), f"{prefix}.w_a")
            elif ablation == 'linear_cluster':
                layer.cluster_logits = _param(_glorot(rng, c_in, c_out), f"{prefix}.cluster_logits")
            layer.validate()
            self.layers.append(layer)
            self.readouts.append(
                _mlp(rng, c_out * c_out, self.readout_hidden, self.n_classes, f"readouts.{i}"))
        logger.debug(f"初始化 THC 模型: V={self.n_nodes}, 规模={self.schedule}, "
                     f"消融={self.ablation}, 参数量={self.n_parameters()}")

    @property
    def depth(self) -> int:
        return len(self.schedule)

    def layer_sizes(self) -> List[Tuple[int, int]]:
        """每层 (C_i, C_{i+1})；no_cluster 模式下各层保持 V 个节点"""
        if self.ablation == 'no_cluster':
            return [(self.n_nodes, self.n_nodes) for _ in self.schedule]
        sizes = [self.n_nodes] + self.schedule
        return list(zip(sizes, sizes[1:]))

    def hyperparameters(self) -> Dict:
        return {
            'n_nodes': self.n_nodes,
            'schedule': list(self.schedule),
            'heads': self.heads,
            'd_k': self.d_k,
            'd_v': self.d_v,
            'readout_hidden': self.readout_hidden,
            'n_classes': self.n_classes,
            'ablation': self.ablation,
            'seed': self.seed,
        }

    @classmethod
    def from_hyperparameters(cls, params: Dict) -> 'ThcModel':
        return cls(**params)

    def _slots(self) -> Iterator[Tuple[str, object, Union[int, str]]]:
        for i, layer in enumerate(self.layers):
            prefix = f"layers.{i}"
            for m in range(layer.heads):
                yield f"{prefix}.w_q.{m}", layer.w_q, m
            for m in range(layer.heads):
                yield f"{prefix}.w_k.{m}", layer.w_k, m
            yield f"{prefix}.w_v", layer, 'w_v'
            if layer.w_a is not None:
                yield f"{prefix}.w_a", layer, 'w_a'
            if layer.cluster_logits is not None:
                yield f"{prefix}.cluster_logits", layer, 'cluster_logits'
            for key in ('w1', 'b1', 'w2', 'b2'):
                yield f"{prefix}.mlp.{key}", layer.mlp, key
        for i, readout in enumerate(self.readouts):
            for key in ('w1', 'b1', 'w2', 'b2'):
                yield f"readouts.{i}.{key}", readout, key

    @staticmethod
    def _get(owner, key) -> Tensor:
        return owner[key] if isinstance(owner, list) else getattr(owner, key)

    @staticmethod
    def _set(owner, key, value: Tensor) -> None:
        if isinstance(owner, list):
            owner[key] = value
        else:
            setattr(owner, key, value)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(name, self._get(owner, key)) for name, owner, key in self._slots()]

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.values.copy() for name, tensor in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """用新数组替换参数（张量本身只读，所以每次生成新的 Tensor）"""
        expected = [name for name, _, _ in self._slots()]
        missing = set(expected) - set(state)
        unexpected = set(state) - set(expected)
        if missing or unexpected:
            raise ContractError(f"参数名不匹配: 缺少 {sorted(missing)}，多余 {sorted(unexpected)}")
        for name, owner, key in self._slots():
            current = self._get(owner, key)
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != current.shape:
                raise DimensionError(f"参数 {name} 形状 {values.shape} 应为 {current.shape}")
            self._set(owner, key, _param(values, name))


@dataclass
class ForwardTrace:
    """一次前向计算的完整记录"""
    mode: str
    attention: List[List[Tensor]] = field(default_factory=list)
    noisy_attention: List[List[Tensor]] = field(default_factory=list)
    assignment_logits: List[Tensor] = field(default_factory=list)
    assignments: List[Tensor] = field(default_factory=list)
    embeddings: List[Tensor] = field(default_factory=list)
    coarsened: List[Tensor] = field(default_factory=list)
    layer_logits: List[Tensor] = field(default_factory=list)
    logits: Optional[Tensor] = None

    def assignment_stack(self) -> Optional[AssignmentStack]:
        if not self.assignments:
            return None
        return AssignmentStack([a.values for a in self.assignments],
                               [a.shape[1] for a in self.assignments])

    def probabilities(self) -> np.ndarray:
        z = self.logits.values.reshape(-1)
        e = np.exp(z - z.max())
        return e / e.sum()


def attention_logits(x: Tensor, layer: LayerParams, head: int) -> Tensor:
    """S^(i,m) = (X W_Q)(X W_K)ᵀ / √d_K"""
    if x.ndim != 2 or x.shape[0] != x.shape[1] or x.shape[1] != layer.in_size:
        raise DimensionError(f"注意力输入应为 {layer.in_size}×{layer.in_size}，实际 {x.shape}")
    queries = matmul(x, layer.w_q[head])
    keys = matmul(x, layer.w_k[head])
    return scale(matmul(queries, transpose(keys)), 1.0 / math.sqrt(layer.w_q[head].shape[1]))


def logistic_noise(rng, shape: Tuple[int, ...]) -> np.ndarray:
    """logit(U)，U~Uniform(0,1)；恰好为 0 或 1 的样本重新抽取"""
    u = np.array(rng.random(shape), dtype=np.float64)
    bad = (u <= 0.0) | (u >= 1.0)
    while bad.any():
        logger.debug(f"噪声采样命中边界，重新抽取 {int(bad.sum())} 个")
        u[bad] = rng.random(int(bad.sum()))
        bad = (u <= 0.0) | (u >= 1.0)
    return np.log(u / (1.0 - u))


def add_stochastic_noise(s: Tensor, rng, mode: str = TRAIN) -> Tensor:
    """S' = S + log(B/(1−B))，评估模式下原样返回"""
    if mode == EVAL:
        return s
    if rng is None:
        raise ContractError("训练模式需要随机数生成器")
    return add(s, Tensor(logistic_noise(rng, s.shape)))


def propagate(x: Tensor, attention: Sequence[Tensor], layer: LayerParams) -> Tensor:
    """X' = (1/M) Σ_m softmax(S^(i,m)) X W_V"""
    if len(attention) != layer.heads:
        raise ContractError(f"需要 {layer.heads} 个注意力头，实际 {len(attention)} 个")
    values = matmul(x, layer.w_v)
    return average([matmul(softmax_rows(s), values) for s in attention])


def cluster_assignment(attention_batch: Sequence, layer: LayerParams) -> Tuple[Tensor, Tensor]:
    """批内共享的分配矩阵

    Args:
        attention_batch: 每个样本的注意力头列表；也可以直接传一个样本的头列表

    Returns:
        (A, Z)：A = softmax(Z)，Z 为先对头、再对批平均的分配 logits
    """
    if attention_batch and isinstance(attention_batch[0], Tensor):
        attention_batch = [attention_batch]
    if layer.cluster_logits is not None:
        return softmax_rows(layer.cluster_logits), layer.cluster_logits
    if layer.w_a is None:
        raise ContractError("该层没有聚类参数")
    per_sample = []
    for heads in attention_batch:
        if len(heads) != layer.heads:
            raise ContractError(f"需要 {layer.heads} 个注意力头，实际 {len(heads)} 个")
        per_sample.append(matmul(average(list(heads)), layer.w_a))
    logits = average(per_sample)
    return softmax_rows(logits), logits


def pool(h: Tensor, assignment: Tensor) -> Tensor:
    """Aᵀ·H：按软分配把行汇总到簇"""
    if assignment.shape[0] != h.shape[0]:
        raise DimensionError(f"分配矩阵 {assignment.shape} 与嵌入 {h.shape} 行数不一致")
    return matmul(transpose(assignment), h)


def coarsen(x_prime: Tensor, assignment: Tensor, layer: LayerParams) -> Tensor:
    """X^{i+1} = Aᵀ·MLP(X')，结果为 C_{i+1}×C_{i+1}"""
    if layer.out_size >= layer.in_size:
        raise ConfigError(f"聚类规模必须严格递减: C_i={layer.in_size}, C_(i+1)={layer.out_size}")
    if assignment.shape != (layer.in_size, layer.out_size):
        raise DimensionError(f"分配矩阵形状 {assignment.shape} 应为 {(layer.in_size, layer.out_size)}")
    return pool(layer.mlp(x_prime), assignment)


def readout(x_next: Tensor, params: MlpParams) -> Tensor:
    return params(reshape(x_next, (1, x_next.size)))


def _as_input(graph: GraphInput, model: ThcModel) -> Tensor:
    if isinstance(graph, BrainGraph):
        graph = graph.adjacency
    x = graph if isinstance(graph, Tensor) else Tensor(graph)
    if x.shape != (model.n_nodes, model.n_nodes):
        raise DimensionError(f"输入应为 {model.n_nodes}×{model.n_nodes}，实际 {x.shape}")
    if not np.isfinite(x.values).all():
        raise NumericDomainError("输入邻接矩阵包含非有限值")
    return x


def forward_batch(graphs: Sequence[GraphInput], model: ThcModel, mode: str = EVAL,
                  rng: Optional[np.random.Generator] = None) -> List[ForwardTrace]:
    """批量前向：同一批样本共享每层的分配矩阵"""
    if mode not in (TRAIN, EVAL):
        raise ContractError(f"未知的模式: {mode}")
    if not graphs:
        raise ContractError("批次为空")
    xs = [_as_input(g, model) for g in graphs]
    traces = [ForwardTrace(mode=mode) for _ in xs]

    for i, layer in enumerate(model.layers):
        noisy_batch, embeddings = [], []
        for trace, x in zip(traces, xs):
            raw = [attention_logits(x, layer, m) for m in range(layer.heads)]
            noisy = [add_stochastic_noise(s, rng, mode) for s in raw]
            trace.attention.append(raw)
            trace.noisy_attention.append(noisy)
            noisy_batch.append(noisy)
            embeddings.append(propagate(x, noisy, layer))

        if layer.clusters:
            assignment, logits = cluster_assignment(noisy_batch, layer)
            next_xs = [coarsen(e, assignment, layer) for e in embeddings]
        else:
            assignment = logits = None
            next_xs = [layer.mlp(e) for e in embeddings]

        for trace, e, x_next in zip(traces, embeddings, next_xs):
            if assignment is not None:
                trace.assignments.append(assignment)
                trace.assignment_logits.append(logits)
            trace.embeddings.append(e)
            trace.coarsened.append(x_next)
            trace.layer_logits.append(readout(x_next, model.readouts[i]))
        xs = next_xs

    for trace in traces:
        trace.logits = average(trace.layer_logits)
    return traces


def forward(graph: GraphInput, model: ThcModel, mode: str = EVAL,
            rng: Optional[np.random.Generator] = None) -> ForwardTrace:
    """单样本前向（批大小为 1）"""
    return forward_batch([graph], model, mode, rng)[0]


def predict_proba(model: ThcModel, graphs: Sequence[GraphInput], workers: Optional[int] = None) -> np.ndarray:
    """评估模式下每个样本属于类别 1 的概率，结果顺序与输入一致"""
    workers = settings.WORKER_COUNT if workers is None else workers

    def _one(graph):
        return forward(graph, model, EVAL).probabilities()[1]

    if workers <= 1 or len(graphs) <= 1:
        return np.array([_one(g) for g in graphs])
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return np.array(list(executor.map(_one, graphs)))

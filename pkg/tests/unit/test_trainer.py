"""
训练服务测试：划分、优化器、训练循环、模型选择、全局分配
"""
import math

import numpy as np
import pandas as pd
import pytest

from data_processing.services import PlantedGenerator, PlantedSpec
from optimization.config import TrainConfig
from optimization.optimizer import Adam
from optimization.services import (
    DataSplit, FoldResult, Snapshot, ThcTrainer, TrainState, ablation_forward, ablation_model, finalize_assignment,
    kfold, make_batches, select_and_test, split, split_sizes, summarize_folds, train_epoch,
)
from thc_core.exceptions import ConfigError, ContractError, NonFiniteLossError
from thc_core.models import BrainGraph
from thc_core.services.objective import LossBreakdown, LossWeights, total_loss
from thc_core.services.thc_model import EVAL, TRAIN, ThcModel, forward
from thc_core.tensor import Tape, Tensor, backward

pytestmark = pytest.mark.unit


@pytest.fixture
def tiny_config():
    return TrainConfig(schedule=[4, 2], heads=1, d_k=4, d_v=4, readout_hidden=4,
                       epochs=2, batch_size=8, lr=1e-3, seed=11)


def _state(config, dataset, seed=0):
    return ThcTrainer(config, dataset).build_state(seed)


def _batches(dataset, indices, batch_size, rng):
    return [dataset.subset(b) for b in make_batches(indices, batch_size, rng)]


# ---- 划分 ----

def test_split_sizes_largest_remainder():
    assert split_sizes(10, (0.7, 0.2, 0.1)) == [7, 2, 1]
    assert sum(split_sizes(23, (0.7, 0.2, 0.1))) == 23


def test_split_is_a_partition():
    labels = [0, 1] * 5
    s = split(labels, (0.7, 0.2, 0.1), seed=0)
    assert (len(s.train), len(s.val), len(s.test)) == (7, 2, 1)
    assert sorted(s.train + s.val + s.test) == list(range(10))


def test_split_is_deterministic_and_seeded():
    labels = [0, 1] * 20
    assert split(labels, seed=3) == split(labels, seed=3)
    assert split(labels, seed=3).train != split(labels, seed=4).train


def test_split_is_stratified():
    labels = np.array([0, 1] * 10)
    s = split(labels, (0.7, 0.2, 0.1), seed=5)
    assert np.bincount(labels[list(s.train)]).tolist() == [7, 7]
    assert np.bincount(labels[list(s.val)]).tolist() == [2, 2]
    assert np.bincount(labels[list(s.test)]).tolist() == [1, 1]


def test_split_too_small_raises():
    with pytest.raises(ConfigError):
        split([0, 1, 0], (0.7, 0.2, 0.1))


def test_split_rejects_bad_ratios():
    with pytest.raises(ConfigError):
        split([0, 1] * 5, (0.5, 0.2, 0.2))


def test_kfold_uses_consecutive_seeds():
    labels = [0, 1] * 10
    folds = kfold(labels, (0.7, 0.2, 0.1), seed=2, folds=3)
    assert [f.seed for f in folds] == [2, 3, 4]
    assert folds[1] == split(labels, (0.7, 0.2, 0.1), 3)


def test_split_serialization():
    s = split([0, 1] * 5, seed=1)
    assert DataSplit.from_dict(s.to_dict()) == s


def test_make_batches_cover_indices(rng):
    batches = make_batches(range(10), 4, rng)
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(sum(batches, [])) == list(range(10))


# ---- 优化器 ----

def test_adam_zero_learning_rate_keeps_parameters(rng):
    params = {'w': rng.normal(size=(3, 2))}
    updated = Adam(lr=0.0).step(params, {'w': rng.normal(size=(3, 2))})
    np.testing.assert_array_equal(updated['w'], params['w'])


def test_adam_first_step_moves_by_learning_rate():
    """第一步偏差校正后 m̂/√v̂ = g/|g|"""
    p = np.array([1.0, -2.0])
    g = np.array([0.5, -3.0])
    updated = Adam(lr=0.1).step({'p': p}, {'p': g})['p']
    np.testing.assert_allclose(updated, p - 0.1 * np.sign(g), rtol=1e-7)


def test_adam_does_not_mutate_input():
    p = np.ones(3)
    Adam(lr=0.1).step({'p': p}, {'p': np.ones(3)})
    np.testing.assert_array_equal(p, np.ones(3))


def test_adam_minimizes_quadratic_bowl():
    """f(p) = ||p − c||²，lr 0.05、1000 步"""
    c = np.array([0.3, 0.1, -0.4])
    params = {'p': np.array([1.0, -2.0, 0.5])}
    adam = Adam(lr=0.05)
    for _ in range(1000):
        params = adam.step(params, {'p': 2.0 * (params['p'] - c)})
    np.testing.assert_allclose(params['p'], c, atol=1e-5)


def test_adam_rejects_mismatched_names():
    with pytest.raises(ContractError):
        Adam().step({'a': np.ones(1)}, {'b': np.ones(1)})


def test_adam_state_round_trip():
    adam = Adam(lr=0.1)
    adam.step({'p': np.ones(2)}, {'p': np.ones(2)})
    other = Adam(lr=0.1)
    other.load_state_dict(adam.state_dict())
    a = adam.step({'p': np.ones(2)}, {'p': np.ones(2)})
    b = other.step({'p': np.ones(2)}, {'p': np.ones(2)})
    np.testing.assert_array_equal(a['p'], b['p'])


def test_model_loss_descends_with_adam(small_model, rng):
    """评估模式下对单个样本做梯度下降，损失下降"""
    m = rng.normal(size=(24, 24))
    x = (m + m.T) / 2
    adam = Adam(lr=1e-2)
    losses = []
    for _ in range(10):
        named = small_model.named_parameters()
        with Tape():
            loss = total_loss(forward(x, small_model, EVAL), 1, LossWeights(0.0, 0.0)).total
            grads = backward(loss, [t for _, t in named])
        losses.append(loss.item())
        small_model.load_state_dict(adam.step({n: t.values for n, t in named}, {n: grads[t] for n, t in named}))
    assert losses[-1] < losses[0]


# ---- 训练循环与模型选择 ----

def test_train_epoch_records_history(tiny_config, tiny_dataset):
    state = _state(tiny_config, tiny_dataset)
    rng = np.random.default_rng(0)
    s = split(tiny_dataset.labels, seed=0)
    train_epoch(state, _batches(tiny_dataset, s.train, 8, rng), tiny_config, rng, tiny_dataset.subset(s.val))
    assert state.epoch == 1
    record = state.history[0]
    assert math.isfinite(record.total)
    assert record.total == pytest.approx(record.ce + record.sparsity + record.entropy, rel=1e-12)
    assert list(state.history_frame().columns)[0] == 'epoch'


def test_zero_learning_rate_epoch_keeps_parameters(tiny_config, tiny_dataset):
    config = tiny_config.with_overrides(lr=0.0)
    state = _state(config, tiny_dataset)
    before = state.model.state_dict()
    rng = np.random.default_rng(1)
    train_epoch(state, _batches(tiny_dataset, range(12), 4, rng), config, rng)
    for name, values in state.model.state_dict().items():
        np.testing.assert_array_equal(values, before[name])


def test_tie_keeps_earliest_epoch(tiny_config, tiny_dataset):
    """验证集只有一个类别时 AUROC 为 NaN，各 epoch 并列，保留第一个"""
    state = _state(tiny_config, tiny_dataset)
    rng = np.random.default_rng(2)
    val = [g for g in tiny_dataset.graphs if g.label == 0][:3]
    for _ in range(3):
        train_epoch(state, _batches(tiny_dataset, range(8), 4, rng), tiny_config, rng, val)
    assert state.best.epoch == 1
    assert all(math.isnan(r.val_auroc) for r in state.history)


def test_best_snapshot_has_maximal_validation_auroc(tiny_config, tiny_dataset):
    state = _state(tiny_config, tiny_dataset)
    rng = np.random.default_rng(3)
    s = split(tiny_dataset.labels, seed=1)
    val = tiny_dataset.subset(s.val)
    for _ in range(4):
        train_epoch(state, _batches(tiny_dataset, s.train, 8, rng), tiny_config, rng, val)
    scores = [r.val_auroc for r in state.history]
    best = max(scores)
    assert state.best.val_auroc == best
    assert state.best.epoch == scores.index(best) + 1


def test_snapshot_is_read_only(tiny_config, tiny_dataset):
    state = _state(tiny_config, tiny_dataset)
    rng = np.random.default_rng(4)
    train_epoch(state, _batches(tiny_dataset, range(8), 8, rng), tiny_config, rng)
    values = next(iter(state.best.parameters.values()))
    with pytest.raises(ValueError):
        values[...] = 0.0


def test_select_and_test_restores_best(tiny_config, tiny_dataset):
    state = _state(tiny_config, tiny_dataset)
    rng = np.random.default_rng(5)
    s = split(tiny_dataset.labels, seed=2)
    val, test = tiny_dataset.subset(s.val), tiny_dataset.subset(s.test)
    for _ in range(2):
        train_epoch(state, _batches(tiny_dataset, s.train, 8, rng), tiny_config, rng, val)
    result = select_and_test(state, val, test)
    assert result['best_epoch'] == state.best.epoch
    for name, values in state.model.state_dict().items():
        np.testing.assert_array_equal(values, state.best.parameters[name])
    assert 0.0 <= result['test_acc'] <= 1.0


def test_select_before_training_raises(tiny_config, tiny_dataset):
    state = _state(tiny_config, tiny_dataset)
    with pytest.raises(ContractError):
        select_and_test(state, tiny_dataset.graphs[:2], tiny_dataset.graphs[2:4])


def test_non_finite_loss_raises(tiny_config, tiny_dataset, monkeypatch):
    def broken_loss(traces, labels, weights=None):
        nan = Tensor(float('nan'))
        return LossBreakdown(ce=nan, sparsity=Tensor(0.0), entropy=Tensor(0.0), total=nan,
                             weights=LossWeights())

    monkeypatch.setattr('optimization.services.batch_loss', broken_loss)
    state = _state(tiny_config, tiny_dataset)
    rng = np.random.default_rng(6)
    with pytest.raises(NonFiniteLossError) as exc:
        train_epoch(state, _batches(tiny_dataset, range(8), 4, rng), tiny_config, rng)
    assert exc.value.batch_index == 0
    assert exc.value.component == 'ce'


def _scripted_validation(monkeypatch, scores):
    """让每个 epoch 的验证评估依次返回给定的 AUROC"""
    remaining = iter(scores)

    def scripted(model, graphs):
        return {'auroc': next(remaining), 'accuracy': 0.5}

    monkeypatch.setattr('optimization.services.evaluate', scripted)


def _run_epochs(config, dataset, n_epochs):
    state = _state(config, dataset)
    rng = np.random.default_rng(7)
    for _ in range(n_epochs):
        train_epoch(state, _batches(dataset, range(8), 4, rng), config, rng, dataset.graphs[8:12])
    return state


def test_improving_validation_selects_last_epoch(tiny_config, tiny_dataset, monkeypatch):
    _scripted_validation(monkeypatch, [0.55, 0.6, 0.7, 0.9])
    state = _run_epochs(tiny_config, tiny_dataset, 4)
    assert state.best.epoch == 4
    assert state.best.val_auroc == 0.9


def test_equal_validation_scores_keep_earliest_epoch(tiny_config, tiny_dataset, monkeypatch):
    """第 2、3 个 epoch 的验证 AUROC 相同，选第 2 个"""
    _scripted_validation(monkeypatch, [0.7, 0.85, 0.85, 0.8])
    state = _run_epochs(tiny_config, tiny_dataset, 4)
    assert state.best.epoch == 2
    assert [r.val_auroc for r in state.history] == [0.7, 0.85, 0.85, 0.8]


def _separating_model(n_nodes):
    """概率只取决于邻接矩阵整体均值的符号：均值为正判为类别 1

    注意力 logits 恒为 0，X' 每行都是整体均值 m，编码器输出 tanh(m)，
    汇总后读出 logits 为 [−h, h]，h = tanh(V·tanh(m))。
    """
    model = ThcModel(n_nodes, [1], heads=1, d_k=1, d_v=1, readout_hidden=1, seed=0)
    state = model.state_dict()
    state['layers.0.w_q.0'] = np.zeros((n_nodes, 1))
    state['layers.0.w_k.0'] = np.zeros((n_nodes, 1))
    state['layers.0.w_v'] = np.full((n_nodes, 1), 1.0 / n_nodes)
    state['layers.0.mlp.w1'] = np.array([[1.0, 0.0]])
    state['layers.0.mlp.b1'] = np.zeros(2)
    state['layers.0.mlp.w2'] = np.array([[1.0], [0.0]])
    state['layers.0.mlp.b2'] = np.zeros(1)
    state['readouts.0.w1'] = np.ones((1, 1))
    state['readouts.0.b1'] = np.zeros(1)
    state['readouts.0.w2'] = np.array([[-1.0, 1.0]])
    state['readouts.0.b2'] = np.zeros(2)
    model.load_state_dict(state)
    return model


def _separable_graphs(rng, n_per_class, n_nodes=6):
    graphs = []
    for label, offset in ((0, -0.5), (1, 0.5)):
        for _ in range(n_per_class):
            noise = rng.normal(scale=0.1, size=(n_nodes, n_nodes))
            graphs.append(BrainGraph(offset + (noise + noise.T) / 2, label))
    return graphs


def test_select_and_test_on_separable_data(rng):
    """线性可分的玩具数据：测试 AUROC 与准确率都为 1"""
    model = _separating_model(6)
    state = TrainState(model=model, optimizer=Adam(), epoch=1, best=Snapshot.capture(model, 1, 1.0))
    result = select_and_test(state, _separable_graphs(rng, 3), _separable_graphs(rng, 5))
    assert result['best_epoch'] == 1
    assert result['test_auroc'] == 1.0
    assert result['test_acc'] == 1.0


@pytest.mark.slow
def test_training_cross_entropy_falls_on_synthetic_set():
    """200 个样本、50 个 epoch 后训练交叉熵低于 0.3·ln 2"""
    spec = PlantedSpec(n_nodes=12, n_fine=4, n_coarse=2, within=0.8, between=0.2, sigma=0.05,
                       class_shift=0.5, effect_blocks=[0], n_samples=200, seed=0)
    dataset = PlantedGenerator(spec, workers=1).generate()
    config = TrainConfig(schedule=[4, 2], heads=2, d_k=8, d_v=8, readout_hidden=16,
                         epochs=50, batch_size=16, lr=5e-3, seed=0)
    state = ThcTrainer(config, dataset).run()[0].state
    assert state.history[-1].ce < 0.3 * math.log(2)


# ---- 消融 ----

def test_ablation_forward_no_cluster_keeps_full_resolution(tiny_config, tiny_dataset):
    model = _state(tiny_config, tiny_dataset).model
    trace = ablation_forward(tiny_dataset.graphs[0], model, 'no_cluster')
    assert trace.assignments == [] and trace.assignment_stack() is None
    assert [x.shape for x in trace.coarsened] == [(12, 12), (12, 12)]
    assert len(trace.layer_logits) == model.depth
    assert trace.logits.shape == (1, 2)


def test_ablation_forward_linear_cluster_ignores_input(tiny_config, tiny_dataset):
    """linear_cluster 的分配矩阵与输入无关，两个不同样本逐位相同"""
    model = _state(tiny_config, tiny_dataset).model
    first = ablation_forward(tiny_dataset.graphs[0], model, 'linear_cluster')
    second = ablation_forward(tiny_dataset.graphs[1], model, 'linear_cluster', TRAIN, np.random.default_rng(0))
    assert len(first.assignments) == 2
    for a, b in zip(first.assignments, second.assignments):
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_allclose(a.values.sum(axis=1), 1.0, atol=1e-12)


def test_ablation_forward_shares_encoder_weights(tiny_config, tiny_dataset):
    model = _state(tiny_config, tiny_dataset).model
    graph = tiny_dataset.graphs[2]
    full = forward(graph, model, EVAL)
    linear = ablation_forward(graph, model, 'linear_cluster')
    no_cluster = ablation_forward(graph, model, 'no_cluster')
    np.testing.assert_array_equal(linear.attention[0][0].values, full.attention[0][0].values)
    np.testing.assert_array_equal(linear.embeddings[0].values, full.embeddings[0].values)
    np.testing.assert_array_equal(no_cluster.attention[0][0].values, full.attention[0][0].values)


def test_ablation_forward_same_mode_uses_model(tiny_config, tiny_dataset):
    model = _state(tiny_config, tiny_dataset).model
    before = model.state_dict()
    assert ablation_model(model, 'full') is model
    trace = ablation_forward(tiny_dataset.graphs[3], model, 'full')
    np.testing.assert_array_equal(trace.logits.values, forward(tiny_dataset.graphs[3], model, EVAL).logits.values)
    ablation_forward(tiny_dataset.graphs[3], model, 'no_cluster')
    for name, values in model.state_dict().items():
        np.testing.assert_array_equal(values, before[name])


def test_ablation_forward_rejects_unknown_mode(tiny_config, tiny_dataset):
    model = _state(tiny_config, tiny_dataset).model
    with pytest.raises(ConfigError):
        ablation_forward(tiny_dataset.graphs[0], model, 'eval')
    with pytest.raises(ContractError):
        ablation_forward(tiny_dataset.graphs[0], model, 'no_cluster', 'inference')


# ---- 全局分配 ----

def test_finalize_assignment_single_sample(tiny_config, tiny_dataset):
    model = _state(tiny_config, tiny_dataset).model
    final = finalize_assignment(model, tiny_dataset.graphs[:1])
    direct = forward(tiny_dataset.graphs[0], model, EVAL).assignments
    for a, b in zip(final.stack.assignments, direct):
        np.testing.assert_array_equal(a, b.values)
    assert final.flat.shape == (12, 2)
    np.testing.assert_allclose(final.flat.sum(axis=1), 1.0, atol=1e-12)


def test_finalize_assignment_duplicates_match_single(tiny_config, tiny_dataset):
    model = _state(tiny_config, tiny_dataset).model
    single = finalize_assignment(model, tiny_dataset.graphs[:1])
    repeated = finalize_assignment(model, tiny_dataset.graphs[:1] * 3)
    np.testing.assert_allclose(repeated.flat, single.flat, atol=1e-12)


def test_finalize_assignment_single_cluster(tiny_dataset):
    model = ThcModel(12, [1], heads=1, d_k=2, d_v=2, readout_hidden=4, seed=0)
    final = finalize_assignment(model, tiny_dataset.graphs)
    np.testing.assert_array_equal(final.flat, np.ones((12, 1)))
    assert final.partitions[0].n_clusters == 1


def test_hard_partitions_are_valid(tiny_config, tiny_dataset):
    model = _state(tiny_config, tiny_dataset).model
    final = finalize_assignment(model, tiny_dataset.graphs)
    assert [p.n_nodes for p in final.partitions] == [12, 4]
    for p, clusters in zip(final.partitions, [4, 2]):
        assert 1 <= p.n_clusters <= clusters
    assert final.node_partition().n_nodes == 12


def test_finalize_rejects_no_cluster(tiny_dataset):
    model = ThcModel(12, [4], heads=1, d_k=2, d_v=2, readout_hidden=4, ablation='no_cluster')
    with pytest.raises(ContractError):
        finalize_assignment(model, tiny_dataset.graphs)


# ---- 完整实验 ----

def test_trainer_zero_epochs_writes_initial_checkpoint(tmp_path, tiny_config, tiny_dataset):
    config = tiny_config.with_overrides(epochs=0)
    results = ThcTrainer(config, tiny_dataset, tmp_path).run()
    assert results[0].test is None
    assert (tmp_path / 'checkpoint.json').exists()
    assert (tmp_path / 'metrics.csv').read_text().strip() == ','.join(
        ['epoch', 'ce', 'sparsity', 'entropy', 'total', 'train_auroc', 'val_auroc', 'val_acc'])


def test_trainer_is_deterministic(tmp_path, tiny_config, tiny_dataset):
    ThcTrainer(tiny_config, tiny_dataset, tmp_path / 'a').run()
    ThcTrainer(tiny_config, tiny_dataset, tmp_path / 'b').run()
    for name in ('checkpoint.json', 'metrics.csv'):
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()
    metrics = pd.read_csv(tmp_path / 'a' / 'metrics.csv')
    assert metrics['epoch'].tolist() == [1, 2]


def test_trainer_folds_use_subdirectories(tmp_path, tiny_config, tiny_dataset):
    config = tiny_config.with_overrides(folds=2, epochs=1)
    results = ThcTrainer(config, tiny_dataset, tmp_path).run()
    assert [r.split.seed for r in results] == [11, 12]
    assert (tmp_path / 'fold_0' / 'checkpoint.json').exists()
    assert (tmp_path / 'fold_1' / 'metrics.csv').exists()
    summary = summarize_folds(results)
    assert summary['fold'].tolist() == ['0', '1', 'mean', 'std']


def test_summarize_folds_statistics():
    def result(fold, auroc):
        return FoldResult(fold=fold, split=None, state=None,
                          test={'best_epoch': 1, 'val_auroc': 0.5, 'test_auroc': auroc, 'test_acc': 0.5})

    summary = summarize_folds([result(0, 0.6), result(1, 0.8)])
    assert summary.iloc[2]['test_auroc'] == pytest.approx(0.7)
    assert summary.iloc[3]['test_auroc'] == pytest.approx(0.1)


def test_train_state_defaults(tiny_config, tiny_dataset):
    state = _state(tiny_config, tiny_dataset)
    assert isinstance(state, TrainState)
    assert state.epoch == 0 and state.best is None

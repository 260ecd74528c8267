"""
评估指标测试：与暴力计算和 scikit-learn 的参考实现对照
"""
import itertools
import math

import numpy as np
import pytest
from sklearn.metrics import adjusted_mutual_info_score, homogeneity_score, normalized_mutual_info_score

from evaluation.metrics import (
    accuracy, auroc, cluster_report, conditional_entropy, contingency, entropy, expected_mutual_information,
    homogeneity, homogeneity_standard, mutual_information, nmi, nmi_literal, purity,
)
from thc_core.exceptions import ContractError, MetricError
from thc_core.models import Partition

pytestmark = pytest.mark.unit


def _brute_entropy(labels):
    n = len(labels)
    return -sum((c / n) * math.log(c / n) for c in np.unique(labels, return_counts=True)[1])


def _brute_mi(c, t):
    n = len(c)
    total = 0.0
    for a in np.unique(c):
        for b in np.unique(t):
            joint = np.sum((c == a) & (t == b)) / n
            if joint > 0:
                total += joint * math.log(joint / ((np.sum(c == a) / n) * (np.sum(t == b) / n)))
    return total


def _brute_purity(c, t):
    return sum(max(np.sum((c == a) & (t == b)) for b in np.unique(t)) for a in np.unique(c)) / len(c)


@pytest.fixture
def random_pair(rng):
    c = rng.integers(0, 4, size=40)
    t = rng.integers(0, 3, size=40)
    return c, t


def test_contingency_orientation():
    table = contingency([0, 0, 1], [1, 0, 0])
    np.testing.assert_array_equal(table, [[1, 1], [1, 0]])


def test_contingency_length_mismatch():
    with pytest.raises(ContractError):
        contingency([0, 1], [0, 1, 1])


def test_entropy_and_mi_match_brute_force(random_pair):
    c, t = random_pair
    assert entropy(np.bincount(c)) == pytest.approx(_brute_entropy(c), rel=1e-12)
    assert mutual_information(c, t) == pytest.approx(_brute_mi(c, t), rel=1e-10, abs=1e-14)
    assert conditional_entropy(c, t) == pytest.approx(_brute_entropy(c) - _brute_mi(c, t), rel=1e-10)


def test_purity_matches_brute_force(random_pair):
    c, t = random_pair
    assert purity(c, t) == pytest.approx(_brute_purity(c, t), rel=1e-12)


def test_identical_partitions_are_perfect():
    labels = np.repeat([0, 1, 2], 5)
    assert purity(labels, labels) == 1.0
    assert nmi(labels, labels) == pytest.approx(1.0, abs=1e-12)
    assert homogeneity(labels, labels) == pytest.approx(1.0, abs=1e-12)


def test_single_cluster_purity_is_one_over_q():
    """一个预测簇对 q 个等大真实类别，纯度为 1/q"""
    q = 4
    truth = np.repeat(np.arange(q), 3)
    assert purity(np.zeros(truth.size, dtype=int), truth) == pytest.approx(1 / q)


def test_singletons_have_purity_one():
    truth = np.repeat([0, 1], 4)
    assert purity(np.arange(8), truth) == 1.0


def test_metrics_invariant_to_relabeling(random_pair, rng):
    c, t = random_pair
    relabel = rng.permutation(4)[c] + 10
    for metric in (purity, nmi, homogeneity, homogeneity_standard, nmi_literal):
        assert metric(relabel, t) == pytest.approx(metric(c, t), rel=1e-12, abs=1e-14)


def test_nmi_matches_sklearn(random_pair):
    c, t = random_pair
    expected = normalized_mutual_info_score(t, c, average_method='arithmetic')
    assert nmi(c, t) == pytest.approx(expected, rel=1e-10)


def test_nmi_both_single_cluster_is_one():
    assert nmi([0, 0, 0], [5, 5, 5]) == 1.0


def test_homogeneity_standard_matches_sklearn(random_pair):
    c, t = random_pair
    assert homogeneity_standard(c, t) == pytest.approx(homogeneity_score(t, c), rel=1e-10)


def test_homogeneity_literal_formula(random_pair):
    """1 − H(C|T)/H(C)"""
    c, t = random_pair
    expected = 1 - (_brute_entropy(c) - _brute_mi(c, t)) / _brute_entropy(c)
    assert homogeneity(c, t) == pytest.approx(expected, rel=1e-10)


def test_homogeneity_single_predicted_cluster():
    assert homogeneity([0, 0, 0, 0], [0, 1, 0, 1]) == 1.0


def test_expected_mutual_information_matches_sklearn_ami(random_pair):
    """用 AMI = (MI − EMI)/(mean H − EMI) 反推对照"""
    c, t = random_pair
    table = contingency(c, t)
    emi = expected_mutual_information(table)
    mi = mutual_information(c, t)
    mean_h = (_brute_entropy(c) + _brute_entropy(t)) / 2
    expected = adjusted_mutual_info_score(t, c, average_method='arithmetic')
    assert (mi - emi) / (mean_h - emi) == pytest.approx(expected, rel=1e-8)


def test_expected_mutual_information_brute_force():
    """小表格上枚举所有标签置换"""
    c = np.array([0, 0, 1, 1, 1])
    t = np.array([0, 1, 1, 0, 0])
    perms = list(itertools.permutations(range(5)))
    brute = np.mean([_brute_mi(c, t[list(p)]) for p in perms])
    assert expected_mutual_information(contingency(c, t)) == pytest.approx(brute, rel=1e-10)


def test_nmi_literal_is_mi_minus_expectation(random_pair):
    c, t = random_pair
    table = contingency(c, t)
    assert nmi_literal(c, t) == pytest.approx(mutual_information(c, t) - expected_mutual_information(table),
                                              rel=1e-12, abs=1e-14)


def test_cluster_report_row(random_pair):
    c, t = random_pair
    row = cluster_report(Partition.from_labels(c), Partition.from_labels(t)).as_row()
    assert set(row) == {'purity', 'nmi', 'nmi_literal', 'homogeneity', 'homogeneity_std', 'n_clusters'}
    assert row['n_clusters'] == np.unique(c).size


def _pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auroc_matches_pairwise_count(rng):
    scores = rng.integers(0, 5, size=30) / 4.0
    labels = np.array([0, 1] * 15)
    assert auroc(scores, labels) == pytest.approx(_pairwise_auroc(scores, labels), rel=1e-12)


def test_auroc_perfect_and_inverted():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_auroc_all_ties_is_half():
    assert auroc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5


def test_auroc_single_class_raises():
    with pytest.raises(MetricError):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_rejects_bad_labels_and_lengths():
    with pytest.raises(ContractError):
        auroc([0.1, 0.2], [0, 2])
    with pytest.raises(ContractError):
        auroc([0.1], [0, 1])


def test_accuracy():
    assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75
    with pytest.raises(ContractError):
        accuracy([], [])

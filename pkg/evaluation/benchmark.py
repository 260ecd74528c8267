"""
运行时间基准：聚类后的第二层与未聚类的全分辨率层对比
"""
import logging
import time
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from thc_core.exceptions import ConfigError
from thc_core.services.objective import LossWeights, total_loss
from thc_core.services.thc_model import TRAIN, ThcModel, forward
from thc_core.tensor import Tape, backward

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ['n', 'k', 'd', 'clustered_seconds', 'unclustered_seconds', 'ratio']


def _random_input(rng: np.random.Generator, size: int) -> np.ndarray:
    x = rng.normal(size=(size, size))
    return (x + x.T) / 2.0


def time_layer(model: ThcModel, x: np.ndarray, repeats: int, seed: int) -> float:
    """一次训练模式前向 + 反向的中位耗时（秒）"""
    rng = np.random.default_rng(seed)
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        with Tape():
            trace = forward(x, model, TRAIN, rng)
            loss = total_loss(trace, 0, LossWeights())
            backward(loss.total, model.parameters())
        timings.append(time.perf_counter() - start)
    return float(np.median(timings))


def bench_pair(n: int, k: int, d: int, heads: int = 4, repeats: int = 3, seed: int = 0) -> Dict[str, float]:
    """k×k 输入的聚类层（即聚类后的第二层）对比 n×n 输入的未聚类层"""
    if not 2 <= k <= n:
        raise ConfigError(f"基准配置无效: 需要 2 ≤ k ≤ n，实际 n={n}, k={k}")
    rng = np.random.default_rng(seed)
    clustered = ThcModel(k, [max(1, k // 5)], heads=heads, d_k=d, d_v=d, seed=seed)
    unclustered = ThcModel(n, [max(1, n // 5)], heads=heads, d_k=d, d_v=d, ablation='no_cluster', seed=seed)
    clustered_seconds = time_layer(clustered, _random_input(rng, k), repeats, seed)
    unclustered_seconds = time_layer(unclustered, _random_input(rng, n), repeats, seed)
    row = {
        'n': n, 'k': k, 'd': d,
        'clustered_seconds': clustered_seconds,
        'unclustered_seconds': unclustered_seconds,
        'ratio': unclustered_seconds / clustered_seconds if clustered_seconds > 0 else float('inf'),
    }
    logger.info(f"bench n={n} k={k} d={d}: 聚类 {clustered_seconds:.4f}s, 未聚类 {unclustered_seconds:.4f}s, "
                f"比值 {row['ratio']:.2f}")
    return row


def run_benchmark(sizes: Sequence[int], schedule: Sequence[int], dims: Sequence[int],
                  heads: int = 4, repeats: int = 3, seed: int = 0) -> pd.DataFrame:
    rows: List[Dict[str, float]] = []
    for n in sizes:
        for k in schedule:
            if k > n:
                logger.warning(f"跳过 k={k} > n={n}")
                continue
            for d in dims:
                rows.append(bench_pair(int(n), int(k), int(d), heads, repeats, seed))
    return pd.DataFrame(rows, columns=BENCH_COLUMNS)


def log_log_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """log y 对 log x 的最小二乘斜率"""
    xs = np.log(np.asarray(xs, dtype=np.float64))
    ys = np.log(np.asarray(ys, dtype=np.float64))
    if xs.size < 2 or np.ptp(xs) == 0:
        return float('nan')
    return float(np.polyfit(xs, ys, 1)[0])


def dimension_slopes(frame: pd.DataFrame) -> pd.DataFrame:
    """每个 (n, k) 下未聚类层耗时随 d 的对数斜率"""
    rows = []
    for (n, k), group in frame.groupby(['n', 'k'], sort=True):
        rows.append({'n': n, 'k': k,
                     'slope_clustered': log_log_slope(group['d'], group['clustered_seconds']),
                     'slope_unclustered': log_log_slope(group['d'], group['unclustered_seconds'])})
    return pd.DataFrame(rows, columns=['n', 'k', 'slope_clustered', 'slope_unclustered'])

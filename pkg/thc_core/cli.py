"""
THC 命令行入口：generate / train / evaluate / bench

退出码：0 成功；2 用法、解析或配置错误；3 运行时、数值或契约错误以及被中断的运行
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

from config import settings
from data_processing.services import PRESETS, PlantedGenerator, PlantedSpec
from evaluation.benchmark import dimension_slopes, run_benchmark
from evaluation.services import ClusterEvaluator
from optimization.config import TrainConfig, parse_schedule
from optimization.services import (
    DataSplit, ThcTrainer, evaluate, finalize_assignment, split, summarize_folds,
)
from thc_core.exceptions import ConfigError, ContractError, ThcError
from thc_core.services.thc_model import ABLATION_MODES
from thc_core.storage import RunManifest, atomic_write, load_checkpoint, load_dataset, save_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的整数: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='thc', description='Transformer-based hierarchical clustering')
    commands = parser.add_subparsers(dest='command', required=True)

    gen = commands.add_parser('generate', help='生成合成种植社区数据集')
    gen.add_argument('--spec', type=Path, help='YAML 生成规格文件')
    gen.add_argument('--preset', choices=sorted(PRESETS), help='内置生成预设')
    gen.add_argument('--out', type=Path, required=True, help='数据集输出目录')
    gen.add_argument('--samples', type=int, help='覆盖样本数')
    gen.add_argument('--seed', type=int, help='覆盖随机种子')

    train = commands.add_parser('train', help='训练 THC 模型')
    train.add_argument('--data', type=Path, help='数据集目录')
    train.add_argument('--config', type=Path, help='YAML 训练配置')
    train.add_argument('--out', type=Path, help='输出目录')
    train.add_argument('--manifest', type=Path, help='按已有运行清单重放')
    train.add_argument('--epochs', type=int)
    train.add_argument('--seed', type=int)
    train.add_argument('--schedule', help='聚类规模，例如 20,4 或预设 small/large')
    train.add_argument('--ablation', choices=ABLATION_MODES)
    train.add_argument('--folds', type=int)
    train.add_argument('--lr', type=float)
    train.add_argument('--batch-size', type=int, dest='batch_size')
    train.add_argument('--print-config', action='store_true', help='打印生效配置后退出')

    ev = commands.add_parser('evaluate', help='测试集评估与聚类报告')
    ev.add_argument('--checkpoint', type=Path, required=True)
    ev.add_argument('--data', type=Path, required=True)
    ev.add_argument('--out', type=Path, required=True)

    bench = commands.add_parser('bench', help='聚类层与未聚类层的运行时间对比')
    bench.add_argument('--sizes', type=_int_list, default=[360])
    bench.add_argument('--schedule', type=_int_list, default=[20])
    bench.add_argument('--dims', type=_int_list, default=[64])
    bench.add_argument('--heads', type=int, default=4)
    bench.add_argument('--repeats', type=int, default=3)
    bench.add_argument('--seed', type=int, default=0)
    bench.add_argument('--out', type=Path, help='CSV 输出路径')
    return parser


def cmd_generate(args) -> int:
    if args.spec is None and args.preset is None:
        raise ConfigError("需要 --spec 或 --preset")
    if args.spec is not None:
        spec = PlantedSpec.from_yaml(args.spec)
    else:
        spec = PlantedSpec.from_dict({'preset': args.preset})
    overrides = {k: v for k, v in (('n_samples', args.samples), ('seed', args.seed)) if v is not None}
    if overrides:
        spec = PlantedSpec.from_dict({**spec.to_dict(), **overrides})
    dataset = PlantedGenerator(spec).generate()
    save_dataset(dataset, args.out)
    print(f"已生成 {len(dataset)} 个样本, V={dataset.n_nodes} -> {args.out}")
    return EXIT_OK


def _train_config(args, manifest: Optional[RunManifest]) -> TrainConfig:
    if manifest is not None:
        config = TrainConfig.from_dict(manifest.config).with_overrides(seed=manifest.seed)
    elif args.config is not None:
        config = TrainConfig.from_yaml(args.config)
    else:
        config = TrainConfig()
    return config.with_overrides(
        epochs=args.epochs,
        seed=args.seed,
        schedule=parse_schedule(args.schedule) if args.schedule else None,
        ablation=args.ablation,
        folds=args.folds,
        lr=args.lr,
        batch_size=args.batch_size,
    )


def cmd_train(args) -> int:
    manifest_in = RunManifest.load(args.manifest) if args.manifest else None
    config = _train_config(args, manifest_in)
    if args.print_config:
        print(config.to_yaml(), end='')
        return EXIT_OK

    data_dir = args.data or (Path(manifest_in.outputs['data']) if manifest_in and 'data' in manifest_in.outputs
                             else None)
    if data_dir is None:
        raise ConfigError("需要 --data 数据集目录")
    out_dir = args.out or (Path(manifest_in.outputs['out_dir']) if manifest_in and 'out_dir' in manifest_in.outputs
                           else Path(settings.OUTPUT_DIR))
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = RunManifest(command='train', config=config.to_dict(), seed=config.seed,
                           outputs={'data': str(data_dir), 'out_dir': str(out_dir)})
    manifest.write(out_dir / settings.RUN_MANIFEST_NAME)

    start = time.perf_counter()
    dataset = load_dataset(data_dir)
    manifest.timings['load'] = time.perf_counter() - start

    trainer = ThcTrainer(config, dataset, out_dir, settings.CHECKPOINT_NAME, settings.METRICS_NAME)
    start = time.perf_counter()
    try:
        results = trainer.run()
    except KeyboardInterrupt:
        manifest.status = 'interrupted'
        manifest.timings['train'] = time.perf_counter() - start
        manifest.write(out_dir / settings.RUN_MANIFEST_NAME)
        raise
    manifest.timings['train'] = time.perf_counter() - start

    summary = summarize_folds(results)
    results_path = out_dir / 'results.csv'
    summary.to_csv(results_path, index=False, float_format='%.17g', lineterminator='\n')
    manifest.outputs['results'] = str(results_path)
    manifest.outputs['checkpoint'] = str(trainer.fold_dir(0) / settings.CHECKPOINT_NAME)
    manifest.status = 'completed'
    manifest.write(out_dir / settings.RUN_MANIFEST_NAME)

    for result in results:
        if result.test is None:
            print(f"fold {result.fold}: 未训练（epochs=0），仅保存初始检查点")
        else:
            print(f"fold {result.fold}: best_epoch={result.test['best_epoch']} "
                  f"test_auroc={result.test['test_auroc']:.4f} test_acc={result.test['test_acc']:.4f}")
    if len(results) > 1:
        mean, std = summary.iloc[-2], summary.iloc[-1]
        print(f"test_auroc {mean['test_auroc']:.4f} ± {std['test_auroc']:.4f}, "
              f"test_acc {mean['test_acc']:.4f} ± {std['test_acc']:.4f}")
    return EXIT_OK


def _checkpoint_split(metadata: dict, labels) -> DataSplit:
    """优先使用检查点记录的划分，否则按记录的配置重新划分"""
    recorded = metadata.get('split')
    if recorded:
        data_split = DataSplit.from_dict(recorded)
        indices = data_split.train + data_split.val + data_split.test
        if indices and max(indices) < len(labels):
            return data_split
        logger.warning("检查点记录的划分与数据集不匹配，重新划分")
    config = TrainConfig.from_dict(metadata['config']) if metadata.get('config') else TrainConfig()
    return split(labels, config.ratios, config.seed + int(metadata.get('fold', 0)))


def cmd_evaluate(args) -> int:
    model, metadata = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    if model.n_nodes != dataset.n_nodes:
        raise ContractError(f"检查点的节点数 V={model.n_nodes} 与数据集 V={dataset.n_nodes} 不一致")
    out_dir = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command='evaluate', config=metadata.get('config', {}),
                           seed=int(metadata.get('split', {}).get('seed', 0)),
                           outputs={'checkpoint': str(args.checkpoint), 'data': str(args.data),
                                    'out_dir': str(out_dir)})

    start = time.perf_counter()
    data_split = _checkpoint_split(metadata, dataset.labels)
    test_metrics = evaluate(model, dataset.subset(data_split.test))
    manifest.timings['test'] = time.perf_counter() - start
    metrics = {'best_epoch': metadata.get('epoch', 0), 'test_auroc': test_metrics['auroc'],
               'test_acc': test_metrics['accuracy']}
    atomic_write(out_dir / 'test_metrics.json', json.dumps(metrics, indent=2, sort_keys=True) + '\n')
    print(f"test_auroc={metrics['test_auroc']:.4f} test_acc={metrics['test_acc']:.4f}")

    stack = None
    start = time.perf_counter()
    if model.ablation != 'no_cluster':
        stack = finalize_assignment(model, dataset.subset(data_split.train)).stack
    if dataset.has_ground_truth:
        evaluator = ClusterEvaluator.from_dataset(dataset)
        paths = evaluator.write_reports(out_dir, dataset, stack, model.schedule, seed=data_split.seed)
        manifest.outputs.update({name: str(path) for name, path in paths.items()})
        print(f"聚类报告: {paths['report']}")
    else:
        logger.info("数据集没有真实社区标签，跳过聚类报告")
        print("数据集没有真实社区标签，跳过聚类报告")
    manifest.timings['cluster'] = time.perf_counter() - start
    manifest.status = 'completed'
    manifest.write(out_dir / settings.RUN_MANIFEST_NAME)
    return EXIT_OK


def cmd_bench(args) -> int:
    frame = run_benchmark(args.sizes, args.schedule, args.dims, args.heads, args.repeats, args.seed)
    out = args.out or Path(settings.OUTPUT_DIR) / 'bench.csv'
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, lineterminator='\n')
    if len(args.dims) > 1:
        dimension_slopes(frame).to_csv(out.with_name(out.stem + '_slopes.csv'), index=False, lineterminator='\n')
    for row in frame.itertuples():
        print(f"n={row.n} k={row.k} d={row.d}: clustered={row.clustered_seconds:.4f}s "
              f"unclustered={row.unclustered_seconds:.4f}s ratio={row.ratio:.2f}")
    return EXIT_OK


COMMANDS = {
    'generate': cmd_generate,
    'train': cmd_train,
    'evaluate': cmd_evaluate,
    'bench': cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=settings.LOG_LEVEL,
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"错误: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ThcError as e:
        print(f"错误: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("已中断，最近一次最佳检查点保持有效", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"未预期的错误: {e}", exc_info=True)
        print(f"错误: {e}", file=sys.stderr)
        return EXIT_RUNTIME

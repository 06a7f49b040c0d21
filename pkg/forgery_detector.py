#!/usr/bin/env python3
"""
伪造人脸检测命令行工具

子命令:
    gen-data        生成合成数据集
    train           训练
    eval            评估检查点
    analyze         导出单张图像的掩码与相似度模式
    class-patterns  按真实/伪造类别平均相似度模式
    export-heatmap  相似度矩阵 CSV -> 热力图
    ablation        消融实验
"""

import argparse
import logging
import sys

from core.errors import ForgeryDetectorError
from datagen.synthetic_corpus import SyntheticCorpusGenerator
from training.config import DEFAULT_CONFIG_FILE, VARIANT_NAMES, load_train_config
from training.robustness import PERTURBATIONS
from training.trainer import ablation, analyze, class_patterns, evaluate, export_heatmap, train

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def _config_overrides(args) -> dict:
    names = ["alpha", "k", "lambda1", "lambda2", "lr", "batch_size", "epochs", "seed", "image_size",
             "corpus_size", "variant", "val_fraction", "eval_workers"]
    overrides = {name: getattr(args, name, None) for name in names}
    if getattr(args, "cache_cue", False):
        overrides["cache_frequency_cue"] = True
    return overrides


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=DEFAULT_CONFIG_FILE, help="配置文件路径")
    parser.add_argument("--alpha", type=float, help="低频三角形比例")
    parser.add_argument("--k", type=int, help="块网格边长")
    parser.add_argument("--lambda1", type=float, help="相似度损失权重")
    parser.add_argument("--lambda2", type=float, help="分割损失权重")
    parser.add_argument("--lr", type=float, help="学习率")
    parser.add_argument("--batch-size", dest="batch_size", type=int, help="批大小")
    parser.add_argument("--epochs", type=int, help="训练轮数")
    parser.add_argument("--seed", type=int, help="随机种子")
    parser.add_argument("--image-size", dest="image_size", type=int, help="图像边长")
    parser.add_argument("--variant", choices=VARIANT_NAMES, help="网络变体")
    parser.add_argument("--val-fraction", dest="val_fraction", type=float, help="留出集比例")
    parser.add_argument("--eval-workers", dest="eval_workers", type=int, help="评估线程数")
    parser.add_argument("--cache-cue", action="store_true", help="预先计算整个数据集的频率线索")


def _add_inference_config_flag(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=None, help="配置文件路径，默认使用检查点中保存的配置")


def _inference_config(args):
    return load_train_config(args.config) if args.config else None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="基于局部关系学习的伪造人脸检测")
    parser.add_argument("--debug", action="store_true", help="启用调试日志")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="生成合成数据集")
    gen.add_argument("--output", default="./data/corpus", help="数据集目录")
    gen.add_argument("--count", dest="corpus_size", type=int, help="样本数")
    gen.add_argument("--size", dest="image_size", type=int, help="图像边长")
    gen.add_argument("--seed", type=int, help="随机种子")
    gen.add_argument("--workers", type=int, default=4, help="生成线程数")
    gen.add_argument("--config", default=DEFAULT_CONFIG_FILE, help="配置文件路径")

    tr = sub.add_parser("train", help="训练")
    tr.add_argument("--corpus", default="./data/corpus", help="数据集目录")
    tr.add_argument("--output-dir", default="./data", help="输出目录")
    _add_config_flags(tr)

    ev = sub.add_parser("eval", help="评估检查点")
    ev.add_argument("--checkpoint", required=True, help="检查点路径")
    ev.add_argument("--corpus", default="./data/corpus", help="数据集目录")
    ev.add_argument("--perturbation", choices=PERTURBATIONS, default="none", help="评估前施加的扰动")
    ev.add_argument("--strength", type=float, default=0.0,
                    help="扰动强度: noise 为标准差, blur 为 sigma, jpeg 为质量, patch 为块边长比例")
    ev.add_argument("--output-dir", default="./data", help="输出目录")
    _add_inference_config_flag(ev)

    an = sub.add_parser("analyze", help="分析单张图像")
    an.add_argument("--checkpoint", required=True, help="检查点路径")
    an.add_argument("--image", required=True, help="待分析图像")
    an.add_argument("--source", help="对应的源图（可选）")
    an.add_argument("--output-dir", default="./data/analysis", help="输出目录")
    _add_inference_config_flag(an)

    cp = sub.add_parser("class-patterns", help="按类别平均相似度模式")
    cp.add_argument("--checkpoint", required=True, help="检查点路径")
    cp.add_argument("--corpus", default="./data/corpus", help="数据集目录")
    cp.add_argument("--samples-per-class", dest="samples_per_class", type=int, help="每类抽取的样本数，默认全部")
    cp.add_argument("--output-dir", default="./data/analysis", help="输出目录")
    _add_inference_config_flag(cp)

    hm = sub.add_parser("export-heatmap", help="相似度矩阵导出为热力图")
    hm.add_argument("--input", required=True, help="analyze 导出的相似度 CSV")
    hm.add_argument("--output", required=True, help="热力图路径 (.png/.pgm)")

    ab = sub.add_parser("ablation", help="消融实验")
    ab.add_argument("--corpus", default="./data/corpus", help="数据集目录")
    ab.add_argument("--output-dir", default="./data", help="输出目录")
    ab.add_argument("--variants", nargs="+", choices=VARIANT_NAMES, default=list(VARIANT_NAMES), help="要训练的变体")
    _add_config_flags(ab)
    return parser


def run_gen_data(args) -> bool:
    config = load_train_config(args.config, _config_overrides(args))
    generator = SyntheticCorpusGenerator(args.output, size=config.image_size, seed=config.seed, workers=args.workers)
    report = generator.generate(config.corpus_size)
    print(f"\n✅ 数据集生成完成!")
    print(f"   真实/伪造: {report['real']} / {report['forged']}")
    print(f"   清单: {report['manifest']}")
    print(f"   耗时: {report['duration_seconds']:.1f} 秒")
    return True


def run_train(args) -> bool:
    config = load_train_config(args.config, _config_overrides(args))
    result = train(config, args.corpus, args.output_dir)
    if not result["success"]:
        print(f"\n❌ 训练失败: {result.get('error', 'Unknown error')}")
        return False
    best = result["best_report"]
    print(f"\n✅ 训练完成!")
    print(f"   最佳 epoch: {result['best_epoch']}  ACC={best['acc']:.4f}  AUC={best['auc']}  EER={best['eer']}")
    print(f"   检查点: {result['checkpoint']}")
    print(f"   指标日志: {result['metrics_log']}")
    print(f"   耗时: {result['duration_seconds']:.1f} 秒")
    return True


def run_eval(args) -> bool:
    result = evaluate(args.checkpoint, args.corpus, _inference_config(args), perturbation=args.perturbation,
                      strength=args.strength, output_dir=args.output_dir)
    if not result["success"]:
        print(f"\n❌ 评估失败: {result.get('error', 'Unknown error')}")
        return False
    report = result["report"]
    print(f"\n📊 评估结果 ({report.n_samples} 个样本, 扰动 {args.perturbation} strength={args.strength})")
    print(f"   ACC: {report.acc:.4f}")
    print(f"   AUC: {report.auc}")
    print(f"   EER: {report.eer}")
    print(f"   报告: {result['report_file']}")
    return True


def run_analyze(args) -> bool:
    result = analyze(args.checkpoint, args.image, args.source, args.output_dir, _inference_config(args))
    if not result["success"]:
        print(f"\n❌ 分析失败: {result.get('error', 'Unknown error')}")
        return False
    verdict = "伪造" if result["y_hat"] >= 0.5 else "真实"
    print(f"\n✅ 分析完成: y_hat={result['y_hat']:.4f} ({verdict})")
    if result["s_hat"] is not None:
        print(f"   相似度均值: {result['s_hat'].mean():.4f}")
    print(f"   输出目录: {result['output_dir']}")
    return True


def run_class_patterns(args) -> bool:
    result = class_patterns(args.checkpoint, args.corpus, _inference_config(args), args.samples_per_class,
                            args.output_dir)
    if not result["success"]:
        print(f"\n❌ 类别相似度分析失败: {result.get('error', 'Unknown error')}")
        return False
    print(f"\n📊 类别平均相似度")
    for name, info in result["summary"]["classes"].items():
        print(f"   {name}: {info['mean_similarity']:.4f} ({info['count']} 个样本)")
    print(f"   输出目录: {result['output_dir']}")
    return True


def run_export_heatmap(args) -> bool:
    result = export_heatmap(args.input, args.output)
    if not result["success"]:
        print(f"\n❌ 导出失败: {result.get('error', 'Unknown error')}")
        return False
    print(f"\n✅ 热力图已保存: {result['path']}")
    return True


def run_ablation(args) -> bool:
    config = load_train_config(args.config, _config_overrides(args))
    result = ablation(config, args.corpus, args.variants, args.output_dir)
    if not result["success"]:
        print(f"\n❌ 消融实验失败: {result.get('error', 'Unknown error')}")
        return False
    print(f"\n📊 消融结果")
    print(result["summary"][["variant", "acc", "auc", "eer"]].to_string(index=False))
    print(f"\n   汇总: {result['summary_file']}")
    return True


COMMANDS = {
    "gen-data": run_gen_data,
    "train": run_train,
    "eval": run_eval,
    "analyze": run_analyze,
    "class-patterns": run_class_patterns,
    "export-heatmap": run_export_heatmap,
    "ablation": run_ablation,
}


def main(argv=None) -> int:
    """主函数，返回退出码"""
    args = build_parser().parse_args(argv)

    if args.debug:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        ok = COMMANDS[args.command](args)
    except ForgeryDetectorError as e:
        logger.error(f"{args.command} 失败: {e}")
        print(f"\n❌ {e}")
        ok = False
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())

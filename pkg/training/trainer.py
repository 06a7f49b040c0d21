#!/usr/bin/env python3
"""
训练与评估
- train:          按 epoch 打乱、前向、组合损失、反向传播、Adam 更新，每个 epoch 在留出集上评估并保留最佳检查点
- evaluate:       加载检查点在数据集上计算 ACC/AUC/EER，可施加噪声、模糊、压缩或遮挡检查鲁棒性
- class_patterns: 按真实/伪造类别平均相似度模式
- analyze:        单张图像的 y_hat / 掩码 / 相似度模式导出
- export_heatmap: 相似度矩阵 -> 灰度热力图
- ablation:       相同种子与数据下依次训练各个变体并汇总
"""

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core import diffcore as dc
from core.errors import CheckpointError, ConfigError, CorpusError, DimensionError, TrainingError, UndefinedMetricError
from core.frequency_cue import batch_frequency_cue
from core.image_io import load_image, save_image, save_mask
from datagen.synthetic_corpus import Corpus, load_corpus
from network.mpsm import save_similarity_csv, save_similarity_heatmap
from network.two_stream_net import TwoStreamNet
from training.config import VARIANT_NAMES, TrainConfig, build_config
from training.objective import EvalReport, LossBreakdown, compute_metrics, loss_ce, loss_seg, loss_sim, loss_total
from training.optimizer import Adam, lr_at_epoch
from training.robustness import perturb
from training.supervision import batch_targets, build_mask, patch_probabilities, target_similarity

logger = logging.getLogger(__name__)

CorpusLike = Union[str, Corpus]
EVAL_LOG_NAME = "eval_reports.jsonl"
CLASS_NAMES = {0: "real", 1: "forged"}


def split_indices(count: int, val_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """种子置换后，最后 val_fraction 部分作为留出集"""
    n_val = max(1, int(round(count * val_fraction)))
    if count - n_val < 1:
        raise ConfigError(f"样本数 {count} 不足以按 {val_fraction} 划分训练/验证集")
    order = np.random.default_rng(seed).permutation(count)
    return order[:-n_val], order[-n_val:]


def compute_frequency_cues(images: np.ndarray, alpha: float, workers: int = 1, chunk: int = 64) -> np.ndarray:
    """(N, H, W, 3) -> (N, H, W, 1)，按块并行计算，顺序不变"""
    chunks = [images[i:i + chunk] for i in range(0, len(images), chunk)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(pool.map(lambda part: batch_frequency_cue(part, alpha), chunks))
    return np.concatenate(parts, axis=0)


def _resolve_corpus(corpus: CorpusLike, config: TrainConfig) -> Corpus:
    if isinstance(corpus, Corpus):
        return corpus
    return load_corpus(corpus, image_size=config.image_size, max_corrupt_fraction=config.max_corrupt_fraction)


def _check_architecture(net: TwoStreamNet, config: TrainConfig):
    expected = {"variant": config.variant, "widths": list(config.widths), "k": config.k,
                "image_size": config.image_size}
    actual = {key: net.architecture()[key] for key in expected}
    if actual != expected:
        raise CheckpointError(f"检查点结构 {actual} 与配置 {expected} 不一致")


def build_network(config: TrainConfig) -> TwoStreamNet:
    return TwoStreamNet(variant=config.variant, widths=config.widths, k=config.k,
                        image_size=config.image_size, seed=config.seed)


def predict(net: TwoStreamNet, images: np.ndarray, config: TrainConfig, cues: Optional[np.ndarray] = None,
            with_similarity: bool = False) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    eval 模式、无梯度地前向，按 batch_size 分片到 eval_workers 个线程

    Returns:
        (每个样本的 y_hat, with_similarity 时为 (N, k*k, k*k) 的 s_hat，否则 None)
    """
    if with_similarity and not net.use_mpsm:
        raise ConfigError(f"变体 {net.variant} 没有 MPSM，无法输出相似度模式")
    images = np.asarray(images, dtype=np.float64)
    batches = [np.arange(i, min(i + config.batch_size, len(images))) for i in range(0, len(images), config.batch_size)]

    def run_batch(index: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        with dc.no_grad():
            x2 = None
            if net.use_frequency:
                x2 = cues[index] if cues is not None else batch_frequency_cue(images[index], config.alpha)
            output = net.forward(images[index], x2, mode="eval")
            s_hat = output.s_hat.numpy().copy() if with_similarity else None
            return output.y_hat.numpy().copy(), s_hat

    with ThreadPoolExecutor(max_workers=config.eval_workers) as pool:
        results = list(pool.map(run_batch, batches))
    scores = np.concatenate([scores for scores, _ in results])
    patterns = np.concatenate([s_hat for _, s_hat in results]) if with_similarity else None
    return scores, patterns


def evaluate_model(net: TwoStreamNet, images: np.ndarray, labels: np.ndarray, config: TrainConfig,
                   perturbation: str = "none", strength: float = 0.0,
                   cues: Optional[np.ndarray] = None) -> Tuple[EvalReport, np.ndarray]:
    """
    计算分数与指标；perturbation 不为 none 时先对 x1 施加带种子的扰动，再重新计算 x2

    Returns:
        (EvalReport, 每个样本的 y_hat)；单一类别时 AUC/EER 为 None
    """
    if perturbation != "none":
        images = perturb(images, perturbation, strength, seed=config.seed)
        cues = None
    scores, _ = predict(net, images, config, cues=cues)

    try:
        report = compute_metrics(scores, labels)
    except UndefinedMetricError as e:
        logger.warning(f"{e}，仅报告 ACC")
        report = e.report
    return report, scores


class ForgeryTrainer:
    """单个变体的训练过程"""

    def __init__(self, config: TrainConfig, output_dir: str = "./data"):
        self.config = config
        self.output_dir = output_dir
        self.ensure_directories()
        self.net = build_network(config)
        self.params = self.net.named_parameters()
        self.optimizer = Adam(self.params, lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                              weight_decay=config.weight_decay, eps=config.eps)
        tag = f"{config.variant}_seed{config.seed}"
        self.metrics_file = os.path.join(output_dir, "metrics", f"metrics_{tag}.jsonl")
        self.checkpoint_file = os.path.join(output_dir, "checkpoints", f"{tag}_best.ckpt")

    def ensure_directories(self):
        for subdir in ["metrics", "checkpoints", "train_logs", "reports"]:
            os.makedirs(os.path.join(self.output_dir, subdir), exist_ok=True)

    def similarity_targets(self, masks: np.ndarray) -> np.ndarray:
        """按特征块的划分计算目标相似度，与 s_hat 逐块对应"""
        grid = (self.net.feature_size, self.net.feature_size)
        return batch_targets(masks, self.config.k, feature_size=grid)

    def train_step(self, images: np.ndarray, cues: Optional[np.ndarray], masks: np.ndarray,
                   labels: np.ndarray, lr: float) -> LossBreakdown:
        """
        一步训练

        Raises:
            TrainingError: 损失或梯度出现 NaN/Inf
        """
        config = self.config
        self.net.zero_grad()
        output = self.net.forward(images, cues if self.net.use_frequency else None, mode="train")

        l_ce = loss_ce(output.y_hat, labels.astype(np.float64))
        l_sim = None
        if output.s_hat is not None:
            l_sim = loss_sim(output.s_hat, self.similarity_targets(masks), valid=self.net.patch_valid)
        l_seg = loss_seg(output.mask_hat, masks, normalize=config.seg_loss_normalize)
        breakdown = loss_total(l_ce, l_sim, l_seg, config.lambda1, config.lambda2)

        if not np.isfinite(breakdown.l_total.item()):
            dc.get_tape().clear()
            raise TrainingError(f"损失出现 NaN/Inf: {breakdown.as_dict()}")
        dc.backward(breakdown.l_total)
        self.optimizer.lr = lr
        self.optimizer.step()
        return breakdown

    def run_epoch(self, epoch: int, corpus: Corpus, train_idx: np.ndarray, cues: Optional[np.ndarray]) -> Dict[str, float]:
        config = self.config
        lr = lr_at_epoch(config.lr, epoch, config.lr_halving_period)
        order = np.random.default_rng([config.seed, epoch]).permutation(train_idx)
        totals = {"l_ce": 0.0, "l_sim": 0.0, "l_seg": 0.0, "l_total": 0.0}

        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            images = corpus.images[batch]
            if cues is not None:
                batch_cues = cues[batch]
            elif self.net.use_frequency:
                batch_cues = batch_frequency_cue(images, config.alpha)
            else:
                batch_cues = None
            breakdown = self.train_step(images, batch_cues, corpus.masks[batch], corpus.labels[batch], lr)
            for key, value in breakdown.as_dict().items():
                totals[key] += value * len(batch)

        losses = {key: value / len(order) for key, value in totals.items()}
        losses["lr"] = lr
        return losses

    def append_metrics(self, record: Dict[str, Any]):
        with open(self.metrics_file, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")

    def fit(self, corpus: Corpus) -> Dict[str, Any]:
        config = self.config
        train_idx, val_idx = split_indices(len(corpus), config.val_fraction, config.seed)
        logger.info(f"🚀 开始训练 variant={config.variant}: 训练 {len(train_idx)} / 验证 {len(val_idx)}，"
                    f"{config.epochs} 个 epoch，参数量 {self.net.store.parameter_count()}")

        cues = None
        if config.cache_frequency_cue and self.net.use_frequency:
            logger.info("预先计算整个数据集的频率线索")
            cues = compute_frequency_cues(corpus.images, config.alpha, config.eval_workers)

        # 重新训练时覆盖旧的指标日志
        open(self.metrics_file, "w", encoding="utf-8").close()
        history: List[Dict[str, Any]] = []
        best_score, best_epoch, best_report = -np.inf, 0, None

        for epoch in range(config.epochs):
            losses = self.run_epoch(epoch, corpus, train_idx, cues)
            report, _ = evaluate_model(self.net, corpus.images[val_idx], corpus.labels[val_idx], config,
                                       cues=None if cues is None else cues[val_idx])
            record = {"epoch": epoch + 1, "variant": config.variant, "train": losses, "val": report.model_dump()}
            self.append_metrics(record)
            history.append(record)
            logger.info(f"epoch {epoch + 1}/{config.epochs} lr={losses['lr']:.2e} loss={losses['l_total']:.4f} "
                        f"(ce={losses['l_ce']:.4f} sim={losses['l_sim']:.4f} seg={losses['l_seg']:.4f}) "
                        f"val acc={report.acc:.4f} auc={report.auc}")

            score = report.auc if report.auc is not None else report.acc
            if score > best_score:
                best_score, best_epoch, best_report = score, epoch + 1, report
                self.net.save(self.checkpoint_file, meta={"epoch": epoch + 1, "val": report.model_dump(),
                                                          "config": config.model_dump()})

        logger.info(f"🎯 训练完成: 最佳 epoch {best_epoch}, 验证 ACC={best_report.acc:.4f} AUC={best_report.auc}")
        return {
            "checkpoint": self.checkpoint_file,
            "metrics_log": self.metrics_file,
            "best_epoch": best_epoch,
            "best_report": best_report.model_dump(),
            "history": history,
        }


def _attach_file_log(output_dir: str) -> logging.Handler:
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    log_dir = os.path.join(output_dir, "train_logs")
    os.makedirs(log_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(log_dir, f"train_{timestamp}.log"), encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def train(config: TrainConfig, corpus: CorpusLike, output_dir: str = "./data") -> Dict[str, Any]:
    """训练一个变体；返回结果字典，失败时 success=False 并带 error"""
    start_time = time.time()
    handler = _attach_file_log(output_dir)
    try:
        corpus = _resolve_corpus(corpus, config)
        result = ForgeryTrainer(config, output_dir).fit(corpus)
        result.update({"success": True, "duration_seconds": time.time() - start_time})
        return result
    except Exception as e:
        logger.error(f"训练失败: {e}")
        return {"success": False, "error": str(e), "duration_seconds": time.time() - start_time}
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


def _config_from_checkpoint(net: TwoStreamNet, header: Dict, config: Optional[TrainConfig]) -> TrainConfig:
    if config is not None:
        _check_architecture(net, config)
        return config
    stored = header.get("meta", {}).get("config")
    if stored:
        return build_config(stored)
    arch = net.architecture()
    return build_config({"variant": arch["variant"], "widths": arch["widths"], "k": arch["k"],
                         "image_size": arch["image_size"]})


def load_for_inference(checkpoint: str, config: Optional[TrainConfig] = None) -> Tuple[TwoStreamNet, TrainConfig, Dict]:
    """
    从检查点重建网络

    Raises:
        CheckpointError: 文件损坏或结构与配置不一致
    """
    net = TwoStreamNet.from_checkpoint(checkpoint)
    header = net.checkpoint_header
    return net, _config_from_checkpoint(net, header, config), header


def evaluate(checkpoint: str, corpus: CorpusLike, config: Optional[TrainConfig] = None,
             perturbation: str = "none", strength: float = 0.0, output_dir: str = "./data") -> Dict[str, Any]:
    """
    在整个数据集上评估检查点

    每次评估向 output_dir/reports/eval_reports.jsonl 追加一行
    """
    try:
        corpus_name = corpus if isinstance(corpus, str) else "memory"
        net, config, _ = load_for_inference(checkpoint, config)
        corpus = _resolve_corpus(corpus, config)
        report, _ = evaluate_model(net, corpus.images, corpus.labels, config,
                                   perturbation=perturbation, strength=strength)

        report_dir = os.path.join(output_dir, "reports")
        os.makedirs(report_dir, exist_ok=True)
        report_file = os.path.join(report_dir, EVAL_LOG_NAME)
        line = {
            "evaluated_at": datetime.now().isoformat(),
            "checkpoint": checkpoint,
            "corpus": corpus_name,
            "perturbation": perturbation,
            "strength": strength,
            **report.model_dump(),
        }
        with open(report_file, "a", encoding="utf-8") as f:
            f.write(json.dumps(line, sort_keys=True, ensure_ascii=False) + "\n")
        logger.info(f"📊 评估结果已追加到: {report_file}")
        return {"success": True, "report": report, "report_file": report_file}
    except Exception as e:
        logger.error(f"评估失败: {e}")
        return {"success": False, "error": str(e)}


def analyze(checkpoint: str, image_path: str, source_path: Optional[str] = None,
            output_dir: str = "./data/analysis", config: Optional[TrainConfig] = None) -> Dict[str, Any]:
    """
    导出单张图像的 y_hat、预测掩码与相似度模式；给定源图时一并导出真实掩码与目标相似度

    输出目录: output_dir/<图像名>/
        mask_hat.pgm  s_hat.csv  s_hat.png  [mask.pgm  s.csv  s.png]  summary.json
    """
    try:
        net, config, _ = load_for_inference(checkpoint, config)
        image = load_image(image_path)
        if image.ndim != 3:
            raise DimensionError(f"需要 RGB 图像: {image_path}")
        if image.shape[:2] != (net.image_size, net.image_size):
            raise DimensionError(f"图像尺寸 {image.shape[:2]} 与网络输入 {net.image_size} 不一致")

        with dc.no_grad():
            x1 = image[np.newaxis]
            x2 = batch_frequency_cue(x1, config.alpha) if net.use_frequency else None
            output = net.forward(x1, x2, mode="eval")
        y_hat = float(output.y_hat.numpy()[0])
        mask_hat = output.mask_hat.numpy()[0]
        s_hat = output.s_hat.numpy()[0] if output.s_hat is not None else None

        stem = os.path.splitext(os.path.basename(image_path))[0]
        sample_dir = os.path.join(output_dir, stem)
        os.makedirs(sample_dir, exist_ok=True)
        save_image(os.path.join(sample_dir, "mask_hat.pgm"), mask_hat)
        summary = {"image": image_path, "y_hat": y_hat, "forged": y_hat >= 0.5,
                   "mask_hat_mean": float(mask_hat.mean())}
        if s_hat is not None:
            save_similarity_csv(os.path.join(sample_dir, "s_hat.csv"), s_hat)
            save_similarity_heatmap(os.path.join(sample_dir, "s_hat.png"), s_hat)
            summary["s_hat_mean"] = float(s_hat.mean())

        s = None
        if source_path:
            mask = build_mask(load_image(source_path), image, config.mask_threshold)
            s = target_similarity(patch_probabilities(mask, config.k, (net.feature_size, net.feature_size)))
            save_mask(os.path.join(sample_dir, "mask.pgm"), mask)
            save_similarity_csv(os.path.join(sample_dir, "s.csv"), s)
            save_similarity_heatmap(os.path.join(sample_dir, "s.png"), s)
            summary["mask_fraction"] = float(mask.mean())

        with open(os.path.join(sample_dir, "summary.json"), "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, ensure_ascii=False)
        logger.info(f"分析结果已保存到: {sample_dir}")
        return {"success": True, "y_hat": y_hat, "mask_hat": mask_hat, "s_hat": s_hat, "s": s,
                "output_dir": sample_dir}
    except Exception as e:
        logger.error(f"分析失败: {e}")
        return {"success": False, "error": str(e)}


def class_patterns(checkpoint: str, corpus: CorpusLike, config: Optional[TrainConfig] = None,
                   samples_per_class: Optional[int] = None,
                   output_dir: str = "./data/analysis") -> Dict[str, Any]:
    """
    按类别平均相似度模式，观察真实与伪造人脸的局部关系差异

    samples_per_class 为 None 时使用该类全部样本，否则按种子无放回抽取
    输出目录: output_dir/class_patterns/
        s_hat_real.csv  s_hat_real.png  s_hat_forged.csv  s_hat_forged.png  summary.json
    """
    try:
        if samples_per_class is not None and samples_per_class < 1:
            raise ConfigError(f"samples_per_class 必须 >= 1，实际 {samples_per_class}")
        net, config, _ = load_for_inference(checkpoint, config)
        corpus = _resolve_corpus(corpus, config)
        rng = np.random.default_rng(config.seed)
        valid_pairs = np.outer(net.patch_valid, net.patch_valid) if net.patch_valid is not None else None

        target_dir = os.path.join(output_dir, "class_patterns")
        os.makedirs(target_dir, exist_ok=True)
        patterns, summary = {}, {"checkpoint": checkpoint, "variant": net.variant, "k": net.k, "classes": {}}
        for label, name in CLASS_NAMES.items():
            indices = np.flatnonzero(corpus.labels == label)
            if len(indices) == 0:
                raise CorpusError(f"数据集中没有 {name} 样本")
            if samples_per_class is not None and samples_per_class < len(indices):
                indices = np.sort(rng.choice(indices, size=samples_per_class, replace=False))
            _, s_hats = predict(net, corpus.images[indices], config, with_similarity=True)
            mean_pattern = s_hats.mean(axis=0)
            patterns[name] = mean_pattern

            save_similarity_csv(os.path.join(target_dir, f"s_hat_{name}.csv"), mean_pattern)
            save_similarity_heatmap(os.path.join(target_dir, f"s_hat_{name}.png"), mean_pattern)
            summary["classes"][name] = {
                "count": int(len(indices)),
                "mean_similarity": float(mean_pattern[valid_pairs].mean()),
            }

        with open(os.path.join(target_dir, "summary.json"), "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, ensure_ascii=False)
        logger.info(f"📊 类别平均相似度: 真实 {summary['classes']['real']['mean_similarity']:.4f} / "
                    f"伪造 {summary['classes']['forged']['mean_similarity']:.4f}，保存到 {target_dir}")
        return {"success": True, "patterns": patterns, "summary": summary, "output_dir": target_dir}
    except Exception as e:
        logger.error(f"类别相似度分析失败: {e}")
        return {"success": False, "error": str(e)}


def export_heatmap(s_hat: Union[str, np.ndarray], output_path: str) -> Dict[str, Any]:
    """s_hat 可以是矩阵或 analyze 导出的 CSV 路径"""
    try:
        if isinstance(s_hat, str):
            s_hat = pd.read_csv(s_hat, header=None).to_numpy(dtype=np.float64)
        save_similarity_heatmap(output_path, s_hat)
        return {"success": True, "path": output_path}
    except Exception as e:
        logger.error(f"导出热力图失败: {e}")
        return {"success": False, "error": str(e)}


def ablation(config: TrainConfig, corpus: CorpusLike, variants: Sequence[str] = VARIANT_NAMES,
             output_dir: str = "./data") -> Dict[str, Any]:
    """在相同种子和数据上依次训练各个变体，每个变体向消融日志追加一行"""
    try:
        unknown = [v for v in variants if v not in VARIANT_NAMES]
        if unknown:
            raise ConfigError(f"未知的变体: {unknown}")
        corpus = _resolve_corpus(corpus, config)
        metrics_dir = os.path.join(output_dir, "metrics")
        os.makedirs(metrics_dir, exist_ok=True)
        log_file = os.path.join(metrics_dir, f"ablation_seed{config.seed}.jsonl")
        open(log_file, "w", encoding="utf-8").close()

        rows = []
        for variant in variants:
            result = train(config.with_overrides(variant=variant), corpus, output_dir)
            if not result["success"]:
                raise TrainingError(f"变体 {variant} 训练失败: {result['error']}")
            line = {"variant": variant, "best_epoch": result["best_epoch"], **result["best_report"]}
            with open(log_file, "a", encoding="utf-8") as f:
                f.write(json.dumps(line, sort_keys=True, ensure_ascii=False) + "\n")
            rows.append({**line, "checkpoint": result["checkpoint"]})

        summary = pd.DataFrame(rows, columns=["variant", "acc", "auc", "eer", "best_epoch", "checkpoint"])
        summary_file = os.path.join(output_dir, "reports", f"ablation_seed{config.seed}.csv")
        os.makedirs(os.path.dirname(summary_file), exist_ok=True)
        summary.to_csv(summary_file, index=False, encoding="utf-8")
        logger.info(f"📊 消融汇总已保存到: {summary_file}")
        return {"success": True, "summary": summary, "summary_file": summary_file, "metrics_log": log_file}
    except Exception as e:
        logger.error(f"消融实验失败: {e}")
        return {"success": False, "error": str(e)}

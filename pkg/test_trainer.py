#!/usr/bin/env python3
"""
训练流程测试
快速测试使用 32x32 的小数据集和窄网络；完整规模的验收测试标记为 slow
"""

import json
import os

import numpy as np
import pytest

from core import diffcore as dc
from core.errors import TrainingError
from core.frequency_cue import batch_frequency_cue
from core.image_io import load_image, save_image
from datagen.synthetic_corpus import SyntheticCorpusGenerator, generate_forged, generate_in_memory, load_corpus
from forgery_detector import main as cli_main
from training.config import TrainConfig
from training.trainer import (ForgeryTrainer, ablation, analyze, build_network, class_patterns, evaluate,
                              evaluate_model, export_heatmap, split_indices, train)


@pytest.fixture
def tiny_config():
    return TrainConfig(image_size=32, widths=[4, 4, 8], k=4, epochs=2, batch_size=4, corpus_size=12,
                       val_fraction=0.25, eval_workers=2, lr=1e-3)


@pytest.fixture
def tiny_corpus(tiny_config):
    return generate_in_memory(tiny_config.corpus_size, size=tiny_config.image_size, seed=tiny_config.seed)


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


class TestSplit:

    def test_disjoint_and_deterministic(self):
        train_idx, val_idx = split_indices(20, 0.2, seed=3)
        assert len(val_idx) == 4 and len(train_idx) == 16
        assert set(train_idx).isdisjoint(val_idx)
        again = split_indices(20, 0.2, seed=3)
        assert np.array_equal(again[1], val_idx)

    def test_too_small(self):
        with pytest.raises(Exception):
            split_indices(1, 0.5, seed=0)


class TestTrain:

    def test_runs_and_logs(self, tmp_path, tiny_config, tiny_corpus):
        result = train(tiny_config, tiny_corpus, str(tmp_path))
        assert result["success"], result.get("error")
        assert os.path.exists(result["checkpoint"])
        with open(result["metrics_log"], encoding="utf-8") as f:
            lines = [json.loads(line) for line in f]
        assert [line["epoch"] for line in lines] == [1, 2]
        assert all(np.isfinite(line["train"]["l_total"]) for line in lines)
        assert 1 <= result["best_epoch"] <= 2
        assert os.listdir(os.path.join(str(tmp_path), "train_logs"))

    def test_fixed_seed_is_bit_identical(self, tmp_path, tiny_config, tiny_corpus):
        first = train(tiny_config, tiny_corpus, str(tmp_path / "a"))
        second = train(tiny_config, tiny_corpus, str(tmp_path / "b"))
        assert read_bytes(first["metrics_log"]) == read_bytes(second["metrics_log"])
        assert read_bytes(first["checkpoint"]) == read_bytes(second["checkpoint"])

    def test_learning_rate_schedule_in_log(self, tmp_path, tiny_config, tiny_corpus):
        config = tiny_config.with_overrides(lr_halving_period=1)
        result = train(config, tiny_corpus, str(tmp_path))
        lrs = [record["train"]["lr"] for record in result["history"]]
        assert lrs == [1e-3, 5e-4]

    def test_cached_frequency_cue_matches_on_the_fly(self, tmp_path, tiny_config, tiny_corpus):
        plain = train(tiny_config.with_overrides(epochs=1), tiny_corpus, str(tmp_path / "plain"))
        cached = train(tiny_config.with_overrides(epochs=1, cache_frequency_cue=True), tiny_corpus,
                       str(tmp_path / "cached"))
        assert plain["history"][0]["train"] == cached["history"][0]["train"]

    def test_from_corpus_directory(self, tmp_path, tiny_config):
        directory = str(tmp_path / "corpus")
        SyntheticCorpusGenerator(directory, size=32, seed=1).generate(8)
        result = train(tiny_config.with_overrides(epochs=1), directory, str(tmp_path / "out"))
        assert result["success"], result.get("error")

    def test_failure_is_reported(self, tmp_path, tiny_config):
        result = train(tiny_config, str(tmp_path / "no_corpus"), str(tmp_path))
        assert result["success"] is False
        assert "manifest.csv" in result["error"]

    def test_nan_loss_aborts_step(self, tmp_path, tiny_config, tiny_corpus):
        trainer = ForgeryTrainer(tiny_config, str(tmp_path))
        trainer.params["rgb.low.conv_a.weight"].data[...] = np.nan
        batch = np.arange(4)
        cues = np.zeros((4, 32, 32, 1))
        with pytest.raises(TrainingError):
            trainer.train_step(tiny_corpus.images[batch], cues, tiny_corpus.masks[batch],
                               tiny_corpus.labels[batch], lr=1e-3)


class TestSimilarityTargets:

    def test_targets_follow_feature_patches(self, tmp_path):
        trainer = ForgeryTrainer(TrainConfig(widths=[4, 4, 8]), str(tmp_path))
        masks = np.zeros((1, 64, 64))
        masks[0, 52:64, :] = 1.0
        s = trainer.similarity_targets(masks)[0]
        assert s.shape == (25, 25)
        # 块行 3 对应像素行 [48, 64)，其中 12 行被篡改
        assert s[15, 18] == 1.0
        assert s[15, 0] == pytest.approx(1.0 - 0.75 ** 2)
        assert s[15, 20] == pytest.approx(1.0 - 0.75 ** 2)
        assert s[0, 24] == 1.0

    def test_first_step_loss_has_no_padding_floor(self, tmp_path):
        config = TrainConfig(widths=[4, 4, 8])
        trainer = ForgeryTrainer(config, str(tmp_path))
        corpus = generate_in_memory(8, size=64, seed=config.seed)
        real = corpus.labels == 0
        images = corpus.images[real]
        cues = batch_frequency_cue(images, config.alpha)
        breakdown = trainer.train_step(images, cues, corpus.masks[real], corpus.labels[real], lr=config.lr)
        # 特征非负，s_hat >= 0.5；有效块 16x16 对的误差上界为 sqrt(256) / 2。
        # 若计入 9 个补零块，L_sim 至少为 sqrt(369) / 2
        assert 0.0 < breakdown.l_sim.item() <= 8.0


class TestEvaluate:

    def test_checkpoint_round_trip_report(self, tmp_path, tiny_config, tiny_corpus):
        net = build_network(tiny_config)
        direct, _ = evaluate_model(net, tiny_corpus.images, tiny_corpus.labels, tiny_config)
        path = str(tmp_path / "model.ckpt")
        net.save(path, meta={"config": tiny_config.model_dump()})
        first = evaluate(path, tiny_corpus, output_dir=str(tmp_path))
        second = evaluate(path, tiny_corpus, output_dir=str(tmp_path))
        assert first["success"], first.get("error")
        assert first["report"] == direct
        assert second["report"] == first["report"]

        assert second["report_file"] == first["report_file"]
        with open(first["report_file"], encoding="utf-8") as f:
            lines = [json.loads(line) for line in f]
        assert len(lines) == 2
        assert lines[0]["checkpoint"] == path and lines[0]["corpus"] == "memory"
        assert lines[1]["perturbation"] == "none" and lines[1]["acc"] == direct.acc

    def test_worker_count_does_not_change_scores(self, tiny_config, tiny_corpus):
        net = build_network(tiny_config)
        _, one = evaluate_model(net, tiny_corpus.images, tiny_corpus.labels, tiny_config.with_overrides(eval_workers=1))
        _, many = evaluate_model(net, tiny_corpus.images, tiny_corpus.labels, tiny_config.with_overrides(eval_workers=3))
        assert np.array_equal(one, many)

    def test_noise_is_seeded(self, tiny_config, tiny_corpus):
        net = build_network(tiny_config)
        _, clean = evaluate_model(net, tiny_corpus.images, tiny_corpus.labels, tiny_config)
        _, noisy_a = evaluate_model(net, tiny_corpus.images, tiny_corpus.labels, tiny_config,
                                    perturbation="noise", strength=0.05)
        _, noisy_b = evaluate_model(net, tiny_corpus.images, tiny_corpus.labels, tiny_config,
                                    perturbation="noise", strength=0.05)
        assert np.array_equal(noisy_a, noisy_b)
        assert not np.array_equal(clean, noisy_a)

    @pytest.mark.parametrize("perturbation,strength", [("blur", 1.0), ("jpeg", 30), ("patch", 0.25)])
    def test_perturbations_change_scores(self, tiny_config, tiny_corpus, perturbation, strength):
        net = build_network(tiny_config)
        _, clean = evaluate_model(net, tiny_corpus.images, tiny_corpus.labels, tiny_config)
        report, perturbed = evaluate_model(net, tiny_corpus.images, tiny_corpus.labels, tiny_config,
                                           perturbation=perturbation, strength=strength)
        assert perturbed.shape == clean.shape
        assert not np.array_equal(clean, perturbed)
        assert 0.0 <= report.acc <= 1.0

    def test_perturbed_report_is_tagged(self, tmp_path, tiny_config, tiny_corpus):
        path = str(tmp_path / "model.ckpt")
        build_network(tiny_config).save(path, meta={"config": tiny_config.model_dump()})
        result = evaluate(path, tiny_corpus, perturbation="blur", strength=1.0, output_dir=str(tmp_path))
        assert result["success"], result.get("error")
        with open(result["report_file"], encoding="utf-8") as f:
            line = json.loads(f.readline())
        assert (line["perturbation"], line["strength"]) == ("blur", 1.0)
        assert evaluate(path, tiny_corpus, perturbation="sharpen", output_dir=str(tmp_path))["success"] is False

    def test_architecture_mismatch(self, tmp_path, tiny_config, tiny_corpus):
        path = str(tmp_path / "model.ckpt")
        build_network(tiny_config).save(path)
        result = evaluate(path, tiny_corpus, config=tiny_config.with_overrides(variant="rfam"))
        assert result["success"] is False


class TestAnalyze:

    def test_dump_with_source(self, tmp_path, tiny_config):
        path = str(tmp_path / "model.ckpt")
        build_network(tiny_config).save(path, meta={"config": tiny_config.model_dump()})
        source, forged = generate_forged(4, 32)
        image_path, source_path = str(tmp_path / "forged.png"), str(tmp_path / "source.png")
        save_image(image_path, forged.image)
        save_image(source_path, source.image)

        result = analyze(path, image_path, source_path, output_dir=str(tmp_path / "analysis"))
        assert result["success"], result.get("error")
        assert 0.0 < result["y_hat"] < 1.0
        assert result["s_hat"].shape == (16, 16)
        assert result["s"].shape == (16, 16)
        for name in ["mask_hat.pgm", "s_hat.csv", "s_hat.png", "mask.pgm", "s.csv", "s.png", "summary.json"]:
            assert os.path.exists(os.path.join(result["output_dir"], name))

        again = analyze(path, image_path, output_dir=str(tmp_path / "again"))
        assert np.array_equal(again["s_hat"], result["s_hat"])
        assert again["s"] is None

    def test_class_averaged_patterns(self, tmp_path, tiny_config, tiny_corpus):
        net = build_network(tiny_config)
        path = str(tmp_path / "model.ckpt")
        net.save(path, meta={"config": tiny_config.model_dump()})
        result = class_patterns(path, tiny_corpus, output_dir=str(tmp_path / "analysis"))
        assert result["success"], result.get("error")

        for label, name in [(0, "real"), (1, "forged")]:
            images = tiny_corpus.images[tiny_corpus.labels == label]
            with dc.no_grad():
                s_hat = net.forward(images, batch_frequency_cue(images, tiny_config.alpha), mode="eval").s_hat
            expected = s_hat.numpy().mean(axis=0)
            assert result["patterns"][name].shape == (16, 16)
            assert np.allclose(result["patterns"][name], expected, atol=1e-10)
            assert result["summary"]["classes"][name]["count"] == 6
            for suffix in ["csv", "png"]:
                assert os.path.exists(os.path.join(result["output_dir"], f"s_hat_{name}.{suffix}"))
        with open(os.path.join(result["output_dir"], "summary.json"), encoding="utf-8") as f:
            assert json.load(f)["k"] == 4

    def test_class_patterns_sampling(self, tmp_path, tiny_config, tiny_corpus):
        path = str(tmp_path / "model.ckpt")
        build_network(tiny_config).save(path, meta={"config": tiny_config.model_dump()})
        first = class_patterns(path, tiny_corpus, samples_per_class=2, output_dir=str(tmp_path / "a"))
        second = class_patterns(path, tiny_corpus, samples_per_class=2, output_dir=str(tmp_path / "b"))
        assert first["success"], first.get("error")
        assert {c["count"] for c in first["summary"]["classes"].values()} == {2}
        assert np.array_equal(first["patterns"]["forged"], second["patterns"]["forged"])
        assert class_patterns(path, tiny_corpus, samples_per_class=0)["success"] is False

    def test_class_patterns_need_similarity_module(self, tmp_path, tiny_config, tiny_corpus):
        config = tiny_config.with_overrides(variant="rgb_baseline")
        path = str(tmp_path / "baseline.ckpt")
        build_network(config).save(path, meta={"config": config.model_dump()})
        assert class_patterns(path, tiny_corpus, output_dir=str(tmp_path))["success"] is False

    def test_export_heatmap_from_csv(self, tmp_path):
        csv_path = str(tmp_path / "ones.csv")
        np.savetxt(csv_path, np.ones((25, 25)), delimiter=",")
        result = export_heatmap(csv_path, str(tmp_path / "ones.png"))
        assert result["success"]
        assert np.all(load_image(result["path"]) == 1.0)


class TestAblation:

    def test_two_variants(self, tmp_path, tiny_config, tiny_corpus):
        result = ablation(tiny_config.with_overrides(epochs=1), tiny_corpus, ["full", "rgb_baseline"], str(tmp_path))
        assert result["success"], result.get("error")
        assert result["summary"]["variant"].tolist() == ["full", "rgb_baseline"]
        with open(result["metrics_log"], encoding="utf-8") as f:
            assert [json.loads(line)["variant"] for line in f] == ["full", "rgb_baseline"]

    def test_unknown_variant(self, tmp_path, tiny_config, tiny_corpus):
        assert ablation(tiny_config, tiny_corpus, ["xception"], str(tmp_path))["success"] is False


class TestCli:

    def test_gen_data_train_and_heatmap(self, tmp_path):
        corpus_dir = str(tmp_path / "corpus")
        assert cli_main(["gen-data", "--output", corpus_dir, "--count", "6", "--size", "32", "--seed", "2"]) == 0
        out = str(tmp_path / "out")
        assert cli_main(["train", "--corpus", corpus_dir, "--output-dir", out, "--epochs", "1", "--image-size", "32",
                         "--k", "4", "--batch-size", "3", "--val-fraction", "0.34"]) == 0
        checkpoint = os.path.join(out, "checkpoints", "full_seed42_best.ckpt")
        assert cli_main(["eval", "--checkpoint", checkpoint, "--corpus", corpus_dir, "--output-dir", out]) == 0
        image = os.path.join(corpus_dir, "images", "00001.png")
        source = os.path.join(corpus_dir, "sources", "00001.png")
        analysis = str(tmp_path / "analysis")
        assert cli_main(["analyze", "--checkpoint", checkpoint, "--image", image, "--source", source,
                         "--output-dir", analysis]) == 0
        heatmap = str(tmp_path / "heat.png")
        assert cli_main(["export-heatmap", "--input", os.path.join(analysis, "00001", "s_hat.csv"),
                         "--output", heatmap]) == 0
        assert load_image(heatmap).shape == (16, 16)

        config_file = str(tmp_path / "infer.json")
        with open(config_file, "w", encoding="utf-8") as f:
            json.dump({"data": {"image_size": 32}, "mpsm": {"k": 4}, "training": {"eval_workers": 1}}, f)
        assert cli_main(["eval", "--checkpoint", checkpoint, "--corpus", corpus_dir, "--output-dir", out,
                         "--perturbation", "blur", "--strength", "1.0", "--config", config_file]) == 0
        with open(os.path.join(out, "reports", "eval_reports.jsonl"), encoding="utf-8") as f:
            assert [json.loads(line)["perturbation"] for line in f] == ["none", "blur"]
        assert cli_main(["analyze", "--checkpoint", checkpoint, "--image", image, "--output-dir", analysis,
                         "--config", config_file]) == 0
        patterns = str(tmp_path / "patterns")
        assert cli_main(["class-patterns", "--checkpoint", checkpoint, "--corpus", corpus_dir,
                         "--output-dir", patterns, "--config", config_file]) == 0
        assert os.path.exists(os.path.join(patterns, "class_patterns", "s_hat_forged.csv"))

    def test_failure_exit_code(self, tmp_path):
        assert cli_main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--corpus", str(tmp_path)]) == 1
        assert cli_main(["gen-data", "--output", str(tmp_path / "c"), "--size", "16", "--count", "2"]) == 1


# ----------------------------------------------------------------------
# 完整规模验收：默认配置、2000 个样本、64x64、20 个 epoch
# ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def default_corpus():
    config = TrainConfig()
    return generate_in_memory(config.corpus_size, size=config.image_size, seed=config.seed)


@pytest.mark.slow
def test_default_training_learns(tmp_path, default_corpus):
    config = TrainConfig()
    result = train(config, default_corpus, str(tmp_path))
    assert result["success"], result.get("error")
    final = result["history"][-1]
    assert final["val"]["acc"] >= 0.95
    assert final["val"]["auc"] >= 0.98
    losses = [record["train"]["l_total"] for record in result["history"]]
    assert losses[1] < losses[0]
    assert losses[-1] < 0.25 * losses[0]

    real_path, forged_path = str(tmp_path / "real.png"), str(tmp_path / "forged.png")
    save_image(real_path, default_corpus.images[0])
    save_image(forged_path, default_corpus.images[1])
    real = analyze(result["checkpoint"], real_path, output_dir=str(tmp_path / "analysis"))
    forged = analyze(result["checkpoint"], forged_path, output_dir=str(tmp_path / "analysis"))
    assert real["s_hat"].mean() > forged["s_hat"].mean()


@pytest.mark.slow
def test_full_model_not_worse_than_rgb_baseline(tmp_path, default_corpus):
    result = ablation(TrainConfig(), default_corpus, ["full", "rgb_baseline"], str(tmp_path))
    assert result["success"], result.get("error")
    auc = dict(zip(result["summary"]["variant"], result["summary"]["auc"]))
    assert auc["full"] >= auc["rgb_baseline"] - 0.01


@pytest.mark.slow
def test_identical_runs_are_bit_identical(tmp_path, default_corpus):
    first = train(TrainConfig(), default_corpus, str(tmp_path / "a"))
    second = train(TrainConfig(), default_corpus, str(tmp_path / "b"))
    assert read_bytes(first["metrics_log"]) == read_bytes(second["metrics_log"])
    assert read_bytes(first["checkpoint"]) == read_bytes(second["checkpoint"])

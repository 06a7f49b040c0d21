#!/usr/bin/env python3
"""
合成数据集测试
"""

import logging
import os

import numpy as np
import pandas as pd
import pytest

from core.errors import ConfigError, CorpusError
from core.frequency_cue import frequency_cue
from datagen.synthetic_corpus import (SyntheticCorpusGenerator, generate_forged, generate_in_memory,
                                      generate_real, load_corpus, sample_seed)
from training.supervision import build_mask


class TestGenerateReal:

    def test_deterministic(self):
        a, b = generate_real(11, 64), generate_real(11, 64)
        assert np.array_equal(a.image, b.image)
        assert not np.array_equal(a.image, generate_real(12, 64).image)

    def test_contract(self):
        sample = generate_real(3, 64)
        assert sample.image.shape == (64, 64, 3)
        assert sample.label == 0
        assert np.all(sample.mask == 0.0)
        assert sample.image.std() > 0.02
        assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0

    def test_size_too_small(self):
        with pytest.raises(ConfigError):
            generate_real(0, 16)


class TestGenerateForged:

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_mask_fraction_and_definition(self, seed):
        source, forged = generate_forged(seed, 64)
        assert forged.label == 1 and source.label == 0
        assert 0.04 <= forged.mask.mean() <= 0.40
        assert np.array_equal(forged.mask, build_mask(source.image, forged.image, 0.15))

    def test_deterministic(self):
        a_src, a = generate_forged(21, 48)
        b_src, b = generate_forged(21, 48)
        assert np.array_equal(a.image, b.image) and np.array_equal(a_src.image, b_src.image)

    @pytest.mark.parametrize("seed", [5, 6, 7])
    def test_forged_region_carries_high_frequency_energy(self, seed):
        source, forged = generate_forged(seed, 64)
        region = forged.mask > 0
        forged_energy = np.mean(frequency_cue(forged.image, 0.33)[region] ** 2)
        source_energy = np.mean(frequency_cue(source.image, 0.33)[region] ** 2)
        assert forged_energy > source_energy


class TestInMemoryCorpus:

    def test_class_balance_and_order(self):
        corpus = generate_in_memory(7, size=32, seed=4, workers=3)
        assert len(corpus) == 7
        assert corpus.labels.tolist() == [0, 1, 0, 1, 0, 1, 0]
        assert corpus.images.shape == (7, 32, 32, 3)
        assert all(np.all(corpus.masks[i] == 0) for i in range(0, 7, 2))
        assert corpus.seeds[3] == sample_seed(4, 3)

    def test_independent_of_worker_count(self):
        a = generate_in_memory(6, size=32, seed=2, workers=1)
        b = generate_in_memory(6, size=32, seed=2, workers=4)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.masks, b.masks)

    def test_subset(self):
        corpus = generate_in_memory(4, size=32, seed=1)
        part = corpus.subset(np.array([3, 0]))
        assert part.labels.tolist() == [1, 0]
        assert part.paths == ["memory://3", "memory://0"]


class TestCorpusDirectory:

    def test_generate_and_load(self, tmp_path):
        directory = str(tmp_path / "corpus")
        report = SyntheticCorpusGenerator(directory, size=32, seed=8, workers=2).generate(6)
        assert (report["real"], report["forged"]) == (3, 3)

        manifest = pd.read_csv(os.path.join(directory, "manifest.csv"), keep_default_na=False)
        assert list(manifest.columns) == ["path", "label", "seed", "mask_path", "source_path"]
        assert manifest["source_path"].tolist()[:2] == ["", os.path.join("sources", "00001.png")]

        corpus = load_corpus(directory, image_size=32)
        expected = generate_in_memory(6, size=32, seed=8)
        assert np.max(np.abs(corpus.images - expected.images)) <= 0.5 / 255 + 1e-12
        assert np.array_equal(corpus.masks, expected.masks)
        assert np.array_equal(corpus.labels, expected.labels)

    def test_regeneration_is_bit_exact(self, tmp_path):
        first, second = str(tmp_path / "a"), str(tmp_path / "b")
        SyntheticCorpusGenerator(first, size=32, seed=3).generate(4)
        SyntheticCorpusGenerator(second, size=32, seed=3).generate(4)
        for name in ["manifest.csv", "images/00001.png", "masks/00001.pgm", "sources/00001.png"]:
            with open(os.path.join(first, name), "rb") as f1, open(os.path.join(second, name), "rb") as f2:
                assert f1.read() == f2.read()

    def test_corrupt_samples_skipped_then_aborted(self, tmp_path, caplog):
        directory = str(tmp_path / "corpus")
        SyntheticCorpusGenerator(directory, size=32, seed=5, workers=4).generate(40)
        for index in (0, 1):
            with open(os.path.join(directory, "images", f"{index:05d}.png"), "wb") as f:
                f.write(b"garbage")
        with caplog.at_level(logging.WARNING):
            corpus = load_corpus(directory)
        assert len(corpus) == 38
        assert "00000.png" in caplog.text

        with open(os.path.join(directory, "images", "00002.png"), "wb") as f:
            f.write(b"garbage")
        with pytest.raises(CorpusError):
            load_corpus(directory)

    def test_size_mismatch_counts_as_corrupt(self, tmp_path):
        directory = str(tmp_path / "corpus")
        SyntheticCorpusGenerator(directory, size=32, seed=5).generate(4)
        with pytest.raises(CorpusError):
            load_corpus(directory, image_size=64)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CorpusError):
            load_corpus(str(tmp_path))

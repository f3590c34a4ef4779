"""
Unit tests for the synthetic corpus generator and manifest handling.
"""

import random

import pandas as pd
import pytest

from mbxlab.corpus import (
    CorpusSample,
    contains_motif,
    generate_corpus,
    generate_image,
    load_samples,
    motif_markers,
    read_manifest,
    split,
    trapping_functions,
    write_corpus,
)
from mbxlab.detector import BENIGN, MALICIOUS


class TestGeneration:

    def test_deterministic(self, small_corpus_settings):
        """Test that the same rng seed gives the same image"""
        a = generate_image(random.Random(5), MALICIOUS, small_corpus_settings)
        b = generate_image(random.Random(5), MALICIOUS, small_corpus_settings)
        assert a == b

    def test_function_count(self, generated_image, small_corpus_settings):
        """Test that the function count stays within the configured range"""
        assert small_corpus_settings.min_functions <= len(generated_image.functions) \
            <= small_corpus_settings.max_functions

    def test_functions_terminate(self, generated_image, benign_image):
        """Test that generated functions return from random states"""
        assert trapping_functions(generated_image, states=5) == []
        assert trapping_functions(benign_image, states=5) == []

    def test_malicious_carries_motif(self, generated_image):
        """Test that malicious samples contain at least one motif marker"""
        assert contains_motif(generated_image)

    def test_benign_has_no_motif(self, benign_image):
        """Test that benign samples contain no motif marker"""
        assert not contains_motif(benign_image)

    def test_markers_loaded(self):
        """Test that the motif catalogue is available"""
        markers = motif_markers()
        assert markers
        assert all(len(marker) == 4 for marker in markers.values())

    def test_islands_block_transforms(self, small_corpus_settings):
        """Test that a zero transformable ratio gives only opaque benign functions"""
        opaque = small_corpus_settings.model_copy(update={'transformable_ratio': 0.0})
        image = generate_image(random.Random(3), BENIGN, opaque)
        assert not any(fn.is_transformable for fn in image.functions)

    def test_corpus_independent_of_jobs(self, small_corpus_settings):
        """Test that parallel generation gives the same samples"""
        serial = generate_corpus(small_corpus_settings, jobs=1)
        parallel = generate_corpus(small_corpus_settings, jobs=3)
        assert serial == parallel
        assert [s.label for s in serial] == [BENIGN] * 4 + [MALICIOUS] * 4
        assert serial[0].sample_id == "benign-00000"


class TestSplits:

    @pytest.fixture
    def samples(self, saver_image):
        return [CorpusSample(f"s{i}", i % 2, i, saver_image) for i in range(40)]

    def test_proportions(self, samples):
        """Test that the split is 80/10/10 and stratified"""
        parts = split(samples, seed=0)
        assert [len(parts[name]) for name in ('train', 'val', 'test')] == [32, 4, 4]
        for name in ('val', 'test'):
            assert sum(s.label for s in parts[name]) == 2

    def test_disjoint(self, samples):
        """Test that every sample lands in exactly one split"""
        parts = split(samples, seed=1)
        ids = [s.sample_id for part in parts.values() for s in part]
        assert sorted(ids) == sorted(s.sample_id for s in samples)


class TestManifest:

    def test_write_and_load(self, small_corpus_settings, tmp_path):
        """Test that written samples load back per split"""
        samples = generate_corpus(small_corpus_settings)
        manifest = write_corpus({'train': samples[:6], 'val': samples[6:7], 'test': samples[7:]}, tmp_path)
        assert manifest == tmp_path / "manifest.csv"

        frame = read_manifest(manifest)
        assert list(frame['split']).count('train') == 6
        loaded = load_samples(manifest, 'train')
        assert loaded == samples[:6]
        assert len(load_samples(manifest)) == 8

    def test_missing_columns(self, tmp_path):
        """Test that a manifest without the required columns is rejected"""
        path = tmp_path / "manifest.csv"
        pd.DataFrame([{'path': 'a.mbx', 'label': 0}]).to_csv(path, index=False)
        with pytest.raises(ValueError):
            read_manifest(path)


# Run tests with:
# pytest tests/test_corpus.py -v

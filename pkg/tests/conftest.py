"""
Shared fixtures: tiny hand-assembled images, a small generated image and
an untrained detector small enough for unit tests.
"""

import random
from typing import Sequence

import pytest

from config.settings import CorpusSettings, DetectorHyperparams
from mbxlab.container import BinaryImage, build_image
from mbxlab.corpus import generate_image
from mbxlab.detector import BENIGN, MALICIOUS, DetectorModel, Threshold, init_model
from mbxlab.isa import assemble_many, encode_all

BASE = 0x1000


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end attack and training runs (deselect with -m \"not slow\")")


# push/pop preservation, independent movs and an add usable by every IPR type
SAVER_LINES = [
    "push ebx",
    "push esi",
    "mov ebx, 1",
    "mov esi, 2",
    "add ebx, esi",
    "mov eax, ebx",
    "pop esi",
    "pop ebx",
    "ret",
]


def assemble_image(*functions: Sequence[str], data: Sequence[bytes] = ()) -> BinaryImage:
    """Lay the functions out back to back from BASE and analyze the result"""
    code = b''
    spans = []
    for lines in functions:
        raw = encode_all(assemble_many(lines, BASE + len(code)))
        spans.append((len(code), len(raw)))
        code += raw
    return build_image(code, spans, BASE, data)


@pytest.fixture
def saver_image() -> BinaryImage:
    return assemble_image(SAVER_LINES)


@pytest.fixture
def small_corpus_settings() -> CorpusSettings:
    return CorpusSettings(n_benign=4, n_malicious=4, min_size=512, max_size=768, min_functions=3,
                          max_functions=4, transformable_ratio=1.0, seed=7)


@pytest.fixture
def generated_image(small_corpus_settings) -> BinaryImage:
    return generate_image(random.Random(11), MALICIOUS, small_corpus_settings)


@pytest.fixture
def benign_image(small_corpus_settings) -> BinaryImage:
    return generate_image(random.Random(12), BENIGN, small_corpus_settings)


@pytest.fixture
def tiny_hyperparams() -> DetectorHyperparams:
    return DetectorHyperparams(embed_dim=4, filters=8, width=8, stride=4, input_cap=1024)


@pytest.fixture
def tiny_model(tiny_hyperparams) -> DetectorModel:
    return init_model(3, tiny_hyperparams)


@pytest.fixture
def half_threshold() -> Threshold:
    return Threshold(cutoff=0.5, target_fpr=0.01, fpr=0.0, n_benign=100)

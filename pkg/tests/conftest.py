from __future__ import annotations

import numpy as np
import pytest

from conceptlm.codec import CodecConfig, HashCodec, SentinelSet
from conceptlm.data import Normalizer
from conceptlm.diffusion import NoiseSchedule
from conceptlm.model import ConceptDiffusionModel, ModelConfig
from conceptlm.segment import SegmentationConfig, Segmenter, RuleBoundaryScorer


TINY_MODEL = ModelConfig(
    d_embedding=8,
    d_model=16,
    n_ctx_layers=1,
    n_den_layers=1,
    n_heads=2,
    max_positions=16,
    t_train=10,
    cfg_drop_prob=0.0,
)


@pytest.fixture
def tiny_codec() -> HashCodec:
    return HashCodec(CodecConfig(dim=8))


@pytest.fixture
def codec64() -> HashCodec:
    return HashCodec()


@pytest.fixture
def sentinels8(tiny_codec) -> SentinelSet:
    return SentinelSet.build(tiny_codec)


@pytest.fixture
def segmenter() -> Segmenter:
    return Segmenter(RuleBoundaryScorer(), SegmentationConfig())


@pytest.fixture
def tiny_model() -> ConceptDiffusionModel:
    return ConceptDiffusionModel(TINY_MODEL, seed=0)


@pytest.fixture
def tiny_sched() -> NoiseSchedule:
    return NoiseSchedule(TINY_MODEL.t_train)


@pytest.fixture
def identity_norm() -> Normalizer:
    return Normalizer.identity(TINY_MODEL.d_embedding)


def random_unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)

"""Autoregressive concept generation with the end-of-text stopping rule.

Each emitted concept is sampled in normalized space, denormalized, checked
against the end-of-text sentinel embedding (raw codec space, inclusive cosine
threshold, never emitted), decoded, and appended to the running context.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .codec import ConceptCodec, SentinelSet, Vocabulary, cosine, decode
from .data import Normalizer
from .diffusion import NoiseSchedule, SamplerParams, sample_next_concept
from .errors import ContextOverflow, DegenerateEmbedding
from .model import ConceptDiffusionModel


class StopReason(enum.Enum):
    EOT = "EOT"
    MAX_SENTENCES = "MAX_SENTENCES"


@dataclass(frozen=True)
class GenerationConfig:
    max_sentences: int = 16
    eot_threshold: float = 0.90
    target_lang: str = "eng_Latn"
    sampler: SamplerParams = field(default_factory=SamplerParams)
    reencode_feedback: bool = False  # feed re-encoded decoded text instead of the prediction

    def __post_init__(self):
        if self.max_sentences < 1:
            raise ValueError("max_sentences must be >= 1")
        if not (0.0 < self.eot_threshold <= 1.0):
            raise ValueError("eot_threshold must be in (0, 1]")


@dataclass
class GenerationResult:
    sentences: list[str]
    embeddings: list[np.ndarray]  # raw codec space, one per emitted sentence
    stop_reason: StopReason


def is_eot(raw: np.ndarray, lang: str, sentinels: SentinelSet, threshold: float) -> bool:
    """Inclusive cosine test of a raw-space embedding against the sentinel."""
    raw = np.asarray(raw)
    if float(np.linalg.norm(raw)) == 0.0:
        raise DegenerateEmbedding("zero embedding cannot be tested against the sentinel")
    return cosine(raw, sentinels.eot_for(lang)) >= threshold


def generate(
    context,
    model: ConceptDiffusionModel,
    sched: NoiseSchedule,
    normalizer: Normalizer,
    codec: ConceptCodec,
    vocab: Vocabulary,
    sentinels: SentinelSet,
    cfg: GenerationConfig,
    sampler_fn=sample_next_concept,
) -> GenerationResult:
    """Emit up to cfg.max_sentences concepts from a normalized-space context.

    Deterministic given (weights, context, cfg): sentence i uses sampler seed
    cfg.sampler.seed + i.
    """
    context = np.asarray(context, dtype=model.dtype)
    if context.ndim != 2 or context.shape[0] < 1:
        raise ValueError(f"context must be a nonempty (K, d) array, got shape {context.shape}")
    if context.shape[0] > model.config.max_positions - cfg.max_sentences:
        raise ContextOverflow(
            f"context length {context.shape[0]} leaves no room for {cfg.max_sentences} "
            f"sentences within max_positions={model.config.max_positions}"
        )

    running = [row for row in context]
    sentences: list[str] = []
    embeddings: list[np.ndarray] = []
    for i in range(cfg.max_sentences):
        ctx_state = model.encode_context(np.stack(running))
        params = replace(cfg.sampler, seed=cfg.sampler.seed + i)
        predicted = sampler_fn(model, ctx_state, sched, params)
        raw = normalizer.invert(predicted)
        if is_eot(raw, cfg.target_lang, sentinels, cfg.eot_threshold):
            return GenerationResult(sentences, embeddings, StopReason.EOT)
        text = decode(raw, cfg.target_lang, vocab)
        sentences.append(text)
        embeddings.append(raw)
        if cfg.reencode_feedback:
            running.append(normalizer.apply(codec.encode(text, cfg.target_lang)))
        else:
            running.append(np.asarray(predicted, dtype=model.dtype))
    return GenerationResult(sentences, embeddings, StopReason.MAX_SENTENCES)

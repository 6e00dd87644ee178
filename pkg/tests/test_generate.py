from __future__ import annotations

import numpy as np
import pytest

from conceptlm.codec import Vocabulary, cosine
from conceptlm.data import Normalizer
from conceptlm.diffusion import SamplerParams
from conceptlm.errors import ContextOverflow, DegenerateEmbedding
from conceptlm.generate import GenerationConfig, StopReason, generate, is_eot
from conceptlm.model import ConceptDiffusionModel, ModelConfig

GEN_MODEL = ModelConfig(
    d_embedding=8, d_model=16, n_ctx_layers=1, n_den_layers=1, n_heads=2,
    max_positions=40, t_train=10, cfg_drop_prob=0.0,
)


@pytest.fixture
def gen_model():
    return ConceptDiffusionModel(GEN_MODEL, seed=0)


@pytest.fixture
def vocab(tiny_codec):
    sentences = ["The first sentence.", "A second sentence.", "Another thought entirely."]
    return Vocabulary.from_pairs([("eng_Latn", s) for s in sentences], tiny_codec)


def _ctx(tiny_codec, n=2):
    sents = [f"Context sentence {i}." for i in range(n)]
    return np.stack([tiny_codec.encode(s, "eng_Latn") for s in sents])


class TestIsEot:
    def test_identity_true_at_any_threshold(self, tiny_codec, sentinels8):
        eot = sentinels8.eot_for("eng_Latn")
        assert is_eot(eot, "eng_Latn", sentinels8, 1.0)
        assert is_eot(eot, "eng_Latn", sentinels8, 0.5)

    def test_antipodal_false(self, tiny_codec, sentinels8):
        eot = sentinels8.eot_for("eng_Latn")
        assert not is_eot(-eot, "eng_Latn", sentinels8, 0.90)

    def test_threshold_boundary_inclusive(self, sentinels8):
        """Gram-Schmidt construction: a vector whose cosine to the sentinel is
        the boundary value itself must pass (>= is inclusive)."""
        eot = sentinels8.eot_for("eng_Latn").astype(np.float64)
        rng = np.random.default_rng(0)
        v = rng.standard_normal(8)
        u = v - np.dot(v, eot) * eot
        u /= np.linalg.norm(u)
        target = 0.90
        w = target * eot + np.sqrt(1 - target**2) * u
        boundary = cosine(w, eot)
        assert boundary == pytest.approx(0.90, abs=1e-6)
        assert is_eot(w, "eng_Latn", sentinels8, boundary)  # equality case
        assert not is_eot(w, "eng_Latn", sentinels8, np.nextafter(boundary, 1.0))

    def test_zero_vector_rejected(self, sentinels8):
        with pytest.raises(DegenerateEmbedding):
            is_eot(np.zeros(8), "eng_Latn", sentinels8, 0.9)

    def test_language_fallback(self, sentinels8):
        eot = sentinels8.eot_for("kor_Hang")  # falls back to English
        assert is_eot(eot, "kor_Hang", sentinels8, 0.99)


def _gen_cfg(**kwargs) -> GenerationConfig:
    defaults = dict(max_sentences=4, eot_threshold=0.90, target_lang="eng_Latn",
                    sampler=SamplerParams(steps=2, seed=0))
    defaults.update(kwargs)
    return GenerationConfig(**defaults)


class TestGenerate:
    def test_immediate_eot_stub(self, gen_model, tiny_sched, identity_norm, tiny_codec, vocab, sentinels8):
        eot = sentinels8.eot_for("eng_Latn")

        def stub(model, ctx, sched, params):
            return eot.copy()

        result = generate(
            _ctx(tiny_codec), gen_model, tiny_sched, identity_norm, tiny_codec, vocab,
            sentinels8, _gen_cfg(), sampler_fn=stub,
        )
        assert result.sentences == []
        assert result.stop_reason is StopReason.EOT

    def test_cap_at_16_sentences(self, gen_model, tiny_sched, identity_norm, tiny_codec, vocab, sentinels8):
        away = tiny_codec.encode("The first sentence.", "eng_Latn")
        assert cosine(away, sentinels8.eot_for("eng_Latn")) < 0.90  # sanity of the stub

        def stub(model, ctx, sched, params):
            return away.copy()

        result = generate(
            _ctx(tiny_codec), gen_model, tiny_sched, identity_norm, tiny_codec, vocab,
            sentinels8, _gen_cfg(max_sentences=16), sampler_fn=stub,
        )
        assert len(result.sentences) == 16
        assert result.stop_reason is StopReason.MAX_SENTENCES

    def test_eot_checked_in_raw_space(self, gen_model, tiny_sched, tiny_codec, vocab, sentinels8):
        """With a nonzero-center normalizer, a stub returning the normalized
        sentinel must still stop: the check happens after inversion."""
        norm = Normalizer(np.full(8, 0.5), np.full(8, 2.0))
        eot = sentinels8.eot_for("eng_Latn")
        normalized_eot = norm.apply(eot)
        # hand check: invert(apply(eot)) == eot within float32 rounding
        np.testing.assert_allclose(norm.invert(normalized_eot), eot, atol=1e-6)

        def stub(model, ctx, sched, params):
            return normalized_eot.copy()

        result = generate(
            norm.apply(_ctx(tiny_codec)), gen_model, tiny_sched, norm, tiny_codec, vocab,
            sentinels8, _gen_cfg(), sampler_fn=stub,
        )
        assert result.stop_reason is StopReason.EOT
        assert result.sentences == []

    def test_deterministic_bitwise(self, gen_model, tiny_sched, identity_norm, tiny_codec, vocab, sentinels8):
        ctx = _ctx(tiny_codec)
        runs = [
            generate(ctx, gen_model, tiny_sched, identity_norm, tiny_codec, vocab,
                     sentinels8, _gen_cfg(max_sentences=3))
            for _ in range(2)
        ]
        assert runs[0].sentences == runs[1].sentences
        assert runs[0].stop_reason == runs[1].stop_reason
        for a, b in zip(runs[0].embeddings, runs[1].embeddings):
            assert a.tobytes() == b.tobytes()

    def test_count_never_exceeds_cap(self, gen_model, tiny_sched, identity_norm, tiny_codec, vocab, sentinels8):
        for cap in (1, 2, 5):
            result = generate(
                _ctx(tiny_codec), gen_model, tiny_sched, identity_norm, tiny_codec, vocab,
                sentinels8, _gen_cfg(max_sentences=cap),
            )
            assert len(result.sentences) <= cap

    def test_emitted_text_decodes_from_appended_embedding(
        self, gen_model, tiny_sched, identity_norm, tiny_codec, vocab, sentinels8
    ):
        from conceptlm.codec import decode

        result = generate(
            _ctx(tiny_codec), gen_model, tiny_sched, identity_norm, tiny_codec, vocab,
            sentinels8, _gen_cfg(max_sentences=3),
        )
        for text, emb in zip(result.sentences, result.embeddings):
            assert decode(emb, "eng_Latn", vocab) == text

    def test_context_overflow(self, gen_model, tiny_sched, identity_norm, tiny_codec, vocab, sentinels8):
        big = np.stack([tiny_codec.encode(f"S{i}.", "eng_Latn") for i in range(30)])
        with pytest.raises(ContextOverflow):
            generate(big, gen_model, tiny_sched, identity_norm, tiny_codec, vocab,
                     sentinels8, _gen_cfg(max_sentences=16))

    def test_empty_context_rejected(self, gen_model, tiny_sched, identity_norm, tiny_codec, vocab, sentinels8):
        with pytest.raises(ValueError):
            generate(np.zeros((0, 8), dtype=np.float32), gen_model, tiny_sched, identity_norm,
                     tiny_codec, vocab, sentinels8, _gen_cfg())

    def test_reencode_feedback_variant(self, gen_model, tiny_sched, identity_norm, tiny_codec, vocab, sentinels8):
        seen_lengths = []

        def stub(model, ctx, sched, params):
            seen_lengths.append(ctx.length)
            return tiny_codec.encode("A second sentence.", "eng_Latn")

        generate(
            _ctx(tiny_codec), gen_model, tiny_sched, identity_norm, tiny_codec, vocab,
            sentinels8, _gen_cfg(max_sentences=3, reencode_feedback=True), sampler_fn=stub,
        )
        assert seen_lengths == [2, 3, 4]  # context grows by one per emission

    def test_per_step_seeds_differ(self, gen_model, tiny_sched, identity_norm, tiny_codec, vocab, sentinels8):
        seeds = []

        def stub(model, ctx, sched, params):
            seeds.append(params.seed)
            return tiny_codec.encode("A second sentence.", "eng_Latn")

        generate(
            _ctx(tiny_codec), gen_model, tiny_sched, identity_norm, tiny_codec, vocab,
            sentinels8, _gen_cfg(max_sentences=3, sampler=SamplerParams(steps=2, seed=100)),
            sampler_fn=stub,
        )
        assert seeds == [100, 101, 102]


class TestGenerationConfig:
    def test_defaults(self):
        cfg = GenerationConfig()
        assert cfg.max_sentences == 16
        assert cfg.eot_threshold == 0.90

    @pytest.mark.parametrize("kwargs", [{"max_sentences": 0}, {"eot_threshold": 0.0}, {"eot_threshold": 1.1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            GenerationConfig(**kwargs)

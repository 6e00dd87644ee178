from __future__ import annotations

import math

import pytest

from conceptlm.segment import (
    RuleBoundaryScorer,
    SegmentationConfig,
    classify_chinese_script,
    resolve_chinese_lang,
    split,
)


RULE = RuleBoundaryScorer()
DEFAULT = SegmentationConfig()


class TestRuleScorer:
    def test_scores_len_matches_text(self):
        text = "Hello. World!"
        assert len(RULE.scores(text)) == len(text)

    def test_fires_on_terminal_before_space(self):
        scores = RULE.scores("Hi. Yo")
        assert scores[2] == 1.0
        assert sum(scores) == 1.0

    def test_fires_at_end_of_text(self):
        scores = RULE.scores("Done.")
        assert scores[-1] == 1.0

    def test_no_fire_mid_token(self):
        scores = RULE.scores("3.14 is pi")
        assert all(s == 0.0 for s in scores)


class TestSplit:
    def test_punctuation_rule(self):
        assert split("Hello. World.", RULE, DEFAULT) == ["Hello.", "World."]

    def test_cjk_terminal(self):
        assert split("第一文。 第二文。", RULE, DEFAULT) == [
            "第一文。",
            "第二文。",
        ]

    def test_hard_wrap_ceiling_division(self):
        # 600 chars without boundaries -> ceil(600/256) = 3 chunks: 256, 256, 88
        text = "a" * 600
        out = split(text, RULE, DEFAULT)
        assert [len(s) for s in out] == [256, 256, 88]
        assert math.ceil(600 / 256) == len(out)
        assert "".join(out) == text

    def test_threshold_one_with_weak_scorer(self):
        class Half:
            def scores(self, text):
                return [0.5] * len(text)

        cfg = SegmentationConfig(threshold=1.0, max_len=4)
        out = split("abcdefgh", Half(), cfg)
        assert out == ["abcd", "efgh"]

    def test_empty_input(self):
        assert split("", RULE, DEFAULT) == []

    def test_no_empty_sentences(self):
        out = split("One.   Two.  ", RULE, DEFAULT)
        assert out == ["One.", "Two."]
        assert all(s for s in out)

    def test_max_len_invariant_random(self):
        import numpy as np

        rng = np.random.default_rng(3)
        cfg = SegmentationConfig(threshold=0.02, max_len=17)
        alphabet = list("abc def. ghi! jkl? 。")
        for _ in range(50):
            n = int(rng.integers(0, 200))
            text = "".join(rng.choice(alphabet) for _ in range(n))
            for s in split(text, RULE, cfg):
                assert 1 <= len(s) <= 17

    def test_content_preserved_in_order(self):
        text = "First one. Second two! Third three?"
        out = split(text, RULE, DEFAULT)
        assert "".join(out).replace(" ", "") == text.replace(" ", "")

    def test_stream_boundary_insensitivity(self):
        # splitting at a sentence boundary and feeding halves gives the same output
        a = "Hello there. Fine day."
        b = "More text here. Yes."
        whole = split(a + " " + b, RULE, DEFAULT)
        halves = split(a, RULE, DEFAULT) + split(b, RULE, DEFAULT)
        assert whole == halves

    def test_scorer_length_mismatch_rejected(self):
        class Bad:
            def scores(self, text):
                return [0.0]

        with pytest.raises(ValueError):
            split("abc", Bad(), DEFAULT)


class TestSegmentationConfig:
    def test_paper_defaults(self):
        assert DEFAULT.threshold == 0.02
        assert DEFAULT.max_len == 256

    @pytest.mark.parametrize("kwargs", [{"threshold": 0.0}, {"threshold": 1.5}, {"max_len": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SegmentationConfig(**kwargs)


class TestChineseScript:
    def test_simplified_only_char(self):
        assert classify_chinese_script("们") == "Hans"  # 们

    def test_traditional_only_char(self):
        assert classify_chinese_script("們") == "Hant"  # 們

    def test_tie_is_ambiguous(self):
        assert classify_chinese_script("们們") == "Ambiguous"
        assert classify_chinese_script("no chinese at all") == "Ambiguous"
        assert classify_chinese_script("") == "Ambiguous"

    def test_repetition_invariant(self):
        for text in ("们們", "们", "們說", "plain"):
            assert classify_chinese_script(text) == classify_chinese_script(text * 2)

    def test_majority_wins(self):
        assert classify_chinese_script("们们們") == "Hans"
        assert classify_chinese_script("們說们") == "Hant"

    def test_resolve_lang(self):
        assert resolve_chinese_lang("cmn_Hani", "们") == "zho_Hans"
        assert resolve_chinese_lang("cmn_Hani", "們") == "zho_Hant"
        # ties route to Hans
        assert resolve_chinese_lang("cmn_Hani", "abc") == "zho_Hans"
        # other languages pass through
        assert resolve_chinese_lang("eng_Latn", "abc") == "eng_Latn"
        assert resolve_chinese_lang("zho_Hans", "們") == "zho_Hans"

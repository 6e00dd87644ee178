"""Sentence segmentation: boundary-probability thresholding plus hard length wrapping.

A scorer assigns each character the probability that a sentence boundary
follows it; the bundled rule scorer fires on terminal punctuation so the
pipeline runs with no model weights. A neural scorer plugs in through the
same interface.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Protocol, Sequence


@dataclass(frozen=True)
class SegmentationConfig:
    threshold: float = 0.02
    max_len: int = 256

    def __post_init__(self):
        if not (0.0 < self.threshold <= 1.0):
            raise ValueError(f"threshold must be in (0, 1], got {self.threshold}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")


class BoundaryScorer(Protocol):
    def scores(self, text: str) -> Sequence[float]:
        """One probability in [0, 1] per character: boundary follows that character."""
        ...


# terminal punctuation covering Latin, CJK, Arabic and Devanagari scripts
_TERMINALS = frozenset(".!?。؟।")


class RuleBoundaryScorer:
    """Score 1.0 after terminal punctuation followed by whitespace or end of text."""

    def scores(self, text: str) -> list[float]:
        n = len(text)
        out = [0.0] * n
        for i, ch in enumerate(text):
            if ch in _TERMINALS and (i + 1 == n or text[i + 1].isspace()):
                out[i] = 1.0
        return out


def split(text: str, scorer: BoundaryScorer, cfg: SegmentationConfig) -> list[str]:
    """Split ``text`` at positions scoring >= threshold, then hard-wrap to max_len.

    Sentences are stripped of surrounding whitespace; empty pieces are dropped,
    so the outputs reproduce the non-whitespace content in order.
    """
    if not text:
        return []
    scores = scorer.scores(text)
    if len(scores) != len(text):
        raise ValueError(f"scorer returned {len(scores)} scores for {len(text)} characters")
    pieces: list[str] = []
    start = 0
    for i, s in enumerate(scores):
        if s >= cfg.threshold:
            pieces.append(text[start : i + 1])
            start = i + 1
    if start < len(text):
        pieces.append(text[start:])

    out: list[str] = []
    for piece in pieces:
        piece = piece.strip()
        for j in range(0, len(piece), cfg.max_len):
            chunk = piece[j : j + cfg.max_len].strip()
            if chunk:
                out.append(chunk)
    return out


@dataclass(frozen=True)
class Segmenter:
    """A scorer and its config, bundled so pipelines carry one object."""

    scorer: BoundaryScorer
    cfg: SegmentationConfig

    def split(self, text: str) -> list[str]:
        return split(text, self.scorer, self.cfg)


def default_segmenter(cfg: SegmentationConfig | None = None) -> Segmenter:
    return Segmenter(RuleBoundaryScorer(), cfg or SegmentationConfig())


_simplified_only: frozenset[str] | None = None
_traditional_only: frozenset[str] | None = None


def _load_charset(name: str) -> frozenset[str]:
    text = resources.files("conceptlm.resources").joinpath(name).read_text(encoding="utf-8")
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


def _exclusive_sets() -> tuple[frozenset[str], frozenset[str]]:
    global _simplified_only, _traditional_only
    if _simplified_only is None or _traditional_only is None:
        _simplified_only = _load_charset("zh_simplified_only.txt")
        _traditional_only = _load_charset("zh_traditional_only.txt")
    return _simplified_only, _traditional_only


def classify_chinese_script(text: str) -> str:
    """Return "Hans", "Hant", or "Ambiguous" by counting script-exclusive characters."""
    simplified, traditional = _exclusive_sets()
    s = sum(1 for ch in text if ch in simplified)
    t = sum(1 for ch in text if ch in traditional)
    if s > t:
        return "Hans"
    if t > s:
        return "Hant"
    return "Ambiguous"


#: language tags that need script disambiguation before encoding
UNRESOLVED_CHINESE = frozenset({"cmn_Hani", "zho_Hani"})


def resolve_chinese_lang(lang: str, text: str) -> str:
    """Map an undisambiguated Chinese tag to zho_Hans or zho_Hant (ties go to Hans)."""
    if lang not in UNRESOLVED_CHINESE:
        return lang
    return "zho_Hant" if classify_chinese_script(text) == "Hant" else "zho_Hans"

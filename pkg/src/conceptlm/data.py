"""Corpus ingestion, sequence/instance construction, robust normalizer, batching.

Embeddings are always computed at load time from text; nothing embedding-
shaped is persisted except the optional codec cache. Document sequences end
with the end-of-text sentinel of the document language (English fallback).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .codec import ConceptCodec, SentinelSet
from .errors import EmptyDocument, InsufficientData, MalformedConversation
from .segment import Segmenter

SCALE_FLOOR = 1e-6
NORMALIZER_MAGIC = b"CLMN"


@dataclass
class ConceptSequence:
    doc_id: str
    lang: str
    embeddings: np.ndarray  # (n, d) raw codec space
    texts: list[str]

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class InstructionInstance:
    doc_id: str
    lang: str
    context: np.ndarray  # (C, d) raw codec space
    targets: np.ndarray  # (T, d) raw codec space
    loss_mask: np.ndarray  # bool over the concatenated C+T positions
    source: str = ""

    def __len__(self) -> int:
        return self.context.shape[0] + self.targets.shape[0]


def build_pretrain_sequence(
    doc: dict, segmenter: Segmenter, codec: ConceptCodec, sentinels: SentinelSet
) -> ConceptSequence:
    """Segment one document {id, lang, text} and append the end-of-text sentinel."""
    lang = doc["lang"]
    sentences = segmenter.split(doc["text"])
    if not sentences:
        raise EmptyDocument(f"document {doc.get('id')!r} has no sentences")
    embeddings = [codec.encode(s, lang) for s in sentences]
    texts = list(sentences) + [sentinels.eot_text_for(lang)]
    embeddings.append(sentinels.eot_for(lang))
    return ConceptSequence(str(doc["id"]), lang, np.stack(embeddings), texts)


def sequence_from_sentences(
    doc_id: str, lang: str, sentences: list[str], codec: ConceptCodec, sentinels: SentinelSet
) -> ConceptSequence:
    """Like build_pretrain_sequence but for already-segmented input."""
    if not sentences:
        raise EmptyDocument(f"document {doc_id!r} has no sentences")
    embeddings = [codec.encode(s, lang) for s in sentences]
    texts = list(sentences) + [sentinels.eot_text_for(lang)]
    embeddings.append(sentinels.eot_for(lang))
    return ConceptSequence(doc_id, lang, np.stack(embeddings), texts)


def window_sentences(sentences: list[str], window: int) -> list[list[str]]:
    """Non-overlapping windows so each sequence (plus sentinel) fits the model."""
    if window < 1:
        raise ValueError("window must be >= 1")
    return [sentences[i : i + window] for i in range(0, len(sentences), window)]


def load_pretrain_corpus(
    records: Iterable[dict],
    codec: ConceptCodec,
    sentinels: SentinelSet,
    max_positions: int,
    segmenter: Segmenter | None = None,
) -> list[ConceptSequence]:
    """Build sequences from {id, lang, text} or pre-segmented {id, lang, sentences}.

    Documents longer than max_positions sentences become multiple windowed
    sequences, each ending with the sentinel.
    """
    out: list[ConceptSequence] = []
    for rec in records:
        if "sentences" in rec:
            sentences = list(rec["sentences"])
        else:
            if segmenter is None:
                raise ValueError("raw text input needs a segmenter")
            sentences = segmenter.split(rec["text"])
        if not sentences:
            continue
        windows = window_sentences(sentences, max_positions - 1)
        for w_idx, chunk in enumerate(windows):
            doc_id = str(rec["id"]) if w_idx == 0 else f"{rec['id']}#w{w_idx}"
            out.append(sequence_from_sentences(doc_id, rec["lang"], chunk, codec, sentinels))
    return out


def _turn_fields(turn) -> tuple[str, str, str | None]:
    if isinstance(turn, dict):
        return turn["role"], turn["text"], turn.get("lang")
    role, text, lang = turn
    return role, text, lang


def expand_conversation(
    turns: Iterable,
    segmenter: Segmenter,
    codec: ConceptCodec,
    sentinels: SentinelSet,
    doc_id: str = "",
    source: str = "",
) -> list[InstructionInstance]:
    """One instance per assistant turn: all earlier exchanges plus the current
    user block form the context; the assistant sentences plus the end-of-text
    sentinel form the targets. Sentinel sentences are translated to the
    conversation language (the first turn's), falling back to English.
    """
    parsed = [_turn_fields(t) for t in turns]
    if not parsed:
        raise MalformedConversation("conversation has no turns")
    for i, (role, _, _) in enumerate(parsed):
        expected = "user" if i % 2 == 0 else "assistant"
        if role != expected:
            raise MalformedConversation(f"turn {i} has role {role!r}, expected {expected!r}")

    conv_lang = parsed[0][2] or SentinelSet.FALLBACK_LANG
    user_sent = sentinels.user_turn_for(conv_lang)
    asst_sent = sentinels.assistant_turn_for(conv_lang)
    eot = sentinels.eot_for(conv_lang)

    def turn_embeddings(text: str, lang: str | None) -> list[np.ndarray]:
        sentences = segmenter.split(text)
        if not sentences:
            raise MalformedConversation("turn has no sentences after segmentation")
        return [codec.encode(s, lang or conv_lang) for s in sentences]

    instances: list[InstructionInstance] = []
    history: list[np.ndarray] = []
    for k in range(0, len(parsed) - 1, 2):
        u_role, u_text, u_lang = parsed[k]
        a_role, a_text, a_lang = parsed[k + 1]
        user_block = [user_sent] + turn_embeddings(u_text, u_lang)
        asst_sentences = turn_embeddings(a_text, a_lang)

        context = history + user_block + [asst_sent]
        targets = asst_sentences + [eot]
        mask = np.array([False] * len(context) + [True] * len(targets))
        instances.append(
            InstructionInstance(
                doc_id=f"{doc_id}/{k // 2}" if doc_id else str(k // 2),
                lang=conv_lang,
                context=np.stack(context),
                targets=np.stack(targets),
                loss_mask=mask,
                source=source,
            )
        )
        history = context + asst_sentences
    return instances


def conversation_context(
    turns: Iterable,
    segmenter: Segmenter,
    codec: ConceptCodec,
    sentinels: SentinelSet,
) -> np.ndarray:
    """Raw-space context for generating a reply to a conversation ending in a
    user turn: full earlier exchanges, the pending user block, then the
    assistant-turn sentinel."""
    parsed = [_turn_fields(t) for t in turns]
    if not parsed or len(parsed) % 2 != 1:
        raise MalformedConversation("generation needs turns ending with an unanswered user turn")
    probe = parsed + [("assistant", "placeholder.", parsed[0][2])]
    instances = expand_conversation(probe, segmenter, codec, sentinels)
    return instances[-1].context


# ---- normalizer -------------------------------------------------------------------


@dataclass
class Normalizer:
    """Per-dimension robust centering and scaling; scale is floored, never zero."""

    center: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float32)
        self.scale = np.asarray(self.scale, dtype=np.float32)
        if np.any(self.scale <= 0):
            raise ValueError("normalizer scale must be strictly positive")

    @staticmethod
    def _out_dtype(e: np.ndarray):
        # keep float64 inputs in float64 so gradient-check mode has headroom
        return e.dtype if np.issubdtype(e.dtype, np.floating) else np.float32

    def apply(self, e: np.ndarray) -> np.ndarray:
        e = np.asarray(e)
        return ((e - self.center) / self.scale).astype(self._out_dtype(e))

    def invert(self, e: np.ndarray) -> np.ndarray:
        e = np.asarray(e)
        return (e * self.scale + self.center).astype(self._out_dtype(e))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))


def fit_normalizer(stream: Iterable[np.ndarray], sample_cap: int = 100_000, seed: int = 0) -> Normalizer:
    """Median / (IQR / 1.349) per dimension over a uniform reservoir sample."""
    rng = np.random.default_rng(seed)
    reservoir: list[np.ndarray] = []
    count = 0
    for e in stream:
        e = np.asarray(e)
        if count < sample_cap:
            reservoir.append(e)
        else:
            j = int(rng.integers(0, count + 1))
            if j < sample_cap:
                reservoir[j] = e
        count += 1
    if count < 2:
        raise InsufficientData(f"normalizer needs >= 2 embeddings, got {count}")
    x = np.stack(reservoir).astype(np.float64)
    center = np.median(x, axis=0)
    q75, q25 = np.percentile(x, [75, 25], axis=0)
    scale = np.maximum((q75 - q25) / 1.349, SCALE_FLOOR)
    return Normalizer(center, scale)


def save_normalizer(path: str | Path, norm: Normalizer) -> None:
    d = norm.center.shape[0]
    with open(path, "wb") as fh:
        fh.write(NORMALIZER_MAGIC)
        fh.write(struct.pack("<I", d))
        fh.write(np.ascontiguousarray(norm.center, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(norm.scale, dtype="<f4").tobytes())


def load_normalizer(path: str | Path) -> Normalizer:
    data = Path(path).read_bytes()
    if data[:4] != NORMALIZER_MAGIC:
        raise ValueError(f"bad normalizer magic in {path}")
    (d,) = struct.unpack_from("<I", data, 4)
    center = np.frombuffer(data, dtype="<f4", count=d, offset=8).copy()
    scale = np.frombuffer(data, dtype="<f4", count=d, offset=8 + 4 * d).copy()
    return Normalizer(center, scale)


# ---- batching ---------------------------------------------------------------------


def batch_by_budget(items: list, budget: int, cost_fn=len) -> list[list]:
    """First-fit in arrival order: each item joins the first batch with room."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    batches: list[list] = []
    loads: list[int] = []
    for item in items:
        c = cost_fn(item)
        if c > budget:
            raise ValueError(f"item cost {c} exceeds budget {budget}; truncate upstream")
        for i, load in enumerate(loads):
            if load + c <= budget:
                batches[i].append(item)
                loads[i] += c
                break
        else:
            batches.append([item])
            loads.append(c)
    return batches


def batch_by_count(items: list, count: int) -> list[list]:
    return batch_by_budget(items, count, cost_fn=lambda _: 1)


# ---- file formats -----------------------------------------------------------------


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def default_sentinels(codec: ConceptCodec) -> SentinelSet:
    """Sentinel set from the bundled translation table."""
    with resources.as_file(resources.files("conceptlm.resources").joinpath("sentinels.tsv")) as p:
        return SentinelSet.from_table_file(p, codec)


@dataclass
class CorpusStats:
    """Per-language instance and sentence counts, the shape of dataset reports."""

    per_language: dict[str, dict[str, int]] = field(default_factory=dict)

    def add(self, lang: str, sentences: int, instances: int = 1) -> None:
        row = self.per_language.setdefault(lang, {"instances": 0, "sentences": 0})
        row["instances"] += instances
        row["sentences"] += sentences

    def as_dict(self) -> dict:
        total_inst = sum(r["instances"] for r in self.per_language.values())
        total_sent = sum(r["sentences"] for r in self.per_language.values())
        return {
            "per_language": {k: self.per_language[k] for k in sorted(self.per_language)},
            "total": {"instances": total_inst, "sentences": total_sent},
        }

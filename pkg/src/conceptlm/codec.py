"""Sentence <-> embedding codec.

The deterministic hash codec maps a sentence to a unit-norm vector via hashed
character n-grams of the language-prefixed string, so the whole pipeline runs
without pretrained weights. Any real encoder can replace it through the
``ConceptCodec`` protocol (see ``RemoteCodec`` for a socket-framed client).
Decoding is nearest-neighbor over an explicit vocabulary.
"""

from __future__ import annotations

import json
import re
import socket
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .errors import (
    DegenerateEmbedding,
    DimensionMismatch,
    InvalidSentence,
    UnknownLanguage,
)

LANG_TAG_RE = re.compile(r"^[a-z]{3}_[A-Z][a-z]{3}$")

EOT_TEXT = "End of text."
USER_TURN_TEXT = "User turn."
ASSISTANT_TURN_TEXT = "Assistant turn."

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

CACHE_MAGIC = b"CLM1"


def validate_lang(lang: str) -> str:
    if not LANG_TAG_RE.match(lang):
        raise UnknownLanguage(f"not a known language tag: {lang!r}")
    return lang


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def stable_hash64(text: str) -> int:
    """Platform-independent 64-bit hash of a string (for keyed rng streams)."""
    return _splitmix64(_fnv1a64(text.encode("utf-8")))


class ConceptCodec(Protocol):
    """Anything that turns (sentence, language) into a fixed-dimension vector."""

    @property
    def dim(self) -> int: ...

    def encode(self, text: str, lang: str) -> np.ndarray: ...


@dataclass(frozen=True)
class CodecConfig:
    dim: int = 64
    bucket_seed: int = 0x243F6A8885A308D3
    sign_seed: int = 0x13198A2E03707344

    def as_meta(self) -> dict:
        return {
            "dim": self.dim,
            "bucket_seed": hex(self.bucket_seed),
            "sign_seed": hex(self.sign_seed),
        }


class HashCodec:
    """Deterministic codec: hashed character n-grams (n in 1..3), signed buckets.

    The hashed string is ``lang + U+2225 + text`` so the same sentence embeds
    differently per language. Output is L2-normalized float32. Immutable after
    construction; safe for concurrent reads.
    """

    def __init__(self, config: CodecConfig | None = None):
        self.config = config or CodecConfig()
        if self.config.dim < 1:
            raise ValueError("codec dimension must be >= 1")

    @property
    def dim(self) -> int:
        return self.config.dim

    def encode(self, text: str, lang: str) -> np.ndarray:
        if not text.strip():
            raise InvalidSentence("cannot encode empty sentence")
        validate_lang(lang)
        cfg = self.config
        key = lang + "∥" + text
        acc = np.zeros(cfg.dim, dtype=np.float64)
        for n in (1, 2, 3):
            for i in range(len(key) - n + 1):
                h0 = _fnv1a64(key[i : i + n].encode("utf-8"))
                bucket = _splitmix64(h0 ^ cfg.bucket_seed) % cfg.dim
                sign = 1.0 if (_splitmix64(h0 ^ cfg.sign_seed) & 1) == 0 else -1.0
                acc[bucket] += sign
        norm = float(np.sqrt(np.dot(acc, acc)))
        if norm == 0.0:
            # all n-gram signs cancelled; fall back to one deterministic bucket
            acc[_splitmix64(_fnv1a64(key.encode("utf-8")) ^ cfg.bucket_seed) % cfg.dim] = 1.0
            norm = 1.0
        return (acc / norm).astype(np.float32)


class RemoteCodec:
    """Adapter for an external encoder behind a local socket.

    Wire format per request: u32 little-endian payload length, then UTF-8 JSON
    ``{"text": ..., "lang": ...}``. Response: ``dim`` little-endian f32 values.
    """

    def __init__(self, address: tuple[str, int] | str, dim: int):
        self._address = address
        self._dim = dim

    @property
    def dim(self) -> int:
        return self._dim

    def encode(self, text: str, lang: str) -> np.ndarray:
        if not text.strip():
            raise InvalidSentence("cannot encode empty sentence")
        validate_lang(lang)
        payload = json.dumps({"text": text, "lang": lang}).encode("utf-8")
        family = socket.AF_UNIX if isinstance(self._address, str) else socket.AF_INET
        with socket.socket(family, socket.SOCK_STREAM) as sock:
            sock.connect(self._address)
            sock.sendall(struct.pack("<I", len(payload)) + payload)
            want = self._dim * 4
            chunks = b""
            while len(chunks) < want:
                part = sock.recv(want - len(chunks))
                if not part:
                    raise ConnectionError("encoder service closed mid-response")
                chunks += part
        vec = np.frombuffer(chunks, dtype="<f4").astype(np.float32)
        if not np.all(np.isfinite(vec)):
            raise DegenerateEmbedding("encoder service returned non-finite values")
        return vec


def check_embedding(e: np.ndarray, dim: int | None = None) -> np.ndarray:
    e = np.asarray(e)
    if e.ndim != 1:
        raise DimensionMismatch(f"expected a 1-d embedding, got shape {e.shape}")
    if dim is not None and e.shape[0] != dim:
        raise DimensionMismatch(f"expected dimension {dim}, got {e.shape[0]}")
    if not np.all(np.isfinite(e)):
        raise DegenerateEmbedding("embedding contains NaN or Inf")
    return e


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = check_embedding(a).astype(np.float64)
    b = check_embedding(b).astype(np.float64)
    if a.shape[0] != b.shape[0]:
        raise DimensionMismatch(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateEmbedding("cosine of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


@dataclass
class Vocabulary:
    """Decode target set: (sentence, language, embedding) entries in file order."""

    entries: list[tuple[str, str, np.ndarray]] = field(default_factory=list)

    def add(self, text: str, lang: str, embedding: np.ndarray) -> None:
        if any(t == text and l == lang for t, l, _ in self.entries):
            raise ValueError(f"duplicate vocabulary entry: ({text!r}, {lang!r})")
        self.entries.append((text, lang, np.asarray(embedding, dtype=np.float32)))

    def languages(self) -> set[str]:
        return {lang for _, lang, _ in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]], codec: ConceptCodec) -> "Vocabulary":
        vocab = cls()
        for lang, text in pairs:
            vocab.add(text, lang, codec.encode(text, lang))
        return vocab

    @classmethod
    def from_file(cls, path: str | Path, codec: ConceptCodec) -> "Vocabulary":
        """Load a tab-separated vocabulary file: language tag, sentence text."""
        pairs = []
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            if not raw.strip():
                continue
            lang, text = raw.split("\t", 1)
            pairs.append((lang, text))
        return cls.from_pairs(pairs, codec)


def decode(e: np.ndarray, lang: str, vocab: Vocabulary) -> str:
    """Nearest vocabulary sentence for ``lang`` by cosine; ties pick the lowest index."""
    e = check_embedding(e)
    if float(np.linalg.norm(e)) == 0.0:
        raise DegenerateEmbedding("cannot decode a zero embedding")
    best_text = None
    best_sim = -np.inf
    for text, entry_lang, emb in vocab.entries:
        if entry_lang != lang:
            continue
        if emb.shape[0] != e.shape[0]:
            raise DimensionMismatch(
                f"vocabulary dimension {emb.shape[0]} vs embedding {e.shape[0]}"
            )
        sim = cosine(e, emb)
        if sim > best_sim:
            best_sim = sim
            best_text = text
    if best_text is None:
        raise UnknownLanguage(f"vocabulary has no entries for {lang!r}")
    return best_text


@dataclass
class SentinelSet:
    """Per-language control sentences and their embeddings under the active codec."""

    eot: dict[str, str]
    user_turn: dict[str, str]
    assistant_turn: dict[str, str]
    eot_embedding: dict[str, np.ndarray]
    user_turn_embedding: dict[str, np.ndarray]
    assistant_turn_embedding: dict[str, np.ndarray]

    FALLBACK_LANG = "eng_Latn"

    @classmethod
    def build(cls, codec: ConceptCodec, table: dict[str, tuple[str, str, str]] | None = None) -> "SentinelSet":
        """``table`` maps language tag -> (user_turn, assistant_turn, eot)."""
        table = dict(table or {})
        table.setdefault(cls.FALLBACK_LANG, (USER_TURN_TEXT, ASSISTANT_TURN_TEXT, EOT_TEXT))
        s = cls({}, {}, {}, {}, {}, {})
        for lang, (user, assistant, eot) in table.items():
            s.user_turn[lang] = user
            s.assistant_turn[lang] = assistant
            s.eot[lang] = eot
            s.user_turn_embedding[lang] = codec.encode(user, lang)
            s.assistant_turn_embedding[lang] = codec.encode(assistant, lang)
            s.eot_embedding[lang] = codec.encode(eot, lang)
        return s

    @classmethod
    def from_table_file(cls, path: str | Path, codec: ConceptCodec) -> "SentinelSet":
        """Load a UTF-8 TSV: lang, user_turn, assistant_turn, eot."""
        table = {}
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            if not raw.strip() or raw.startswith("#"):
                continue
            lang, user, assistant, eot = raw.split("\t")
            table[lang] = (user, assistant, eot)
        return cls.build(codec, table)

    def _get(self, d: dict[str, np.ndarray], lang: str) -> np.ndarray:
        return d[lang] if lang in d else d[self.FALLBACK_LANG]

    def eot_for(self, lang: str) -> np.ndarray:
        return self._get(self.eot_embedding, lang)

    def user_turn_for(self, lang: str) -> np.ndarray:
        return self._get(self.user_turn_embedding, lang)

    def assistant_turn_for(self, lang: str) -> np.ndarray:
        return self._get(self.assistant_turn_embedding, lang)

    def eot_text_for(self, lang: str) -> str:
        return self.eot[lang] if lang in self.eot else self.eot[self.FALLBACK_LANG]

    def user_turn_text_for(self, lang: str) -> str:
        return self.user_turn[lang] if lang in self.user_turn else self.user_turn[self.FALLBACK_LANG]

    def assistant_turn_text_for(self, lang: str) -> str:
        return (
            self.assistant_turn[lang]
            if lang in self.assistant_turn
            else self.assistant_turn[self.FALLBACK_LANG]
        )


def write_embedding_cache(path: str | Path, dim: int, records: Iterable[tuple[str, str, np.ndarray]]) -> None:
    """Binary cache: magic CLM1, u32 dim, then (u32 len, text, u32 len, lang, dim f32)."""
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", dim))
        for text, lang, emb in records:
            emb = np.asarray(emb, dtype="<f4")
            if emb.shape != (dim,):
                raise DimensionMismatch(f"cache record has shape {emb.shape}, expected ({dim},)")
            tb = text.encode("utf-8")
            lb = lang.encode("utf-8")
            fh.write(struct.pack("<I", len(tb)) + tb)
            fh.write(struct.pack("<I", len(lb)) + lb)
            fh.write(emb.tobytes())


def read_embedding_cache(path: str | Path) -> tuple[int, list[tuple[str, str, np.ndarray]]]:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise ValueError(f"bad cache magic in {path}")
    (dim,) = struct.unpack_from("<I", data, 4)
    off = 8
    records = []
    while off < len(data):
        (tlen,) = struct.unpack_from("<I", data, off)
        off += 4
        text = data[off : off + tlen].decode("utf-8")
        off += tlen
        (llen,) = struct.unpack_from("<I", data, off)
        off += 4
        lang = data[off : off + llen].decode("utf-8")
        off += llen
        emb = np.frombuffer(data, dtype="<f4", count=dim, offset=off).copy()
        off += dim * 4
        records.append((text, lang, emb))
    return dim, records


class CachingCodec:
    """Wraps a codec with an in-memory (text, lang) -> embedding cache."""

    def __init__(self, inner: ConceptCodec, preload: Iterable[tuple[str, str, np.ndarray]] = ()):
        self._inner = inner
        self._cache: dict[tuple[str, str], np.ndarray] = {
            (text, lang): np.asarray(emb, dtype=np.float32) for text, lang, emb in preload
        }

    @property
    def dim(self) -> int:
        return self._inner.dim

    def encode(self, text: str, lang: str) -> np.ndarray:
        key = (text, lang)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._inner.encode(text, lang)
            self._cache[key] = hit
        return hit

    def dump(self) -> list[tuple[str, str, np.ndarray]]:
        return [(t, l, e) for (t, l), e in self._cache.items()]

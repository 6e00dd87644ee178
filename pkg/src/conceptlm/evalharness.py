"""Evaluation protocols: embedding distances with the prefix-growing procedure,
ROUGE-L for generated completions, the cross-lingual alignment probe, and
deterministic report emission."""

from __future__ import annotations

import csv
import json
import unicodedata
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .codec import ConceptCodec, SentinelSet, Vocabulary, cosine, decode
from .data import Normalizer, expand_conversation
from .diffusion import NoiseSchedule, SamplerParams, sample_next_concept
from .errors import DimensionMismatch, EmptyEvalSet
from .generate import GenerationConfig, generate
from .model import ConceptDiffusionModel
from .segment import Segmenter

METRIC_L2 = "L2"
METRIC_RT_L2 = "RT_L2"
METRIC_ROUGE_L = "ROUGE_L"
METRIC_COSINE_ALIGN = "COSINE_ALIGN"


@dataclass(frozen=True)
class EvalRecord:
    doc_id: str
    lang: str
    prefix_len: int  # >= 1 for prefix metrics, 0 otherwise
    metric: str
    value: float


def l2(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"l2: shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.sqrt(np.sum((pred - gt) ** 2)))


def roundtrip_l2(
    pred: np.ndarray, gt: np.ndarray, lang: str, codec: ConceptCodec, vocab: Vocabulary
) -> float:
    """Distance after decoding the prediction and re-encoding the decoded text."""
    return l2(codec.encode(decode(pred, lang, vocab), lang), gt)


def _whitespace_tokens(text: str) -> list[str]:
    return unicodedata.normalize("NFC", text).lower().split()


def rouge_l(candidate: str, reference: str, tokenizer: Callable[[str], list[str]] | None = None) -> float:
    """LCS-based F1 over whitespace tokens (character tokens when neither side
    contains whitespace, which covers unsegmented CJK text)."""
    if tokenizer is None:
        cand = _whitespace_tokens(candidate)
        ref = _whitespace_tokens(reference)
        if len(cand) == 1 and len(ref) == 1 and (len(cand[0]) > 1 or len(ref[0]) > 1):
            cand = list(cand[0])
            ref = list(ref[0])
    else:
        cand = tokenizer(candidate)
        ref = tokenizer(reference)
    if not cand or not ref:
        return 0.0
    m, n = len(cand), len(ref)
    dp = np.zeros((m + 1, n + 1), dtype=np.int64)
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            if cand[i - 1] == ref[j - 1]:
                dp[i, j] = dp[i - 1, j - 1] + 1
            else:
                dp[i, j] = max(dp[i - 1, j], dp[i, j - 1])
    lcs = int(dp[m, n])
    if lcs == 0:
        return 0.0
    precision = lcs / m
    recall = lcs / n
    return 2 * precision * recall / (precision + recall)


def select_docs(docs: Iterable[dict], min_sentences: int, n_docs: int) -> list[dict]:
    """First n_docs documents (stream order) with at least min_sentences sentences."""
    selected: list[dict] = []
    for doc in docs:
        if len(doc["sentences"]) >= min_sentences:
            selected.append(doc)
            if len(selected) == n_docs:
                break
    return selected


def prefix_eval(
    docs: Iterable[dict],
    model: ConceptDiffusionModel,
    sched: NoiseSchedule,
    normalizer: Normalizer,
    codec: ConceptCodec,
    vocab: Vocabulary,
    min_sentences: int = 9,
    n_docs: int = 1000,
    sampler: SamplerParams = SamplerParams(),
    space: str = "raw",
    sampler_fn=sample_next_concept,
) -> tuple[list[EvalRecord], dict]:
    """Grow the context one sentence at a time and score each next prediction.

    ``docs`` yields segmented documents {id, lang, sentences}. For a document
    with n sentences, every k in 1..n-1 contributes one single-sentence
    prediction scored by L2 (in ``space``) and round-trip L2 against sentence
    k+1. Returns the records and per-language/overall means.
    """
    if space not in ("raw", "normalized"):
        raise ValueError(f"space must be 'raw' or 'normalized', got {space!r}")
    selected = select_docs(docs, min_sentences, n_docs)
    if not selected:
        raise EmptyEvalSet(f"no document has >= {min_sentences} sentences")
    if len(selected) < n_docs:
        warnings.warn(
            f"only {len(selected)} qualifying documents (wanted {n_docs}); proceeding",
            stacklevel=2,
        )

    records: list[EvalRecord] = []
    for doc in selected:
        lang = doc["lang"]
        raw_embs = np.stack([codec.encode(s, lang) for s in doc["sentences"]])
        norm_embs = normalizer.apply(raw_embs)
        n = raw_embs.shape[0]
        for k in range(1, n):
            ctx_state = model.encode_context(norm_embs[:k])
            predicted = sampler_fn(model, ctx_state, sched, sampler)
            raw_pred = normalizer.invert(predicted)
            if space == "raw":
                dist = l2(raw_pred, raw_embs[k])
            else:
                dist = l2(predicted, norm_embs[k])
            records.append(EvalRecord(str(doc["id"]), lang, k, METRIC_L2, dist))
            records.append(
                EvalRecord(
                    str(doc["id"]),
                    lang,
                    k,
                    METRIC_RT_L2,
                    roundtrip_l2(raw_pred, raw_embs[k], lang, codec, vocab),
                )
            )
    return records, summarize(records)


def alignment_pilot(
    pairs: Iterable[tuple[str, str, str]],
    codec: ConceptCodec,
    per_lang_cap: int = 1000,
    languages: Iterable[str] | None = None,
) -> tuple[list[EvalRecord], dict]:
    """Mean cosine between English and target-language embeddings of parallel
    sentences, first per_lang_cap pairs per language in stream order."""
    counts: dict[str, int] = {}
    records: list[EvalRecord] = []
    for eng, tgt, lang in pairs:
        seen = counts.get(lang, 0)
        if seen >= per_lang_cap:
            continue
        counts[lang] = seen + 1
        value = cosine(codec.encode(eng, "eng_Latn"), codec.encode(tgt, lang))
        records.append(EvalRecord(f"{lang}/{seen}", lang, 0, METRIC_COSINE_ALIGN, value))
    if languages is not None:
        for lang in languages:
            if counts.get(lang, 0) == 0:
                warnings.warn(f"no parallel pairs for {lang}; skipped", stacklevel=2)
    if not records:
        raise EmptyEvalSet("no parallel pairs seen")
    return records, summarize(records)


def instruct_eval(
    conversations: Iterable[dict],
    model: ConceptDiffusionModel,
    sched: NoiseSchedule,
    normalizer: Normalizer,
    codec: ConceptCodec,
    vocab: Vocabulary,
    sentinels: SentinelSet,
    segmenter: Segmenter,
    gen_cfg: GenerationConfig,
    sampler_fn=sample_next_concept,
) -> tuple[list[EvalRecord], dict]:
    """Generate a completion for the last exchange of each conversation and
    score it with ROUGE-L against the reference assistant turn."""
    records: list[EvalRecord] = []
    for conv in conversations:
        turns = conv["turns"]
        if len(turns) < 2 or turns[-1]["role"] != "assistant":
            warnings.warn(f"conversation {conv.get('id')!r} lacks a reference turn; skipped", stacklevel=2)
            continue
        lang = conv.get("lang", turns[0].get("lang", "eng_Latn"))
        for t in turns:
            t.setdefault("lang", lang)
        instance = expand_conversation(turns, segmenter, codec, sentinels, doc_id=str(conv.get("id", "")))[-1]
        context = normalizer.apply(instance.context)
        cfg = replace(gen_cfg, target_lang=lang)
        result = generate(
            context, model, sched, normalizer, codec, vocab, sentinels, cfg, sampler_fn=sampler_fn
        )
        candidate = " ".join(result.sentences)
        records.append(
            EvalRecord(str(conv.get("id", "")), lang, 0, METRIC_ROUGE_L, rouge_l(candidate, turns[-1]["text"]))
        )
    if not records:
        raise EmptyEvalSet("no conversation could be evaluated")
    return records, summarize(records)


# ---- aggregation and report emission ------------------------------------------------


def summarize(records: list[EvalRecord]) -> dict:
    """Per-(language, metric) and overall per-metric means with counts."""
    by_lang: dict[tuple[str, str], list[float]] = {}
    by_metric: dict[str, list[float]] = {}
    for r in records:
        by_lang.setdefault((r.lang, r.metric), []).append(r.value)
        by_metric.setdefault(r.metric, []).append(r.value)
    return {
        "overall": [
            {"metric": m, "mean": float(np.mean(v)), "count": len(v)}
            for m, v in sorted(by_metric.items())
        ],
        "by_language": [
            {"lang": lang, "metric": m, "mean": float(np.mean(v)), "count": len(v)}
            for (lang, m), v in sorted(by_lang.items())
        ],
    }


def records_to_jsonl(records: list[EvalRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "doc_id": r.doc_id,
                        "lang": r.lang,
                        "prefix_len": r.prefix_len,
                        "metric": r.metric,
                        "value": r.value,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def records_from_jsonl(path: str | Path) -> list[EvalRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                records.append(
                    EvalRecord(d["doc_id"], d["lang"], d["prefix_len"], d["metric"], d["value"])
                )
    return records


def emit_report(
    records: list[EvalRecord],
    out_dir: str | Path,
    formats: tuple[str, ...] = ("json", "csv"),
    meta: dict | None = None,
) -> dict[str, Path]:
    """Write report.{json,csv} plus by_language.csv; bitwise-stable per input."""
    if not records:
        raise EmptyEvalSet("cannot emit a report from zero records")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize(records)
    paths: dict[str, Path] = {}

    if "json" in formats:
        report = {"meta": meta or {}, **summary}
        p = out_dir / "report.json"
        p.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        paths["json"] = p
    if "csv" in formats:
        p = out_dir / "report.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scope", "lang", "metric", "mean", "count"])
            for row in summary["overall"]:
                writer.writerow(["overall", "", row["metric"], repr(row["mean"]), row["count"]])
            for row in summary["by_language"]:
                writer.writerow(
                    ["language", row["lang"], row["metric"], repr(row["mean"]), row["count"]]
                )
        paths["csv"] = p
        bl = out_dir / "by_language.csv"
        with open(bl, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lang", "metric", "mean", "count"])
            for row in summary["by_language"]:
                writer.writerow([row["lang"], row["metric"], repr(row["mean"]), row["count"]])
        paths["by_language"] = bl
    return paths

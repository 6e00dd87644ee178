"""Command-line entry point wiring the whole pipeline.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error. Every run
prints the resolved config hash and seed; every written artifact gets a
sidecar ``<name>.meta.json`` carrying {config_hash, seed, version} (reports
embed the same meta inline).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import version_string
from .codec import HashCodec, SentinelSet, Vocabulary
from .config import RunConfig, load_config, require_input_path
from .data import (
    CorpusStats,
    conversation_context,
    default_sentinels,
    expand_conversation,
    fit_normalizer,
    load_normalizer,
    load_pretrain_corpus,
    read_jsonl,
    save_normalizer,
    sequence_from_sentences,
    write_jsonl,
)
from .diffusion import NoiseSchedule
from .errors import ConceptLMError, ConfigError, MalformedConversation
from .evalharness import (
    alignment_pilot,
    emit_report,
    instruct_eval,
    prefix_eval,
    records_from_jsonl,
    records_to_jsonl,
)
from .generate import GenerationConfig, generate
from .model import ConceptDiffusionModel
from .nn import load_params_into
from .segment import RuleBoundaryScorer, Segmenter, resolve_chinese_lang
from .trainloop import run as train_run


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; defaults are built in")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    p.add_argument("--deterministic", action="store_true", help="force single-worker mode")


def build_parser() -> _Parser:
    parser = _Parser(prog="conceptlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", parents=[], help="split documents into sentences")
    _add_common(p)
    p.add_argument("--input", required=True, help="JSONL {id, lang, text}")
    p.add_argument("--output", required=True, help="JSONL {id, lang, sentences}")

    p = sub.add_parser("build-data", help="validate and shape a corpus, emit stats")
    _add_common(p)
    p.add_argument("--mode", choices=("pretrain", "instruct"), required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--stats", help="write per-language stats JSON here")
    p.add_argument("--emit-vocab", help="write a decode vocabulary TSV (pretrain mode)")

    p = sub.add_parser("fit-normalizer", help="fit the embedding normalizer")
    _add_common(p)
    p.add_argument("--input", required=True, help="segmented JSONL {id, lang, sentences}")
    p.add_argument("--output", required=True, help="normalizer file (CLMN)")
    p.add_argument("--sample-cap", type=int, default=100_000)

    for mode in ("pretrain", "finetune"):
        p = sub.add_parser(mode, help=f"run {mode}")
        _add_common(p)
        p.add_argument("--corpus", help="training corpus JSONL")
        p.add_argument("--normalizer", help="normalizer file")
        p.add_argument("--out-dir", required=True)
        p.add_argument("--steps", type=int, help="override step count")
        p.add_argument("--resume", action="store_true")
        p.add_argument("--init-checkpoint", help="start from these weights")

    p = sub.add_parser("generate", help="generate concepts from a prompt")
    _add_common(p)
    p.add_argument("--checkpoint", help="model weights (CLMW)")
    p.add_argument("--normalizer")
    p.add_argument("--vocab")
    p.add_argument("--prompt", required=True, help="JSON {lang, sentences} or {lang, turns}")
    p.add_argument("--max-sentences", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval-pretrain", help="prefix-growing embedding evaluation")
    _add_common(p)
    p.add_argument("--input", required=True, help="segmented JSONL")
    p.add_argument("--checkpoint")
    p.add_argument("--normalizer")
    p.add_argument("--vocab")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("eval-instruct", help="generation + ROUGE-L evaluation")
    _add_common(p)
    p.add_argument("--input", required=True, help="conversations JSONL with reference turns")
    p.add_argument("--checkpoint")
    p.add_argument("--normalizer")
    p.add_argument("--vocab")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("align", help="cross-lingual embedding alignment probe")
    _add_common(p)
    p.add_argument("--input", required=True, help="JSONL {eng, target, lang}")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("report", help="aggregate evaluation records into reports")
    _add_common(p)
    p.add_argument("--records", required=True, help="records JSONL")
    p.add_argument("--out-dir", required=True)

    return parser


def _meta(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "version": version_string()}


def _write_sidecar(path: Path, cfg: RunConfig) -> None:
    side = Path(str(path) + ".meta.json")
    side.write_text(json.dumps(_meta(cfg), sort_keys=True) + "\n", encoding="utf-8")


def _stack(cfg: RunConfig, sentinel_table: str | None = None):
    codec = HashCodec(cfg.codec_config())
    table = sentinel_table or cfg.path("sentinel_table")
    if table:
        sentinels = SentinelSet.from_table_file(require_input_path(cfg, "sentinel_table", table), codec)
    else:
        sentinels = default_sentinels(codec)
    segmenter = Segmenter(RuleBoundaryScorer(), cfg.segmentation_config())
    return codec, sentinels, segmenter


def _load_model(cfg: RunConfig, checkpoint: str | None, required: bool = False) -> ConceptDiffusionModel:
    model = ConceptDiffusionModel(cfg.model_config(), seed=cfg.seed)
    if checkpoint or required:
        load_params_into(require_input_path(cfg, "checkpoint", checkpoint), model.params)
    return model


def _cmd_segment(args, cfg: RunConfig) -> int:
    _, _, segmenter = _stack(cfg)
    out = []
    for rec in read_jsonl(require_input_path(cfg, "input", args.input)):
        lang = resolve_chinese_lang(rec["lang"], rec["text"])
        out.append({"id": rec["id"], "lang": lang, "sentences": segmenter.split(rec["text"])})
    write_jsonl(args.output, out)
    _write_sidecar(Path(args.output), cfg)
    return 0


def _cmd_build_data(args, cfg: RunConfig) -> int:
    _, sentinels, segmenter = _stack(cfg)
    stats = CorpusStats()
    out = []
    if args.mode == "pretrain":
        seen_langs: set[str] = set()
        vocab_pairs: list[tuple[str, str]] = []
        seen_pairs: set[tuple[str, str]] = set()
        for rec in read_jsonl(require_input_path(cfg, "input", args.input)):
            if "sentences" in rec:
                lang, sentences = rec["lang"], list(rec["sentences"])
            else:
                lang = resolve_chinese_lang(rec["lang"], rec["text"])
                sentences = segmenter.split(rec["text"])
            if not sentences:
                continue
            out.append({"id": rec["id"], "lang": lang, "sentences": sentences})
            stats.add(lang, len(sentences))
            seen_langs.add(lang)
            if args.emit_vocab:
                for s in sentences:
                    if (lang, s) not in seen_pairs:
                        seen_pairs.add((lang, s))
                        vocab_pairs.append((lang, s))
        if args.emit_vocab:
            for lang in sorted(seen_langs):
                for s in (
                    sentinels.eot_text_for(lang),
                    sentinels.user_turn_text_for(lang),
                    sentinels.assistant_turn_text_for(lang),
                ):
                    if (lang, s) not in seen_pairs:
                        seen_pairs.add((lang, s))
                        vocab_pairs.append((lang, s))
            Path(args.emit_vocab).write_text(
                "".join(f"{lang}\t{s}\n" for lang, s in vocab_pairs), encoding="utf-8"
            )
            _write_sidecar(Path(args.emit_vocab), cfg)
    else:
        for rec in read_jsonl(require_input_path(cfg, "input", args.input)):
            turns = rec["turns"]
            roles = [t["role"] for t in turns]
            for i, role in enumerate(roles):
                if role != ("user" if i % 2 == 0 else "assistant"):
                    raise MalformedConversation(f"conversation {rec.get('id')!r}: bad role order")
            lang = rec.get("lang") or "eng_Latn"
            n_sent = sum(len(segmenter.split(t["text"])) for t in turns)
            n_assistant = sum(1 for r in roles if r == "assistant")
            out.append({"id": rec["id"], "lang": lang, "turns": turns})
            stats.add(lang, n_sent, instances=n_assistant)
    write_jsonl(args.output, out)
    _write_sidecar(Path(args.output), cfg)
    if args.stats:
        Path(args.stats).write_text(
            json.dumps(stats.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        _write_sidecar(Path(args.stats), cfg)
    return 0


def _cmd_fit_normalizer(args, cfg: RunConfig) -> int:
    codec, sentinels, _ = _stack(cfg)

    def stream():
        for rec in read_jsonl(require_input_path(cfg, "input", args.input)):
            seq = sequence_from_sentences(
                str(rec["id"]), rec["lang"], list(rec["sentences"]), codec, sentinels
            )
            yield from seq.embeddings

    norm = fit_normalizer(stream(), sample_cap=args.sample_cap, seed=cfg.seed)
    save_normalizer(args.output, norm)
    _write_sidecar(Path(args.output), cfg)
    return 0


def _cmd_train(args, cfg: RunConfig, mode: str) -> int:
    codec, sentinels, segmenter = _stack(cfg)
    corpus_path = require_input_path(cfg, "corpus", args.corpus)
    normalizer = load_normalizer(require_input_path(cfg, "normalizer", args.normalizer))
    model = _load_model(cfg, args.init_checkpoint)
    sched = NoiseSchedule(cfg.model_config().t_train, cfg.get("diffusion", "offset"))
    train_cfg = cfg.train_config(mode)
    if args.steps is not None:
        train_cfg = replace(train_cfg, steps=args.steps)

    max_pos = cfg.model_config().max_positions
    if mode == "pretrain":
        items = load_pretrain_corpus(read_jsonl(corpus_path), codec, sentinels, max_pos, segmenter)
    else:
        items = []
        for rec in read_jsonl(corpus_path):
            lang = rec.get("lang")
            turns = [dict(t, lang=t.get("lang", lang)) for t in rec["turns"]]
            for inst in expand_conversation(
                turns, segmenter, codec, sentinels, doc_id=str(rec["id"]), source=rec.get("source", "")
            ):
                if len(inst) <= max_pos:
                    items.append(inst)
    result = train_run(
        train_cfg,
        items,
        args.out_dir,
        model,
        sched,
        normalizer,
        config_hash=cfg.config_hash(),
        version=version_string(),
        resume=args.resume,
    )
    print(f"final_loss={result.final_loss:.6f} checkpoint={result.checkpoint}")
    return 0


def _cmd_generate(args, cfg: RunConfig) -> int:
    codec, sentinels, segmenter = _stack(cfg)
    normalizer = load_normalizer(require_input_path(cfg, "normalizer", args.normalizer))
    vocab = Vocabulary.from_file(require_input_path(cfg, "vocab", args.vocab), codec)
    model = _load_model(cfg, args.checkpoint, required=True)
    sched = NoiseSchedule(cfg.model_config().t_train, cfg.get("diffusion", "offset"))

    prompt = json.loads(Path(require_input_path(cfg, "prompt", args.prompt)).read_text(encoding="utf-8"))
    lang = prompt.get("lang", "eng_Latn")
    if "sentences" in prompt:
        raw_ctx = np.stack([codec.encode(s, lang) for s in prompt["sentences"]])
    elif "turns" in prompt:
        turns = [dict(t, lang=t.get("lang", lang)) for t in prompt["turns"]]
        raw_ctx = conversation_context(turns, segmenter, codec, sentinels)
    else:
        raise ConfigError("prompt needs a 'sentences' or 'turns' field")

    ev = cfg.eval_settings()
    seed = cfg.seed if args.seed is None else args.seed
    gen_cfg = GenerationConfig(
        max_sentences=args.max_sentences or ev.max_sentences_instruct,
        eot_threshold=ev.eot_threshold,
        target_lang=lang,
        sampler=cfg.sampler_params(seed=seed),
    )
    result = generate(
        normalizer.apply(raw_ctx), model, sched, normalizer, codec, vocab, sentinels, gen_cfg
    )
    for sentence in result.sentences:
        print(sentence)
    print(
        json.dumps(
            {
                "stop_reason": result.stop_reason.value,
                "n_sentences": len(result.sentences),
                "seed": seed,
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_eval_pretrain(args, cfg: RunConfig) -> int:
    codec, sentinels, _ = _stack(cfg)
    normalizer = load_normalizer(require_input_path(cfg, "normalizer", args.normalizer))
    vocab = Vocabulary.from_file(require_input_path(cfg, "vocab", args.vocab), codec)
    model = _load_model(cfg, args.checkpoint, required=True)
    sched = NoiseSchedule(cfg.model_config().t_train, cfg.get("diffusion", "offset"))
    ev = cfg.eval_settings()
    records, _ = prefix_eval(
        read_jsonl(require_input_path(cfg, "input", args.input)),
        model,
        sched,
        normalizer,
        codec,
        vocab,
        min_sentences=ev.min_sentences,
        n_docs=ev.n_docs,
        sampler=cfg.sampler_params(),
        space=ev.space,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_to_jsonl(records, out_dir / "records.jsonl")
    _write_sidecar(out_dir / "records.jsonl", cfg)
    emit_report(records, out_dir, meta=_meta(cfg))
    return 0


def _cmd_eval_instruct(args, cfg: RunConfig) -> int:
    codec, sentinels, segmenter = _stack(cfg)
    normalizer = load_normalizer(require_input_path(cfg, "normalizer", args.normalizer))
    vocab = Vocabulary.from_file(require_input_path(cfg, "vocab", args.vocab), codec)
    model = _load_model(cfg, args.checkpoint, required=True)
    sched = NoiseSchedule(cfg.model_config().t_train, cfg.get("diffusion", "offset"))
    ev = cfg.eval_settings()
    gen_cfg = GenerationConfig(
        max_sentences=ev.max_sentences_instruct,
        eot_threshold=ev.eot_threshold,
        sampler=cfg.sampler_params(),
    )
    records, _ = instruct_eval(
        read_jsonl(require_input_path(cfg, "input", args.input)),
        model,
        sched,
        normalizer,
        codec,
        vocab,
        sentinels,
        segmenter,
        gen_cfg,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_to_jsonl(records, out_dir / "records.jsonl")
    _write_sidecar(out_dir / "records.jsonl", cfg)
    emit_report(records, out_dir, meta=_meta(cfg))
    return 0


def _cmd_align(args, cfg: RunConfig) -> int:
    codec, _, _ = _stack(cfg)
    pairs = (
        (rec["eng"], rec["target"], rec["lang"])
        for rec in read_jsonl(require_input_path(cfg, "input", args.input))
    )
    records, _ = alignment_pilot(pairs, codec, per_lang_cap=cfg.eval_settings().per_lang_cap)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_to_jsonl(records, out_dir / "records.jsonl")
    _write_sidecar(out_dir / "records.jsonl", cfg)
    emit_report(records, out_dir, meta=_meta(cfg))
    return 0


def _cmd_report(args, cfg: RunConfig) -> int:
    records = records_from_jsonl(require_input_path(cfg, "records", args.records))
    emit_report(records, args.out_dir, meta=_meta(cfg))
    return 0


_DISPATCH = {
    "segment": _cmd_segment,
    "build-data": _cmd_build_data,
    "fit-normalizer": _cmd_fit_normalizer,
    "generate": _cmd_generate,
    "eval-pretrain": _cmd_eval_pretrain,
    "eval-instruct": _cmd_eval_instruct,
    "align": _cmd_align,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        cfg = load_config(args.config, args.overrides)
        if args.deterministic:
            cfg.values["run"]["workers"] = 1
    except ConfigError as exc:
        print(f"conceptlm: {exc}", file=sys.stderr)
        return 1

    print(f"config_hash={cfg.config_hash()} seed={cfg.seed}")
    try:
        if args.command in ("pretrain", "finetune"):
            return _cmd_train(args, cfg, args.command)
        return _DISPATCH[args.command](args, cfg)
    except ConfigError as exc:
        print(f"conceptlm: {exc}", file=sys.stderr)
        return 1
    except ConceptLMError as exc:
        print(f"conceptlm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"conceptlm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

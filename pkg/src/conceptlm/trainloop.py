"""Pre-training and instruction-tuning loops over the denoising objective.

Randomness is keyed per (seed, doc_id, step), never drawn from a shared
stream, so the loss is independent of batch-internal ordering and an
interrupted run resumes bit-for-bit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .codec import stable_hash64
from .data import ConceptSequence, InstructionInstance, Normalizer, batch_by_budget, batch_by_count
from .diffusion import NoiseSchedule
from .errors import EmptyCorpus, NoPredictablePositions, ResumeMismatch
from .model import ConceptDiffusionModel, drop_context_for_cfg
from .nn import (
    LrSchedule,
    Tensor,
    adamw_step,
    backward,
    clip_grad_norm,
    init_adamw,
    load_optimizer,
    load_params_into,
    lr_at,
    save_optimizer,
    save_params,
    zero_grads,
)
from .nn.functional import band_mask, causal_mask, mse
from .nn.tensor import add, scale

_NOISE_STREAM = 0
_DROP_STREAM = 1


@dataclass(frozen=True)
class TrainConfig:
    mode: str  # "pretrain" or "finetune"
    steps: int
    peak_lr: float
    warmup: int
    weight_decay: float
    batch_budget: int  # sentence embeddings (pretrain) or instances (finetune)
    seed: int = 0
    floor_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    grad_clip: float = 1.0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_budget < 1:
            raise ValueError("batch_budget must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


def production_pretrain_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(
        mode="pretrain",
        steps=250_000,
        peak_lr=4e-4,
        warmup=10_000,
        weight_decay=0.1,
        batch_budget=229_376,
    )
    return replace(cfg, **overrides) if overrides else cfg


def production_finetune_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(
        mode="finetune",
        steps=20_000,
        peak_lr=1e-5,
        warmup=0,
        weight_decay=0.01,
        batch_budget=512,
        beta2=0.999,
    )
    return replace(cfg, **overrides) if overrides else cfg


def desk_train_config(mode: str = "pretrain", **overrides) -> TrainConfig:
    """Small-scale preset sized for CPU smoke and overfit runs."""
    cfg = TrainConfig(
        mode=mode,
        steps=2_000,
        peak_lr=1e-3,
        warmup=50,
        weight_decay=0.0,
        batch_budget=512,
        floor_lr=1e-5,
        checkpoint_every=500,
        beta2=0.98 if mode == "pretrain" else 0.999,
    )
    return replace(cfg, **overrides) if overrides else cfg


def _doc_rng(seed: int, doc_id: str, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stable_hash64(doc_id), step, stream])


def pretrain_loss(
    batch: list[ConceptSequence],
    model: ConceptDiffusionModel,
    sched: NoiseSchedule,
    normalizer: Normalizer,
    seed: int,
    step: int,
) -> Tensor:
    """Denoising MSE over every position j >= 1, averaged over predicted positions."""
    docs = sorted(batch, key=lambda s: s.doc_id)
    usable = [s for s in docs if len(s) >= 2]
    if not usable:
        raise NoPredictablePositions("no sequence in the batch has a predictable position")
    t_train = model.config.t_train
    p_drop = model.config.cfg_drop_prob
    total = sum(len(s) - 1 for s in usable)

    loss: Tensor | None = None
    for seq in usable:
        n = len(seq)
        e = normalizer.apply(seq.embeddings)
        dropped = bool(
            drop_context_for_cfg([seq], p_drop, _doc_rng(seed, seq.doc_id, step, _DROP_STREAM))[0]
        )
        rng = _doc_rng(seed, seq.doc_id, step, _NOISE_STREAM)
        ts = rng.integers(0, t_train, size=n - 1)
        noise = rng.standard_normal((n - 1, e.shape[1])).astype(e.dtype)
        x_t = sched.q_sample(e[1:], ts, noise)
        positions = np.arange(1, n)
        if dropped:
            pred = model.denoise(x_t, ts, positions, None, None)
        else:
            ctx = model.encode_context(e[: n - 1])
            mask = causal_mask(n - 1, dtype=model.dtype)
            pred = model.denoise(x_t, ts, positions, ctx.hidden, mask)
        term = scale(mse(pred, Tensor(e[1:])), (n - 1) / total)
        loss = term if loss is None else add(loss, term)
    return loss


def finetune_loss(
    batch: list[InstructionInstance],
    model: ConceptDiffusionModel,
    sched: NoiseSchedule,
    normalizer: Normalizer,
    seed: int,
    step: int,
) -> Tensor:
    """Completion-only variant: the loss averages only over target positions."""
    insts = sorted(batch, key=lambda s: s.doc_id)
    usable = [i for i in insts if i.targets.shape[0] >= 1]
    if not usable:
        raise NoPredictablePositions("no instance in the batch has targets")
    t_train = model.config.t_train
    p_drop = model.config.cfg_drop_prob
    total = sum(i.targets.shape[0] for i in usable)

    loss: Tensor | None = None
    for inst in usable:
        c_len = inst.context.shape[0]
        t_len = inst.targets.shape[0]
        expected_mask = np.array([False] * c_len + [True] * t_len)
        if not np.array_equal(inst.loss_mask, expected_mask):
            raise ValueError(f"instance {inst.doc_id!r} has an inconsistent loss mask")
        e = normalizer.apply(np.concatenate([inst.context, inst.targets], axis=0))
        dropped = bool(
            drop_context_for_cfg([inst], p_drop, _doc_rng(seed, inst.doc_id, step, _DROP_STREAM))[0]
        )
        rng = _doc_rng(seed, inst.doc_id, step, _NOISE_STREAM)
        ts = rng.integers(0, t_train, size=t_len)
        noise = rng.standard_normal((t_len, e.shape[1])).astype(e.dtype)
        x_t = sched.q_sample(e[c_len:], ts, noise)
        positions = np.arange(c_len, c_len + t_len)
        if dropped:
            pred = model.denoise(x_t, ts, positions, None, None)
        else:
            ctx = model.encode_context(e[: c_len + t_len - 1])
            mask = band_mask(t_len, c_len + t_len - 1, positions, dtype=model.dtype)
            pred = model.denoise(x_t, ts, positions, ctx.hidden, mask)
        term = scale(mse(pred, Tensor(e[c_len:])), t_len / total)
        loss = term if loss is None else add(loss, term)
    return loss


def _optimizer_step(model, loss, opt_state, schedule, step, grad_clip) -> float:
    zero_grads(model.params)
    backward(loss)
    clip_grad_norm(model.params, grad_clip)
    adamw_step(model.params, opt_state, lr_at(schedule, step))
    return float(loss.data)


def pretrain_step(batch, model, sched, normalizer, opt_state, schedule, step, seed, grad_clip=1.0) -> float:
    loss = pretrain_loss(batch, model, sched, normalizer, seed, step)
    return _optimizer_step(model, loss, opt_state, schedule, step, grad_clip)


def finetune_step(batch, model, sched, normalizer, opt_state, schedule, step, seed, grad_clip=1.0) -> float:
    loss = finetune_loss(batch, model, sched, normalizer, seed, step)
    return _optimizer_step(model, loss, opt_state, schedule, step, grad_clip)


@dataclass
class RunResult:
    checkpoint: Path
    metrics: Path
    steps_done: int
    final_loss: float


def run(
    cfg: TrainConfig,
    items: list,
    out_dir: str | Path,
    model: ConceptDiffusionModel,
    sched: NoiseSchedule,
    normalizer: Normalizer,
    config_hash: str = "",
    version: str = "",
    resume: bool = False,
) -> RunResult:
    """Cycle the corpus for cfg.steps optimizer steps with periodic checkpoints.

    Metrics are appended as JSON lines {step, lr, loss, wall_ms}. A resumed run
    continues from the last checkpoint and reproduces the uninterrupted
    metrics stream from there (wall_ms aside).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.mode == "pretrain":
        batches = batch_by_budget(items, cfg.batch_budget)
        step_fn = pretrain_step
    else:
        batches = batch_by_count(items, cfg.batch_budget)
        step_fn = finetune_step
    if not batches:
        raise EmptyCorpus("no batches could be formed from the corpus")

    schedule = LrSchedule(cfg.peak_lr, cfg.warmup, cfg.steps, cfg.floor_lr)
    opt_state = init_adamw(model.params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    ckpt_path = out_dir / "checkpoint_last.clmw"
    meta_path = out_dir / "checkpoint_last.meta.json"
    metrics_path = out_dir / "metrics.jsonl"

    start_step = 0
    if resume:
        if not meta_path.exists():
            raise ResumeMismatch(f"no checkpoint metadata at {meta_path}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("config_hash") != config_hash:
            raise ResumeMismatch(
                f"config hash changed: checkpoint {meta.get('config_hash')!r} vs current {config_hash!r}"
            )
        load_params_into(ckpt_path, model.params)
        load_optimizer(ckpt_path, opt_state)
        start_step = int(meta["step"])
        if metrics_path.exists():
            # drop any lines written past the checkpoint before the interruption
            kept = [
                line
                for line in metrics_path.read_text(encoding="utf-8").splitlines()
                if line.strip() and json.loads(line)["step"] <= start_step
            ]
            metrics_path.write_text("".join(l + "\n" for l in kept), encoding="utf-8")

    def save(step: int) -> None:
        save_params(ckpt_path, model.params)
        save_optimizer(ckpt_path, opt_state)
        meta_path.write_text(
            json.dumps(
                {
                    "step": step,
                    "config_hash": config_hash,
                    "seed": cfg.seed,
                    "version": version,
                    "mode": cfg.mode,
                },
                sort_keys=True,
            ),
            encoding="utf-8",
        )

    final_loss = float("nan")
    with open(metrics_path, "a" if resume else "w", encoding="utf-8") as mfh:
        for step in range(start_step + 1, cfg.steps + 1):
            t0 = time.perf_counter()
            batch = batches[(step - 1) % len(batches)]
            final_loss = step_fn(
                batch, model, sched, normalizer, opt_state, schedule, step, cfg.seed, cfg.grad_clip
            )
            wall_ms = (time.perf_counter() - t0) * 1e3
            mfh.write(
                json.dumps(
                    {
                        "step": step,
                        "lr": lr_at(schedule, step),
                        "loss": final_loss,
                        "wall_ms": wall_ms,
                    }
                )
                + "\n"
            )
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                save(step)
    return RunResult(ckpt_path, metrics_path, cfg.steps, final_loss)

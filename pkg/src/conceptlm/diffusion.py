"""Noise schedule, forward noising, classifier-free guidance, and the sampler.

The sampler is fully deterministic given (weights, context, seed): it starts
from a scaled Gaussian draw, walks a descending set of timesteps mapped onto
the training schedule, guides the clean prediction, rescales its standard
deviation, converts to noise space, downscales the noise, and takes
noise-free updates between timesteps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadTimestep, NumericalError
from .model import ConceptDiffusionModel, ContextState


@dataclass(frozen=True)
class SamplerParams:
    steps: int = 40
    sigma_init: float = 0.6
    guidance_scale: float = 3.0
    guidance_rescale: float = 0.7
    epsilon_scaling: float = 1.00045
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.sigma_init <= 0.0:
            raise ValueError("sigma_init must be > 0")
        if self.epsilon_scaling <= 0.0:
            raise ValueError("epsilon_scaling must be > 0")
        if not (0.0 <= self.guidance_rescale <= 1.0):
            raise ValueError("guidance_rescale must be in [0, 1]")


class NoiseSchedule:
    """Cosine cumulative-signal schedule with squashed-cosine betas."""

    def __init__(self, t_train: int = 100, offset: float = 0.008):
        if t_train < 1:
            raise ValueError("t_train must be >= 1")
        self.t_train = t_train
        self.offset = offset
        u = np.arange(t_train + 1, dtype=np.float64) / t_train
        f = np.cos((u + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, 0.999)
        self.alpha_bar = np.cumprod(1.0 - betas)
        self.sigma = np.sqrt(1.0 - self.alpha_bar)

    def _check_t(self, t) -> None:
        t = np.asarray(t)
        if t.size and (t.min() < 0 or t.max() >= self.t_train):
            raise BadTimestep(f"timestep outside [0, {self.t_train})")

    def q_sample(self, x0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
        """Forward noising: sqrt(a_bar)*x0 + sqrt(1-a_bar)*noise; t scalar or per-row."""
        self._check_t(t)
        x0 = np.asarray(x0)
        ab = self.alpha_bar[np.asarray(t)]
        signal = np.sqrt(ab).astype(x0.dtype)
        noise_coef = np.sqrt(1.0 - ab).astype(x0.dtype)
        if np.ndim(t) > 0:
            signal = signal[:, None]
            noise_coef = noise_coef[:, None]
        return signal * x0 + noise_coef * np.asarray(noise, dtype=x0.dtype)


def q_sample(x0: np.ndarray, t, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    return sched.q_sample(x0, t, noise)


def guide(
    x0_cond: np.ndarray,
    x0_uncond: np.ndarray,
    guidance_scale: float,
    guidance_rescale: float,
    diagnostics: dict | None = None,
) -> np.ndarray:
    """Combine conditional/unconditional predictions with std-rescaled guidance.

    guidance_scale == 1 returns the conditional prediction unchanged (the
    combination is the identity there, and callers rely on exact equality).
    """
    x0_cond = np.asarray(x0_cond)
    x0_uncond = np.asarray(x0_uncond)
    if x0_cond.shape != x0_uncond.shape:
        raise ValueError(f"shape mismatch: {x0_cond.shape} vs {x0_uncond.shape}")
    if guidance_scale == 1.0:
        return x0_cond
    cfg = x0_uncond + np.asarray(guidance_scale, dtype=x0_cond.dtype) * (x0_cond - x0_uncond)
    if guidance_rescale == 0.0:
        return cfg
    std_cond = x0_cond.std()
    std_cfg = cfg.std()
    if std_cfg == 0.0:
        if diagnostics is not None:
            diagnostics["rescale_skipped"] = diagnostics.get("rescale_skipped", 0) + 1
        return cfg
    rescaled = cfg * (std_cond / std_cfg).astype(x0_cond.dtype)
    phi = np.asarray(guidance_rescale, dtype=x0_cond.dtype)
    return phi * rescaled + (1 - phi) * cfg


def inference_timesteps(t_train: int, steps: int) -> np.ndarray:
    """Strictly decreasing timesteps in [0, t_train), evenly spread, ending at 0."""
    raw = np.linspace(t_train - 1, 0, steps)
    ts = np.round(raw).astype(np.int64)
    seen: set[int] = set()
    out = []
    for t in ts:
        if int(t) not in seen:
            seen.add(int(t))
            out.append(int(t))
    return np.asarray(out, dtype=np.int64)


def sample_next_concept(
    model: ConceptDiffusionModel,
    ctx: ContextState,
    sched: NoiseSchedule,
    params: SamplerParams,
    diagnostics: dict | None = None,
) -> np.ndarray:
    """Sample one next-concept embedding (normalized space), deterministically."""
    d = model.config.d_embedding
    rng = np.random.default_rng(params.seed)
    x = (params.sigma_init * rng.standard_normal(d)).astype(model.dtype)
    ts = inference_timesteps(sched.t_train, params.steps)

    pos = ctx.length
    for i, t in enumerate(ts):
        x0_cond = model.denoise_predict(x, int(t), ctx, pos)
        if params.guidance_scale == 1.0:
            x0 = x0_cond
        else:
            x0_uncond = model.denoise_predict(x, int(t), None, pos)
            x0 = guide(x0_cond, x0_uncond, params.guidance_scale, params.guidance_rescale, diagnostics)
        if not np.all(np.isfinite(x0)):
            raise NumericalError(f"non-finite prediction at sampler step {i} (t={int(t)})")
        if i == len(ts) - 1:
            return x0
        ab_t = sched.alpha_bar[int(t)]
        eps = (x - np.sqrt(ab_t).astype(x.dtype) * x0) / np.sqrt(1.0 - ab_t).astype(x.dtype)
        eps = eps / np.asarray(params.epsilon_scaling, dtype=x.dtype)
        ab_next = sched.alpha_bar[int(ts[i + 1])]
        x = np.sqrt(ab_next).astype(x.dtype) * x0 + np.sqrt(1.0 - ab_next).astype(x.dtype) * eps
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite state after sampler step {i} (t={int(t)})")
    raise AssertionError("unreachable")

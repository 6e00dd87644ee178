"""Concept diffusion model: causal context encoder plus a cross-attending denoiser.

The context tower is a decoder-only transformer over normalized concept
embeddings. The denoiser receives a noised target embedding, sinusoidal
timestep conditioning through per-block adaptive layer-norm, and attends the
encoded context (or a learned null token for the unconditional branch used by
classifier-free guidance).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BadTimestep, ContextOverflow, DimensionMismatch
from .nn import Tensor, functional as F
from .nn.functional import (
    affine_layer_norm,
    causal_self_attention,
    chunk_rows,
    cross_attention,
    linear,
    modulate,
    sinusoidal_features,
)


@dataclass(frozen=True)
class ModelConfig:
    d_embedding: int = 64
    d_model: int = 128
    n_ctx_layers: int = 4
    n_den_layers: int = 4
    n_heads: int = 4
    max_positions: int = 128
    t_train: int = 100
    cfg_drop_prob: float = 0.15

    def __post_init__(self):
        for field_name in ("d_embedding", "d_model", "n_ctx_layers", "n_den_layers", "n_heads", "max_positions", "t_train"):
            if getattr(self, field_name) < 1:
                raise ValueError(f"{field_name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not (0.0 <= self.cfg_drop_prob < 1.0):
            raise ValueError(f"cfg_drop_prob must be in [0, 1), got {self.cfg_drop_prob}")


@dataclass
class ContextState:
    hidden: Tensor  # (length, d_model)
    length: int


_ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


class ConceptDiffusionModel:
    """Weights are plain named tensors; immutable during inference."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        self._build(rng)

    # ---- parameter construction -------------------------------------------------

    def _param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array.astype(self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def _weight(self, name: str, rng, fan_in: int, fan_out: int) -> Tensor:
        return self._param(name, rng.normal(0.0, 0.02, size=(fan_in, fan_out)))

    def _bias(self, name: str, dim: int) -> Tensor:
        return self._param(name, np.zeros(dim))

    def _attn_params(self, prefix: str, rng) -> dict[str, Tensor]:
        d = self.config.d_model
        out = {}
        for key in ("wq", "wk", "wv", "wo"):
            out[key] = self._weight(f"{prefix}.{key}", rng, d, d)
        for key in ("bq", "bk", "bv", "bo"):
            out[key] = self._bias(f"{prefix}.{key}", d)
        return out

    def _mlp_params(self, prefix: str, rng) -> dict[str, Tensor]:
        d = self.config.d_model
        return {
            "w1": self._weight(f"{prefix}.w1", rng, d, 4 * d),
            "b1": self._bias(f"{prefix}.b1", 4 * d),
            "w2": self._weight(f"{prefix}.w2", rng, 4 * d, d),
            "b2": self._bias(f"{prefix}.b2", d),
        }

    def _ln_params(self, prefix: str) -> dict[str, Tensor]:
        d = self.config.d_model
        return {
            "g": self._param(f"{prefix}.g", np.ones(d)),
            "b": self._bias(f"{prefix}.b", d),
        }

    def _build(self, rng) -> None:
        cfg = self.config
        d, de = cfg.d_model, cfg.d_embedding

        self.ctx_in_w = self._weight("ctx.in_proj.w", rng, de, d)
        self.ctx_in_b = self._bias("ctx.in_proj.b", d)
        self.ctx_pos = self._param("ctx.pos", rng.normal(0.0, 0.02, size=(cfg.max_positions, d)))
        self.ctx_blocks = []
        for i in range(cfg.n_ctx_layers):
            self.ctx_blocks.append(
                {
                    "ln1": self._ln_params(f"ctx.block{i}.ln1"),
                    "attn": self._attn_params(f"ctx.block{i}.attn", rng),
                    "ln2": self._ln_params(f"ctx.block{i}.ln2"),
                    "mlp": self._mlp_params(f"ctx.block{i}.mlp", rng),
                }
            )
        self.ctx_ln_f = self._ln_params("ctx.ln_f")

        self.den_in_w = self._weight("den.in_proj.w", rng, de, d)
        self.den_in_b = self._bias("den.in_proj.b", d)
        # one extra row: the target position can sit just past a full context
        self.den_pos = self._param("den.pos", rng.normal(0.0, 0.02, size=(cfg.max_positions + 1, d)))
        self.time_w1 = self._weight("den.time.w1", rng, d, d)
        self.time_b1 = self._bias("den.time.b1", d)
        self.time_w2 = self._weight("den.time.w2", rng, d, d)
        self.time_b2 = self._bias("den.time.b2", d)
        self.null_ctx = self._param("den.null_ctx", rng.normal(0.0, 0.02, size=(1, d)))
        self.den_blocks = []
        for i in range(cfg.n_den_layers):
            self.den_blocks.append(
                {
                    # small random init keeps timestep conditioning live from step 0
                    "ada_w": self._weight(f"den.block{i}.ada.w", rng, d, 6 * d),
                    "ada_b": self._bias(f"den.block{i}.ada.b", 6 * d),
                    "cross": self._attn_params(f"den.block{i}.cross", rng),
                    "mlp": self._mlp_params(f"den.block{i}.mlp", rng),
                }
            )
        self.final_ada_w = self._weight("den.final.ada.w", rng, d, 2 * d)
        self.final_ada_b = self._bias("den.final.ada.b", 2 * d)
        self.out_w = self._weight("den.out.w", rng, d, de)
        self.out_b = self._bias("den.out.b", de)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # ---- context tower ----------------------------------------------------------

    def encode_context(self, embeddings) -> ContextState:
        """Causally encode a (T, d_embedding) sequence of normalized embeddings."""
        cfg = self.config
        x_in = embeddings if isinstance(embeddings, Tensor) else Tensor(np.asarray(embeddings, dtype=self.dtype))
        if x_in.ndim != 2 or x_in.shape[1] != cfg.d_embedding:
            raise DimensionMismatch(f"expected (T, {cfg.d_embedding}), got {x_in.shape}")
        length = x_in.shape[0]
        if length < 1:
            raise DimensionMismatch("context must contain at least one embedding")
        if length > cfg.max_positions:
            raise ContextOverflow(f"context length {length} exceeds max_positions {cfg.max_positions}")

        h = linear(x_in, self.ctx_in_w, self.ctx_in_b) + F.index_rows(self.ctx_pos, np.arange(length))
        for block in self.ctx_blocks:
            a = causal_self_attention(
                affine_layer_norm(h, block["ln1"]["g"], block["ln1"]["b"]),
                block["attn"],
                cfg.n_heads,
            )
            h = h + a
            m = self._mlp(affine_layer_norm(h, block["ln2"]["g"], block["ln2"]["b"]), block["mlp"])
            h = h + m
        h = affine_layer_norm(h, self.ctx_ln_f["g"], self.ctx_ln_f["b"])
        return ContextState(hidden=h, length=length)

    @staticmethod
    def _mlp(x: Tensor, w: dict[str, Tensor]) -> Tensor:
        return linear(F.gelu(linear(x, w["w1"], w["b1"])), w["w2"], w["b2"])

    # ---- denoiser ---------------------------------------------------------------

    def denoise(
        self,
        x_t,
        timesteps: np.ndarray,
        positions: np.ndarray,
        ctx_hidden: Tensor | None,
        attn_mask: np.ndarray | None = None,
    ) -> Tensor:
        """Predict clean embeddings for a batch of independent noised targets.

        x_t: (P, d_embedding); timesteps, positions: (P,) ints. ``ctx_hidden``
        is the (T, d_model) context encoding or None for the unconditional
        branch. ``attn_mask`` is additive (P, T); None means attend everything.
        """
        cfg = self.config
        ts = np.asarray(timesteps, dtype=np.int64)
        if ts.size and (ts.min() < 0 or ts.max() >= cfg.t_train):
            raise BadTimestep(f"timesteps must lie in [0, {cfg.t_train})")
        x_in = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=self.dtype))
        if x_in.ndim != 2 or x_in.shape[1] != cfg.d_embedding:
            raise DimensionMismatch(f"expected (P, {cfg.d_embedding}), got {x_in.shape}")
        pos = np.asarray(positions, dtype=np.int64)

        keys = ctx_hidden if ctx_hidden is not None else self.null_ctx

        h = linear(x_in, self.den_in_w, self.den_in_b) + F.index_rows(self.den_pos, pos)
        t_feat = sinusoidal_features(ts, cfg.d_model, dtype=self.dtype)
        t_emb = linear(F.gelu(linear(Tensor(t_feat), self.time_w1, self.time_b1)), self.time_w2, self.time_b2)

        for block in self.den_blocks:
            ada = linear(t_emb, block["ada_w"], block["ada_b"])
            sh1, sc1, g1, sh2, sc2, g2 = chunk_rows(ada, 6)
            a = cross_attention(
                modulate(F.layer_norm(h), sh1, sc1), keys, block["cross"], cfg.n_heads, attn_mask
            )
            h = h + F.mul(g1, a)
            m = self._mlp(modulate(F.layer_norm(h), sh2, sc2), block["mlp"])
            h = h + F.mul(g2, m)

        sh, sc = chunk_rows(linear(t_emb, self.final_ada_w, self.final_ada_b), 2)
        return linear(modulate(F.layer_norm(h), sh, sc), self.out_w, self.out_b)

    def denoise_predict(
        self, x_t: np.ndarray, t: int, ctx: ContextState | None, pos: int
    ) -> np.ndarray:
        """Single-target prediction in inference mode; attends the whole given context."""
        if not (0 <= t < self.config.t_train):
            raise BadTimestep(f"timestep {t} outside [0, {self.config.t_train})")
        if ctx is not None and pos > ctx.length:
            raise ContextOverflow(f"target position {pos} past context length {ctx.length}")
        from .nn import no_grad

        x = np.asarray(x_t, dtype=self.dtype).reshape(1, -1)
        with no_grad():
            out = self.denoise(
                x,
                np.array([t]),
                np.array([pos]),
                ctx.hidden if ctx is not None else None,
                None,
            )
        return out.data[0]


def drop_context_for_cfg(batch: Sequence, p: float, rng) -> np.ndarray:
    """Decide independently per instance whether to train it unconditionally.

    ``rng`` is a numpy Generator (shared draws) or a sequence of per-instance
    Generators, which makes the decision independent of batch order.
    """
    if not (0.0 <= p < 1.0):
        raise ValueError(f"drop probability must be in [0, 1), got {p}")
    n = len(batch)
    if hasattr(rng, "random"):
        draws = np.array([float(rng.random()) for _ in range(n)])
    else:
        if len(rng) != n:
            raise ValueError("need one rng per batch item")
        draws = np.array([float(r.random()) for r in rng])
    return draws < p

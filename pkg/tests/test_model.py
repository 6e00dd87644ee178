from __future__ import annotations

import numpy as np
import pytest

from conceptlm.data import Normalizer
from conceptlm.diffusion import NoiseSchedule
from conceptlm.errors import BadTimestep, ContextOverflow, DimensionMismatch
from conceptlm.model import ConceptDiffusionModel, ContextState, ModelConfig, drop_context_for_cfg
from conceptlm.nn import backward, no_grad
from conceptlm.trainloop import pretrain_loss
from conceptlm.data import ConceptSequence

from conftest import TINY_MODEL, random_unit_rows


class TestEncodeContext:
    def test_causality_bitwise(self, tiny_model):
        rng = np.random.default_rng(0)
        embs = random_unit_rows(rng, 6, TINY_MODEL.d_embedding)
        with no_grad():
            base = tiny_model.encode_context(embs).hidden.data.copy()
            perturbed = embs.copy()
            perturbed[4] += 3.0
            out = tiny_model.encode_context(perturbed).hidden.data
        assert out[:4].tobytes() == base[:4].tobytes()
        assert not np.array_equal(out[4:], base[4:])

    @pytest.mark.parametrize("layers,heads", [(1, 1), (2, 2), (3, 4)])
    def test_causality_across_configs(self, layers, heads):
        cfg = ModelConfig(
            d_embedding=8, d_model=16, n_ctx_layers=layers, n_den_layers=1,
            n_heads=heads, max_positions=16, t_train=10,
        )
        model = ConceptDiffusionModel(cfg, seed=layers * 10 + heads)
        rng = np.random.default_rng(1)
        embs = random_unit_rows(rng, 5, 8)
        with no_grad():
            base = model.encode_context(embs).hidden.data.copy()
            perturbed = embs.copy()
            perturbed[2] -= 1.0
            out = model.encode_context(perturbed).hidden.data
        assert out[:2].tobytes() == base[:2].tobytes()

    def test_prefix_property(self, tiny_model):
        # equality is up to float32 rounding: BLAS picks different accumulation
        # orders for length-1 vs length-n inputs
        rng = np.random.default_rng(2)
        embs = random_unit_rows(rng, 7, TINY_MODEL.d_embedding)
        with no_grad():
            full = tiny_model.encode_context(embs).hidden.data
            short = tiny_model.encode_context(embs[:1]).hidden.data
            mid = tiny_model.encode_context(embs[:3]).hidden.data
        np.testing.assert_allclose(short, full[:1], atol=1e-5)
        np.testing.assert_allclose(mid, full[:3], atol=1e-5)

    def test_overflow(self, tiny_model):
        rng = np.random.default_rng(3)
        embs = random_unit_rows(rng, TINY_MODEL.max_positions + 1, TINY_MODEL.d_embedding)
        with pytest.raises(ContextOverflow):
            tiny_model.encode_context(embs)

    def test_dimension_mismatch(self, tiny_model):
        with pytest.raises(DimensionMismatch):
            tiny_model.encode_context(np.zeros((3, TINY_MODEL.d_embedding + 1), dtype=np.float32))

    def test_deterministic(self, tiny_model):
        rng = np.random.default_rng(4)
        embs = random_unit_rows(rng, 4, TINY_MODEL.d_embedding)
        with no_grad():
            a = tiny_model.encode_context(embs).hidden.data
            b = tiny_model.encode_context(embs).hidden.data
        assert a.tobytes() == b.tobytes()

    def test_degenerate_weights_match_hand_matrix_product(self):
        """Zero every block, make the input projection the identity: the tower
        reduces to a final layer norm of the raw embeddings, reproduced here
        with a by-hand d=4 computation."""
        cfg = ModelConfig(
            d_embedding=4, d_model=4, n_ctx_layers=1, n_den_layers=1, n_heads=1,
            max_positions=8, t_train=4,
        )
        model = ConceptDiffusionModel(cfg, seed=0)
        for name, p in model.params.items():
            if name.startswith("ctx."):
                p.data = np.zeros_like(p.data)
        model.params["ctx.in_proj.w"].data = np.eye(4, dtype=np.float32)
        for i in range(cfg.n_ctx_layers):
            model.params[f"ctx.block{i}.ln1.g"].data = np.ones(4, dtype=np.float32)
            model.params[f"ctx.block{i}.ln2.g"].data = np.ones(4, dtype=np.float32)
        model.params["ctx.ln_f.g"].data = np.ones(4, dtype=np.float32)

        e = np.array(
            [[0.5, -1.0, 2.0, 0.25], [1.0, 1.0, -1.0, 0.0], [0.0, 3.0, 0.0, -3.0]],
            dtype=np.float32,
        )
        with no_grad():
            hidden = model.encode_context(e).hidden.data
        projected = e @ np.eye(4, dtype=np.float32)  # the input projection, by hand
        mu = projected.mean(axis=1, keepdims=True)
        var = projected.var(axis=1, keepdims=True)
        expected = (projected - mu) / np.sqrt(var + np.float32(1e-5))
        np.testing.assert_allclose(hidden, expected, atol=1e-6)


class TestDenoise:
    def _ctx(self, model, n=3, seed=5) -> ContextState:
        rng = np.random.default_rng(seed)
        with no_grad():
            return model.encode_context(random_unit_rows(rng, n, model.config.d_embedding))

    def test_bitwise_deterministic(self, tiny_model):
        ctx = self._ctx(tiny_model)
        x = np.random.default_rng(6).standard_normal(TINY_MODEL.d_embedding).astype(np.float32)
        a = tiny_model.denoise_predict(x, 3, ctx, 3)
        b = tiny_model.denoise_predict(x, 3, ctx, 3)
        assert a.tobytes() == b.tobytes()

    def test_timestep_conditioning_live(self, tiny_model):
        ctx = self._ctx(tiny_model)
        x = np.random.default_rng(7).standard_normal(TINY_MODEL.d_embedding).astype(np.float32)
        a = tiny_model.denoise_predict(x, 1, ctx, 3)
        b = tiny_model.denoise_predict(x, 8, ctx, 3)
        assert not np.array_equal(a, b)

    def test_unconditional_ignores_context(self, tiny_model):
        ctx = self._ctx(tiny_model)
        x = np.random.default_rng(8).standard_normal(TINY_MODEL.d_embedding).astype(np.float32)
        a = tiny_model.denoise_predict(x, 3, None, 3)
        ctx.hidden.data[:] += 100.0  # arbitrary mutation
        b = tiny_model.denoise_predict(x, 3, None, 3)
        assert a.tobytes() == b.tobytes()

    def test_conditional_reads_context(self, tiny_model):
        ctx = self._ctx(tiny_model, seed=9)
        x = np.random.default_rng(10).standard_normal(TINY_MODEL.d_embedding).astype(np.float32)
        a = tiny_model.denoise_predict(x, 3, ctx, 3)
        ctx2 = self._ctx(tiny_model, seed=11)
        b = tiny_model.denoise_predict(x, 3, ctx2, 3)
        assert not np.array_equal(a, b)

    def test_bad_timestep(self, tiny_model):
        ctx = self._ctx(tiny_model)
        x = np.zeros(TINY_MODEL.d_embedding, dtype=np.float32)
        with pytest.raises(BadTimestep):
            tiny_model.denoise_predict(x, TINY_MODEL.t_train, ctx, 3)
        with pytest.raises(BadTimestep):
            tiny_model.denoise_predict(x, -1, ctx, 3)

    def test_position_past_context_rejected(self, tiny_model):
        ctx = self._ctx(tiny_model, n=3)
        x = np.zeros(TINY_MODEL.d_embedding, dtype=np.float32)
        with pytest.raises(ContextOverflow):
            tiny_model.denoise_predict(x, 1, ctx, 4)

    def test_output_dimension(self, tiny_model):
        ctx = self._ctx(tiny_model)
        x = np.zeros(TINY_MODEL.d_embedding, dtype=np.float32)
        out = tiny_model.denoise_predict(x, 0, ctx, 1)
        assert out.shape == (TINY_MODEL.d_embedding,)


class TestParameterCount:
    def test_matches_analytic_formula(self):
        cfg = TINY_MODEL
        d, de, p = cfg.d_model, cfg.d_embedding, cfg.max_positions
        ctx = (
            de * d + d  # input projection
            + p * d  # positions
            + cfg.n_ctx_layers * (4 * d * d + 4 * d + 8 * d * d + 5 * d + 4 * d)  # attn+mlp+two LN
            + 2 * d  # final LN
        )
        den = (
            de * d + d  # input projection
            + (p + 1) * d  # positions (one extra row past a full context)
            + 2 * (d * d + d)  # timestep MLP
            + d  # null context token
            + cfg.n_den_layers * (6 * d * d + 6 * d + 4 * d * d + 4 * d + 8 * d * d + 5 * d)
            + 2 * d * d + 2 * d  # final adaptive LN projection
            + d * de + de  # output head
        )
        model = ConceptDiffusionModel(cfg, seed=0)
        assert model.num_params() == ctx + den

    def test_default_config_is_desk_scale(self):
        model = ConceptDiffusionModel(ModelConfig(), seed=0)
        assert 1_000_000 <= model.num_params() <= 2_500_000


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.d_embedding, cfg.d_model) == (64, 128)
        assert (cfg.n_ctx_layers, cfg.n_den_layers, cfg.n_heads) == (4, 4, 4)
        assert (cfg.max_positions, cfg.t_train) == (128, 100)
        assert cfg.cfg_drop_prob == 0.15

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"d_model": 10, "n_heads": 4},
            {"n_ctx_layers": 0},
            {"cfg_drop_prob": 1.0},
            {"cfg_drop_prob": -0.1},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)


class TestCfgDropout:
    def test_p_zero_drops_nothing(self):
        rng = np.random.default_rng(0)
        flags = drop_context_for_cfg(list(range(200)), 0.0, rng)
        assert not flags.any()

    def test_stub_rng_drops_everything(self):
        class AlwaysDrop:
            def random(self):
                return 0.0

        flags = drop_context_for_cfg(list(range(50)), 0.15, AlwaysDrop())
        assert flags.all()

    def test_empirical_fraction(self):
        rng = np.random.default_rng(123)
        flags = drop_context_for_cfg(list(range(10_000)), 0.15, rng)
        assert abs(flags.mean() - 0.15) <= 0.02

    def test_per_item_rngs(self):
        rngs = [np.random.default_rng(i) for i in range(10)]
        flags = drop_context_for_cfg(list(range(10)), 0.5, rngs)
        expected = np.array([np.random.default_rng(i).random() < 0.5 for i in range(10)])
        np.testing.assert_array_equal(flags, expected)

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            drop_context_for_cfg([1], 1.0, np.random.default_rng(0))


class TestEndToEndGradient:
    def test_loss_gradient_matches_finite_differences(self):
        """Double-precision finite differences on a 20-parameter random subset."""
        cfg = ModelConfig(
            d_embedding=4, d_model=8, n_ctx_layers=1, n_den_layers=1, n_heads=2,
            max_positions=8, t_train=6, cfg_drop_prob=0.0,
        )
        model = ConceptDiffusionModel(cfg, seed=0, dtype=np.float64)
        sched = NoiseSchedule(cfg.t_train)
        norm = Normalizer.identity(cfg.d_embedding)
        rng = np.random.default_rng(0)
        batch = [
            ConceptSequence("a", "eng_Latn", rng.standard_normal((3, 4)), ["x"] * 3),
            ConceptSequence("b", "eng_Latn", rng.standard_normal((4, 4)), ["x"] * 4),
        ]

        def loss_value() -> float:
            with no_grad():
                pass
            return float(pretrain_loss(batch, model, sched, norm, seed=7, step=1).data)

        from conceptlm.nn import zero_grads

        zero_grads(model.params)
        loss = pretrain_loss(batch, model, sched, norm, seed=7, step=1)
        backward(loss)

        picker = np.random.default_rng(42)
        names = sorted(model.params)
        checked = 0
        h = 1e-5
        while checked < 20:
            name = names[int(picker.integers(len(names)))]
            p = model.params[name]
            idx = int(picker.integers(p.size))
            flat = p.data.reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss_value()
            flat[idx] = orig - h
            down = loss_value()
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = p.grad.reshape(-1)[idx]
            scale_ref = max(abs(numeric), abs(analytic))
            if scale_ref > 1e-7:
                assert abs(analytic - numeric) / scale_ref < 1e-3, (
                    f"{name}[{idx}]: analytic={analytic:.6e} numeric={numeric:.6e}"
                )
            else:
                assert abs(analytic - numeric) < 1e-8
            checked += 1

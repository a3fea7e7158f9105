"""Testes para aasvd.refine: perda, agenda, AdamW e refinamento de bloco."""
from __future__ import annotations

import numpy as np
import pytest

from aasvd.errors import ConfigError, DimensionMismatchError, NoFactorizedLayersError
from aasvd.layerwise import compress_input_agnostic
from aasvd.refine import (
    OptimizerState,
    RefineConfig,
    adamw_step,
    lr_schedule,
    mse_block_loss,
    refine_block,
)
from aasvd.toyformer import LAYER_ORDER, block_forward, replace_linear


def _truncate_all(params, rank):
    for name in LAYER_ORDER:
        params = replace_linear(params, name, compress_input_agnostic(params.dense_weight(name), rank))
    return params


@pytest.fixture
def refine_problem(tiny_block, tiny_dims):
    """Bloco original, truncamento de posto 2 e oito sequências de calibração (X' = X + ruído)."""
    r = np.random.default_rng(31)
    X = r.standard_normal((tiny_dims.d_model, 8 * tiny_dims.seq_len))
    Xp = X + 0.05 * r.standard_normal(X.shape)
    return tiny_block, _truncate_all(tiny_block, 2), X, Xp


class TestRefineConfig:
    def test_defaults(self):
        cfg = RefineConfig()
        assert cfg.base_lr == 1e-4 and cfg.epochs == 25 and cfg.batch_size == 32
        assert cfg.to_dict()["betas"] == [0.9, 0.999]

    @pytest.mark.parametrize(
        "kwargs",
        [{"epochs": 0}, {"batch_size": 0}, {"base_lr": -1.0}, {"warmup_fraction": 1.0},
         {"betas": (1.0, 0.9)}, {"adam_eps": 0.0}, {"weight_decay": -0.1}],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            RefineConfig(**kwargs)


class TestLoss:
    def test_ones_against_zeros(self):
        loss, grad = mse_block_loss(np.ones((2, 2)), np.zeros((2, 2)))
        assert loss == pytest.approx(1.0)
        np.testing.assert_allclose(grad, -0.5 * np.ones((2, 2)))

    def test_gradient_by_finite_differences(self, rng: np.random.Generator):
        Y_ref, Y = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        _, grad = mse_block_loss(Y_ref, Y)
        h = 1e-6
        for idx in np.ndindex(Y.shape):
            plus, minus = Y.copy(), Y.copy()
            plus[idx] += h
            minus[idx] -= h
            fd = (mse_block_loss(Y_ref, plus)[0] - mse_block_loss(Y_ref, minus)[0]) / (2 * h)
            assert fd == pytest.approx(grad[idx], abs=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            mse_block_loss(np.ones((2, 2)), np.ones((2, 3)))


class TestSchedule:
    cfg = RefineConfig(base_lr=1.0, warmup_fraction=0.1)

    def test_starts_at_zero(self):
        assert lr_schedule(0, 100, self.cfg) == 0.0

    def test_warmup_is_linear(self):
        assert lr_schedule(5, 100, self.cfg) == pytest.approx(0.5)

    def test_peak_at_end_of_warmup(self):
        assert lr_schedule(10, 100, self.cfg) == pytest.approx(1.0)

    def test_cosine_midpoint(self):
        assert lr_schedule(55, 100, self.cfg) == pytest.approx(0.5)

    def test_ends_at_zero(self):
        assert lr_schedule(100, 100, self.cfg) == pytest.approx(0.0, abs=1e-15)

    def test_no_warmup(self):
        assert lr_schedule(0, 10, RefineConfig(base_lr=2.0, warmup_fraction=0.0)) == pytest.approx(2.0)

    def test_monotone_after_warmup(self):
        values = [lr_schedule(s, 100, self.cfg) for s in range(10, 101)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestAdamW:
    def test_first_step_by_hand(self):
        params = {"p": np.array([1.0])}
        state = OptimizerState.zeros_like(params)
        new, state = adamw_step(params, {"p": np.array([2.0])}, state, lr=0.1, cfg=RefineConfig())
        # m̂ = 2, v̂ = 4: o passo é lr·2/(2 + eps)
        assert new["p"][0] == pytest.approx(0.9, rel=1e-7)
        assert state.step == 1
        assert state.m["p"][0] == pytest.approx(0.2)
        assert state.v["p"][0] == pytest.approx(0.004)

    def test_decoupled_weight_decay(self):
        params = {"p": np.array([1.0])}
        new, _ = adamw_step(
            params, {"p": np.array([2.0])}, OptimizerState.zeros_like(params),
            lr=0.1, cfg=RefineConfig(weight_decay=0.5),
        )
        assert new["p"][0] == pytest.approx(0.95 - 0.1, rel=1e-7)

    def test_zero_lr_is_noop_but_updates_moments(self):
        params = {"p": np.array([1.0, -2.0])}
        new, state = adamw_step(
            params, {"p": np.array([2.0, 1.0])}, OptimizerState.zeros_like(params), lr=0.0, cfg=RefineConfig()
        )
        np.testing.assert_array_equal(new["p"], params["p"])
        assert np.all(state.m["p"] != 0)

    def test_inputs_not_modified(self):
        params = {"p": np.array([1.0])}
        state = OptimizerState.zeros_like(params)
        adamw_step(params, {"p": np.array([2.0])}, state, lr=0.1, cfg=RefineConfig())
        assert params["p"][0] == 1.0
        assert state.step == 0 and state.m["p"][0] == 0.0

    def test_shape_mismatch(self):
        params = {"p": np.zeros(2)}
        with pytest.raises(DimensionMismatchError):
            adamw_step(params, {"p": np.zeros(3)}, OptimizerState.zeros_like(params), 0.1, RefineConfig())


class TestRefineBlock:
    def test_zero_lr_keeps_loss_constant(self, refine_problem):
        orig, comp, X, Xp = refine_problem
        res = refine_block(orig, comp, X, Xp, RefineConfig(base_lr=0.0, epochs=3, batch_size=3))
        assert res.final_loss == res.initial_loss
        for value in res.loss_trace:
            assert value == pytest.approx(res.initial_loss, rel=1e-10)

    def test_exact_full_rank_starts_at_zero(self, tiny_block, tiny_input):
        full = _truncate_all(tiny_block, 8)
        res = refine_block(tiny_block, full, tiny_input, tiny_input, RefineConfig(base_lr=0.0, epochs=1))
        assert res.initial_loss <= 1e-12

    def test_reduces_loss(self, refine_problem):
        orig, comp, X, Xp = refine_problem
        res = refine_block(orig, comp, X, Xp, RefineConfig(base_lr=1e-3, epochs=30, batch_size=2))
        assert res.final_loss < res.initial_loss
        assert len(res.loss_trace) == 30
        assert res.steps == 30 * 4

    def test_inputs_untouched(self, refine_problem):
        orig, comp, X, Xp = refine_problem
        before_orig = block_forward(orig, X)[0]
        before_comp = block_forward(comp, Xp)[0]
        refine_block(orig, comp, X, Xp, RefineConfig(base_lr=1e-3, epochs=2, batch_size=4))
        np.testing.assert_array_equal(block_forward(orig, X)[0], before_orig)
        np.testing.assert_array_equal(block_forward(comp, Xp)[0], before_comp)

    def test_deterministic_for_seed(self, refine_problem):
        orig, comp, X, Xp = refine_problem
        cfg = RefineConfig(base_lr=1e-3, epochs=3, batch_size=3)
        a = refine_block(orig, comp, X, Xp, cfg, seed=5)
        b = refine_block(orig, comp, X, Xp, cfg, seed=5)
        assert a.loss_trace == b.loss_trace
        np.testing.assert_array_equal(a.params.linears["q_proj"].U, b.params.linears["q_proj"].U)

    def test_dense_layers_are_frozen(self, tiny_block, refine_problem):
        _, _, X, Xp = refine_problem
        comp = replace_linear(tiny_block, "up_proj", compress_input_agnostic(tiny_block.dense_weight("up_proj"), 2))
        res = refine_block(tiny_block, comp, X, Xp, RefineConfig(base_lr=1e-3, epochs=2, batch_size=4))
        np.testing.assert_array_equal(res.params.dense_weight("q_proj"), tiny_block.dense_weight("q_proj"))
        assert not np.array_equal(res.params.linears["up_proj"].U, comp.linears["up_proj"].U)

    def test_needs_factorized_layer(self, tiny_block, tiny_input):
        with pytest.raises(NoFactorizedLayersError):
            refine_block(tiny_block, tiny_block, tiny_input, tiny_input, RefineConfig())

    def test_misaligned_streams(self, refine_problem):
        orig, comp, X, Xp = refine_problem
        with pytest.raises(DimensionMismatchError):
            refine_block(orig, comp, X, Xp[:, :-4], RefineConfig())

"""Testes para aasvd.metrics: distorção, contabilidade e evolução do erro."""
from __future__ import annotations

import numpy as np
import pytest

from aasvd.config import RunConfig
from aasvd.errors import DimensionMismatchError, NonFiniteActivationError
from aasvd.layerwise import RatioPolicy
from aasvd.metrics import (
    EVOLUTION_COLUMNS,
    LayerAccounting,
    accounting,
    cosine_distance,
    error_evolution,
    error_evolution_table,
    evolution_pivot,
    mse,
    summarize_layers,
)
from aasvd.pipeline import ToyModel, compress_model, init_model


class TestDistortion:
    def test_mse_example(self):
        assert mse(np.zeros((2, 2)), np.ones((2, 2))) == pytest.approx(1.0)

    def test_mse_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            mse(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_cosine_identical(self, rng: np.random.Generator):
        Y = rng.standard_normal((4, 6))
        assert cosine_distance(Y, Y) == pytest.approx(0.0, abs=1e-12)

    def test_cosine_opposite(self, rng: np.random.Generator):
        Y = rng.standard_normal((4, 6))
        assert cosine_distance(Y, -Y) == pytest.approx(2.0)

    def test_cosine_scale_invariant(self, rng: np.random.Generator):
        Y = rng.standard_normal((4, 6))
        assert cosine_distance(Y, 3.5 * Y) == pytest.approx(0.0, abs=1e-12)

    def test_cosine_orthogonal(self):
        assert cosine_distance(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])) == pytest.approx(1.0)

    def test_cosine_near_zero_columns(self):
        Y = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
        Yp = np.array([[0.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
        # ambos nulos → 0, um nulo → 1, idênticos → 0
        assert cosine_distance(Y, Yp) == pytest.approx(1.0 / 3.0)

    def test_cosine_vectors(self):
        assert cosine_distance(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(1.0 - 2 ** -0.5)


class TestAccounting:
    def test_square_layer_example(self):
        a = LayerAccounting(4096, 4096, 512)
        assert a.dense_params == 16_777_216
        assert a.params == 4_194_304
        assert a.ratio == pytest.approx(0.25)
        assert a.remapped_ratio == pytest.approx(0.125)
        assert a.flops_before / a.flops_after == pytest.approx(4.0)

    def test_dense_layer(self):
        a = LayerAccounting(8, 4, None)
        assert (a.params, a.ratio, a.remapped_ratio) == (32, 1.0, 1.0)

    def test_full_rank_remap_regime(self):
        totals = summarize_layers([LayerAccounting(8, 8, 8)], remap=True)
        assert totals.effective_ratio == pytest.approx(2.0)
        assert totals.remapped_ratio == pytest.approx(1.0)
        assert totals.remap_regime and totals.remap

    def test_totals(self):
        layers = [LayerAccounting(8, 8, 2), LayerAccounting(16, 8, 4), LayerAccounting(8, 8, None)]
        t = summarize_layers(layers, extra_params=10)
        assert t.linear_params_before == 64 + 128 + 64
        assert t.linear_params_after == 32 + 96 + 64
        assert t.params_after == t.linear_params_after + 10
        assert t.compressed_layers == 2
        assert t.effective_ratio == pytest.approx((32 + 96) / (64 + 128))
        assert t.flop_reduction == pytest.approx(256 / 192)

    def test_model_totals_match_parameter_counts(self, small_model, small_calib):
        compressed, _ = compress_model(small_model, small_calib, RunConfig())
        t = accounting(small_model, compressed)
        assert t.params_before == small_model.parameter_count()
        assert t.params_after == compressed.parameter_count()
        assert t.compressed_layers == 14
        assert not t.remap_regime

    def test_report_ratio_matches_accounting(self, small_model, small_calib):
        compressed, report = compress_model(small_model, small_calib, RunConfig(ratio_policy=RatioPolicy(0.5)))
        assert report.effective_ratio() == pytest.approx(accounting(small_model, compressed).effective_ratio)

    def test_shape_mismatch(self, small_model, tiny_dims):
        with pytest.raises(DimensionMismatchError):
            accounting(small_model, init_model(tiny_dims, 2, seed=0))


class TestErrorEvolution:
    def test_identical_models_give_zeros(self, small_model, small_eval):
        df = error_evolution(small_model, small_model.copy(), small_eval, run_id="same")
        assert list(df.columns) == EVOLUTION_COLUMNS
        assert len(df) == 2 * 3 * 2
        assert np.all(df["value"].abs() <= 1e-12)

    def test_errors_start_at_the_compressed_block(self, small_model, small_calib, small_eval):
        compressed, _ = compress_model(small_model, small_calib, RunConfig())
        mixed = ToyModel(small_model.dims, [small_model.blocks[0], compressed.blocks[1]], small_model.embed_seed)
        df = error_evolution(small_model, mixed, small_eval)
        assert np.all(df.loc[df["block"] == 0, "value"] == 0.0)
        assert np.all(df.loc[df["block"] == 1, "value"] > 0.0)

    def test_final_depth_matches_model_outputs(self, small_model, small_calib, small_eval):
        compressed, _ = compress_model(small_model, small_calib, RunConfig())
        df = error_evolution(small_model, compressed, small_eval)
        last = df[(df["block"] == 1) & (df["site"] == "block_out") & (df["metric"] == "mse")]["value"].iloc[0]
        expected = mse(small_model.forward(small_eval.inputs), compressed.forward(small_eval.inputs))
        assert last == pytest.approx(expected, rel=1e-12)

    def test_table_and_pivot(self, small_model, small_calib, small_eval):
        compressed, _ = compress_model(small_model, small_calib, RunConfig())
        table = error_evolution_table(small_model, {"a": compressed, "b": small_model}, small_eval)
        assert set(table["run_id"]) == {"a", "b"}
        wide = evolution_pivot(table)
        assert len(wide) == 4
        assert "block_out_cosine" in wide.columns
        assert wide.loc[wide["run_id"] == "b", "block_out_mse"].max() == 0.0

    def test_rejects_other_dims(self, small_model, small_eval, tiny_dims):
        with pytest.raises(DimensionMismatchError):
            error_evolution(small_model, init_model(tiny_dims, 2, seed=0), small_eval)

    def test_overflow_names_block(self, overflow_model, small_eval):
        clean = init_model(overflow_model.dims, 3, seed=0)
        with pytest.raises(NonFiniteActivationError) as info:
            error_evolution(clean, overflow_model, small_eval)
        assert (info.value.block, info.value.site) == (2, "block_out")

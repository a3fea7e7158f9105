"""Testes para aasvd.layerwise: aritmética de posto, solver em forma fechada e valores do objetivo."""
from __future__ import annotations

import numpy as np
import pytest

from aasvd.covariance import CovarianceSet
from aasvd.errors import ConfigError, DimensionMismatchError, RankOutOfRangeError, SingularCovarianceError
from aasvd.layerwise import (
    ALL_OBJECTIVES,
    FactorizedLinear,
    Objective,
    RatioPolicy,
    compress_input_agnostic,
    compress_layer,
    compress_layer_variant,
    compress_with_objective,
    objective_error,
    objective_error_from_covariance,
    parameter_ratio,
    rank_from_ratio,
    remapped_ratio,
    remapped_storage,
    closed_form_optimum,
    variant_error,
    variant_optimum,
    weight_error,
)


def _als_run(Y, B, B_pinv, V, tol=1e-10, max_iters=2000):
    """Mínimos quadrados alternados em ‖Y − U·Vᵀ·B‖² até ‖∇‖ < tol; cada passo é não crescente."""
    for _ in range(max_iters):
        U = Y @ np.linalg.pinv(V.T @ B)
        V = (np.linalg.pinv(U) @ Y @ B_pinv).T
        R = Y - U @ (V.T @ B)
        grad_u = -2.0 * R @ B.T @ V
        grad_v = -2.0 * B @ R.T @ U
        if np.sqrt(np.sum(grad_u * grad_u) + np.sum(grad_v * grad_v)) < tol:
            break
    return float(np.sum(R * R))


def _als_objective(W, A, B, k, seed, restarts=20):
    """Melhor valor entre ``restarts`` partidas aleatórias de ALS."""
    r = np.random.default_rng(seed)
    Y = W @ A
    B_pinv = np.linalg.pinv(B)
    return min(_als_run(Y, B, B_pinv, r.standard_normal((W.shape[1], k))) for _ in range(restarts))


# ─── Aritmética de posto ─────────────────────────────────────────────────────

class TestRankFromRatio:
    def test_standard_square(self):
        assert rank_from_ratio(4096, 4096, RatioPolicy(0.25)) == 512

    def test_remap_square(self):
        assert rank_from_ratio(4096, 4096, RatioPolicy(0.125, remap=True)) == 512

    @pytest.mark.parametrize(
        "rho, k",
        [(0.1, 409), (0.2, 819), (0.3, 1228), (0.4, 1638), (0.5, 2048),
         (0.6, 2457), (0.7, 2867), (0.8, 3276), (0.9, 3686), (1.0, 4096)],
    )
    def test_remap_sweep(self, rho: float, k: int):
        assert rank_from_ratio(4096, 4096, RatioPolicy(rho, remap=True)) == k

    def test_rectangular_standard(self):
        # 0.5·6·5/11 = 1.36
        assert rank_from_ratio(6, 5, RatioPolicy(0.5)) == 1
        assert rank_from_ratio(6, 5, RatioPolicy(1.0)) == 2

    def test_clamped_to_one(self):
        assert rank_from_ratio(4, 4, RatioPolicy(0.01)) == 1

    def test_full_rank_with_remap(self):
        assert rank_from_ratio(6, 5, RatioPolicy(1.0, remap=True)) == 5

    def test_standard_budget_respected(self):
        for m, n in [(32, 32), (64, 32), (32, 64), (7, 3)]:
            for rho in (0.2, 0.5, 0.8):
                k = rank_from_ratio(m, n, RatioPolicy(rho))
                assert k == 1 or k * (m + n) <= rho * m * n + 1e-9

    @pytest.mark.parametrize("rho", [0.0, -0.1, 1.5])
    def test_policy_rejects_out_of_range(self, rho: float):
        with pytest.raises(ConfigError):
            RatioPolicy(rho)


class TestRatios:
    def test_square_example(self):
        assert parameter_ratio(4096, 4096, 512) == pytest.approx(0.25)
        assert remapped_ratio(4096, 4096, 512) == pytest.approx(0.125)
        assert remapped_storage(4096, 4096, 512) == 4096 * 512

    def test_rectangular_remap_uses_min(self):
        assert remapped_ratio(64, 32, 8) == pytest.approx(0.25)
        assert remapped_storage(64, 32, 8) == 512


class TestObjectiveParse:
    def test_aliases(self):
        assert Objective.parse("Shift-Aware") is Objective.SHIFT_AWARE
        assert Objective.parse(Objective.ANCHORED) is Objective.ANCHORED

    def test_unknown(self):
        with pytest.raises(ConfigError, match="Unknown objective"):
            Objective.parse("bogus")

    def test_all_objectives_order(self):
        assert [o.value for o in ALL_OBJECTIVES] == [
            "input_agnostic", "input_aware", "shift_aware", "anchored",
        ]


# ─── Solver em forma fechada ─────────────────────────────────────────────────

class TestCompressLayer:
    def test_identity_inputs_is_plain_truncation(self):
        I2 = np.eye(2)
        F = compress_layer(np.diag([2.0, 1.0]), CovarianceSet.from_matrices(I2, I2), k=1)
        np.testing.assert_allclose(F.dense(), np.diag([2.0, 0.0]), atol=1e-12)
        assert F.rank == 1

    @pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
    def test_scaled_conditioning_inputs(self, rng: np.random.Generator, c: float):
        W = rng.standard_normal((5, 4))
        cov = CovarianceSet.from_matrices(np.eye(4), c * np.eye(4))
        F = compress_layer(W, cov, k=2)
        expected = compress_input_agnostic(W, 2).dense() / c
        np.testing.assert_allclose(F.dense(), expected, atol=1e-10)

    def test_factor_shapes(self, layer_problem):
        W, X, Xp = layer_problem
        F = compress_layer(W, CovarianceSet.from_matrices(X, Xp), k=3)
        assert F.U.shape == (6, 3) and F.V.shape == (5, 3)
        assert F.parameter_count == 3 * 11
        np.testing.assert_allclose(F.apply(X), F.dense() @ X, atol=1e-10)

    def test_optimum_matches_closed_form_value(self, layer_problem):
        W, X, Xp = layer_problem
        cov = CovarianceSet.from_matrices(X, Xp)
        for k in range(1, 6):
            F = compress_layer(W, cov, k)
            got = objective_error(W, F, X, Xp)
            assert got == pytest.approx(closed_form_optimum(W, cov, k), rel=1e-8, abs=1e-9)

    @pytest.mark.parametrize("seed", range(50))
    def test_not_beaten_by_alternating_least_squares(self, seed: int):
        r = np.random.default_rng(2000 + seed)
        m, n = (int(v) for v in r.integers(3, 9, size=2))
        l = int(r.integers(n, 3 * n + 1))
        W = r.standard_normal((m, n))
        X = r.standard_normal((n, l))
        Xp = X + 0.5 * r.standard_normal((n, l))
        k = int(r.integers(1, 4))
        F = compress_layer(W, CovarianceSet.from_matrices(X, Xp), k)
        closed = objective_error(W, F, X, Xp)
        als = _als_objective(W, X, Xp, k, seed)
        assert closed <= als * (1.0 + 1e-6) + 1e-12

    def test_perturbations_do_not_improve(self, layer_problem, rng: np.random.Generator):
        W, X, Xp = layer_problem
        F = compress_layer(W, CovarianceSet.from_matrices(X, Xp), 2)
        best = objective_error(W, F, X, Xp)
        for _ in range(30):
            G = FactorizedLinear(
                U=F.U + 1e-3 * rng.standard_normal(F.U.shape),
                V=F.V + 1e-3 * rng.standard_normal(F.V.shape),
            )
            assert objective_error(W, G, X, Xp) >= best - 1e-9

    def test_evd_matches_cholesky(self, layer_problem):
        W, X, Xp = layer_problem
        cov = CovarianceSet.from_matrices(X, Xp)
        a = compress_layer(W, cov, 2, method="cholesky")
        b = compress_layer(W, cov, 2, method="evd")
        np.testing.assert_allclose(a.dense(), b.dense(), atol=1e-8)

    def test_zero_weight(self, layer_problem):
        _, X, Xp = layer_problem
        W = np.zeros((6, 5))
        cov = CovarianceSet.from_matrices(X, Xp)
        F = compress_layer(W, cov, 2)
        np.testing.assert_array_equal(F.dense(), np.zeros((6, 5)))
        assert objective_error(W, F, X, Xp) == 0.0
        assert closed_form_optimum(W, cov, 2) == pytest.approx(0.0, abs=1e-12)

    def test_rank_out_of_range(self, layer_problem):
        W, X, Xp = layer_problem
        with pytest.raises(RankOutOfRangeError):
            compress_layer(W, CovarianceSet.from_matrices(X, Xp), 6)

    def test_covariance_dim_mismatch(self, layer_problem):
        W, _, _ = layer_problem
        I3 = np.eye(3)
        with pytest.raises(DimensionMismatchError):
            compress_layer(W, CovarianceSet.from_matrices(I3, I3), 1)


class TestRegularization:
    @pytest.fixture
    def singular_problem(self, layer_problem):
        W, X, Xp = layer_problem
        Xp = Xp.copy()
        Xp[4, :] = 0.0
        return W, X, Xp

    def test_strict_raises(self, singular_problem):
        W, X, Xp = singular_problem
        with pytest.raises(SingularCovarianceError):
            compress_layer(W, CovarianceSet.from_matrices(X, Xp), 2)

    def test_strict_rejects_numerically_low_rank(self, layer_problem, rng: np.random.Generator):
        W, X, _ = layer_problem
        Xp = rng.standard_normal((5, 2)) @ rng.standard_normal((2, 40))
        with pytest.raises(SingularCovarianceError, match="numerically singular"):
            compress_layer(W, CovarianceSet.from_matrices(X, Xp), 2)

    @pytest.mark.parametrize("regularization", ["tikhonov", "pinv", 1e-3])
    def test_regularized_succeeds(self, singular_problem, regularization):
        W, X, Xp = singular_problem
        F = compress_layer(W, CovarianceSet.from_matrices(X, Xp), 2, regularization=regularization)
        assert np.all(np.isfinite(F.dense()))

    def test_pinv_matches_strict_when_pd(self, layer_problem):
        W, X, Xp = layer_problem
        cov = CovarianceSet.from_matrices(X, Xp)
        a = compress_layer(W, cov, 2)
        b = compress_layer(W, cov, 2, regularization="pinv")
        np.testing.assert_allclose(a.dense(), b.dense(), atol=1e-8)

    def test_unknown_regularization(self, layer_problem):
        W, X, Xp = layer_problem
        with pytest.raises(ConfigError, match="Unknown regularization"):
            compress_layer(W, CovarianceSet.from_matrices(X, Xp), 2, regularization="ridge")


class TestInputAgnostic:
    def test_diagonal(self):
        W = np.diag([3.0, 2.0, 1.0])
        F = compress_input_agnostic(W, 2)
        np.testing.assert_allclose(F.dense(), np.diag([3.0, 2.0, 0.0]), atol=1e-12)
        assert weight_error(W, F) == pytest.approx(1.0)
        assert F.objective_used is Objective.INPUT_AGNOSTIC

    def test_full_rank_exact(self, rng: np.random.Generator):
        W = rng.standard_normal((4, 3))
        np.testing.assert_allclose(compress_input_agnostic(W, 3).dense(), W, atol=1e-10)


# ─── Objetivos ───────────────────────────────────────────────────────────────

class TestObjectives:
    @pytest.mark.parametrize("seed", range(20))
    def test_unshifted_inputs_collapse_variants(self, seed: int):
        r = np.random.default_rng(3000 + seed)
        W = r.standard_normal((5, 4))
        X = r.standard_normal((4, 15))
        anchored = CovarianceSet.from_matrices(X, X)
        dense = {
            obj: compress_with_objective(W, anchored, 2, obj).dense()
            for obj in (Objective.INPUT_AWARE, Objective.SHIFT_AWARE, Objective.ANCHORED)
        }
        np.testing.assert_allclose(dense[Objective.ANCHORED], dense[Objective.INPUT_AWARE], atol=1e-8)
        np.testing.assert_allclose(dense[Objective.ANCHORED], dense[Objective.SHIFT_AWARE], atol=1e-8)

    def test_anchored_dominates_on_its_objective(self, layer_problem):
        W, X, Xp = layer_problem
        anchored = CovarianceSet.from_matrices(X, Xp)
        for k in (1, 2, 3):
            values = {
                obj: variant_error(W, compress_with_objective(W, anchored, k, obj), Objective.ANCHORED, anchored)
                for obj in ALL_OBJECTIVES
            }
            best = values[Objective.ANCHORED]
            for obj, value in values.items():
                assert best <= value + 1e-9 * (1.0 + value), obj

    def test_each_variant_attains_its_optimum(self, layer_problem):
        W, X, Xp = layer_problem
        anchored = CovarianceSet.from_matrices(X, Xp)
        for obj in ALL_OBJECTIVES:
            F = compress_with_objective(W, anchored, 2, obj)
            assert variant_error(W, F, obj, anchored) == pytest.approx(
                variant_optimum(W, 2, obj, anchored), rel=1e-8, abs=1e-9
            )

    def test_raw_and_trace_paths_agree(self, layer_problem):
        W, X, Xp = layer_problem
        cov = CovarianceSet.from_matrices(X, Xp)
        F = compress_layer(W, cov, 2)
        raw = objective_error(W, F, X, Xp)
        assert objective_error_from_covariance(W, F, cov) == pytest.approx(raw, rel=1e-8)

    def test_raw_and_trace_paths_agree_for_arbitrary_factors(self, layer_problem, rng: np.random.Generator):
        W, X, Xp = layer_problem
        F = FactorizedLinear(U=rng.standard_normal((6, 2)), V=rng.standard_normal((5, 2)))
        raw = objective_error(W, F, X, Xp)
        traced = objective_error_from_covariance(W, F, CovarianceSet.from_matrices(X, Xp))
        assert traced == pytest.approx(raw, rel=1e-8)

    def test_variant_from_raw_activations(self, layer_problem):
        W, X, Xp = layer_problem
        a = compress_layer_variant(W, X, Xp, 2, Objective.ANCHORED)
        b = compress_layer_variant(W, X, Xp, 2, "anchored", batch_columns=7)
        np.testing.assert_allclose(a.dense(), b.dense(), atol=1e-9)

    def test_variant_rejects_misaligned(self, layer_problem):
        W, X, Xp = layer_problem
        with pytest.raises(DimensionMismatchError):
            compress_layer_variant(W, X, Xp[:, :-1], 2, Objective.ANCHORED)

    def test_objective_error_shape_check(self, layer_problem):
        W, X, Xp = layer_problem
        F = compress_input_agnostic(W, 2)
        with pytest.raises(DimensionMismatchError):
            objective_error(W, F, X[:3], Xp[:3])

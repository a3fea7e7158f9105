"""
Compressão de posto baixo, em forma fechada, de uma camada linear.

Dados W (m×n), entradas do alvo A e entradas de condicionamento B (n×l), o
minimizador de posto k de ‖W·A − W'·B‖_F² é

    M  = W·C·S⁻¹·R        com C = A·Bᵀ, S = B·Bᵀ = R·Rᵀ
    W' = SVD_k(M)·R⁻¹  →  U = U_k·Σ_k,  V = R⁻ᵀ·V_k

Quatro objetivos escolhem (A, B):

    input_agnostic   ‖W − W'‖²           truncamento direto de W
    input_aware      A = B = X           ativações originais (branqueamento)
    shift_aware      A = B = X'          ativações deslocadas
    anchored         A = X,  B = X'      alvos originais, entradas deslocadas

Uso típico:
    k   = rank_from_ratio(m, n, RatioPolicy(0.5))
    cov = CovarianceSet.from_matrices(X, Xp)
    F   = compress_layer(W, cov, k)
    err = objective_error_from_covariance(W, F, cov)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np

from aasvd.covariance import CovarianceSet, accumulate_streams
from aasvd.errors import (
    ConfigError,
    DimensionMismatchError,
    NotPositiveDefiniteError,
    RankOutOfRangeError,
    SingularCovarianceError,
    SingularFactorError,
)
from aasvd.linalg import (
    NOISE_FLOOR,
    FactorMethod,
    as_matrix,
    default_tikhonov_eps,
    factor_spd,
    invert_factor,
    pinv_sqrt,
    relative_min_eigenvalue,
    tikhonov_factor,
    truncated_svd,
)

Regularization = Union[None, str, float]


# ─── Objetivos e políticas ───────────────────────────────────────────────────

class Objective(str, Enum):
    INPUT_AGNOSTIC = "input_agnostic"
    INPUT_AWARE = "input_aware"
    SHIFT_AWARE = "shift_aware"
    ANCHORED = "anchored"

    @classmethod
    def parse(cls, value: Union[str, "Objective"]) -> "Objective":
        if isinstance(value, Objective):
            return value
        try:
            return cls(str(value).strip().lower().replace("-", "_"))
        except ValueError:
            raise ConfigError(
                f"Unknown objective: '{value}'. Available: {[o.value for o in cls]}"
            ) from None


ALL_OBJECTIVES: Tuple[Objective, ...] = tuple(Objective)


@dataclass(frozen=True)
class RatioPolicy:
    """Fração alvo de parâmetros retidos ρ e se vale a regra de posto remapeada."""

    target_ratio: float
    remap: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.target_ratio <= 1.0:
            raise ConfigError(f"target_ratio must be in (0, 1], got {self.target_ratio}")


@dataclass(frozen=True)
class FactorizedLinear:
    """W' = U·Vᵀ with U m×k and V n×k."""

    U: np.ndarray
    V: np.ndarray
    objective_used: Objective = Objective.ANCHORED
    degenerate: bool = False
    numerical_rank: int = 0

    def __post_init__(self) -> None:
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[1] != self.V.shape[1]:
            raise DimensionMismatchError(
                f"factors must be m×k and n×k, got U {self.U.shape} and V {self.V.shape}"
            )

    @property
    def rank(self) -> int:
        return int(self.U.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.U.shape[0])

    @property
    def in_dim(self) -> int:
        return int(self.V.shape[0])

    @property
    def parameter_count(self) -> int:
        return self.rank * (self.out_dim + self.in_dim)

    def dense(self) -> np.ndarray:
        """U·Vᵀ materializado (só para análise; o forward nunca o constrói)."""
        return self.U @ self.V.T

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.U @ (self.V.T @ X)


# ─── Aritmética de posto ─────────────────────────────────────────────────────

def rank_from_ratio(m: int, n: int, policy: RatioPolicy) -> int:
    """
    Posto implicado por uma razão de parâmetros retidos.

    standard: k = floor(ρ·m·n/(m+n))      de modo que k(m+n) ≤ ρ·m·n
    remap:    k = floor(ρ·min(m, n))

    Resultado limitado a [1, min(m, n)].
    """
    if m < 1 or n < 1:
        raise DimensionMismatchError(f"layer shape must be positive, got {m}×{n}")
    rho = policy.target_ratio
    if policy.remap:
        raw = rho * min(m, n)
    else:
        raw = rho * m * n / (m + n)
    # tolera erro de representação como 0.1·4096 = 409.60000000000002
    k = int(math.floor(raw + 1e-9))
    return max(1, min(k, min(m, n)))


def parameter_ratio(m: int, n: int, k: int) -> float:
    """Razão padrão k(m+n)/(mn)."""
    return k * (m + n) / (m * n)


def remapped_ratio(m: int, n: int, k: int) -> float:
    """Razão remapeada max(m,n)·k/(mn) = k/min(m,n)."""
    return k / min(m, n)


def remapped_storage(m: int, n: int, k: int) -> int:
    """Armazenamento equivalente em precisão cheia dos fatores remapeados: max(m, n)·k."""
    return max(m, n) * k


# ─── Branqueamento ───────────────────────────────────────────────────────────

def _whitening(
    S: np.ndarray,
    method: FactorMethod,
    regularization: Regularization,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Devolve (T, back) tais que M = W·C·T e V = back·V_k.

    Strict / Tikhonov: T = S⁻¹·R = R⁻ᵀ, back = R⁻ᵀ.
    pinv:              T = back = S^{+1/2}.
    """
    if regularization == "pinv":
        P = pinv_sqrt(S)
        return P, P

    if regularization is None:
        rel = relative_min_eigenvalue(S)
        if rel <= NOISE_FLOOR:
            raise SingularCovarianceError(
                f"S = B·Bᵀ is numerically singular (λ_min/λ_max = {rel:.3e}); "
                f"pass regularization='tikhonov' or 'pinv'"
            )
        try:
            R = factor_spd(S, method=method)
            R_inv = invert_factor(R)
        except NotPositiveDefiniteError as exc:
            raise SingularCovarianceError(
                f"S = B·Bᵀ is not positive definite (smallest eigenvalue "
                f"{exc.smallest_eigenvalue:.3e}); pass regularization='tikhonov' or 'pinv'"
            ) from exc
        except SingularFactorError as exc:
            raise SingularCovarianceError(
                f"S = B·Bᵀ is numerically singular (condition {exc.condition:.3e}); "
                f"pass regularization='tikhonov' or 'pinv'"
            ) from exc
        return R_inv.T, R_inv.T

    if regularization == "tikhonov":
        eps = default_tikhonov_eps(S)
    elif isinstance(regularization, (int, float)) and not isinstance(regularization, bool):
        eps = float(regularization)
    else:
        raise ConfigError(
            f"Unknown regularization: '{regularization}'. Use None, 'tikhonov', 'pinv' or a float eps"
        )
    R = tikhonov_factor(S, eps, method=method)
    R_inv = invert_factor(R)
    return R_inv.T, R_inv.T


def _check_rank(W: np.ndarray, k: int) -> None:
    m, n = W.shape
    if not 1 <= k <= min(m, n):
        raise RankOutOfRangeError(f"rank k={k} outside [1, {min(m, n)}] for a {m}×{n} layer")


def _check_cov(W: np.ndarray, cov: CovarianceSet) -> None:
    if cov.dim != W.shape[1]:
        raise DimensionMismatchError(
            f"covariance dim {cov.dim} does not match layer input dim {W.shape[1]}"
        )


def _project(W, cov, method, regularization):
    T, back = _whitening(cov.S, method, regularization)
    M = W @ cov.C @ T
    return M, back


# ─── Solvers ─────────────────────────────────────────────────────────────────

def compress_layer(
    W: np.ndarray,
    cov: CovarianceSet,
    k: int,
    method: FactorMethod = "cholesky",
    regularization: Regularization = None,
    objective: Objective = Objective.ANCHORED,
) -> FactorizedLinear:
    """
    Fatoração ótima de posto k para ‖W·A − U·Vᵀ·B‖_F² a partir das estatísticas de (A, B).

    Args:
        W              — peso m×n
        cov            — CovarianceSet com C = A·Bᵀ, S = B·Bᵀ, G = A·Aᵀ
        k              — posto alvo, 1 ≤ k ≤ min(m, n)
        method         — fatoração de S: 'cholesky' | 'evd'
        regularization — None (S deve ser PD), 'tikhonov', um eps float ou 'pinv'
        objective      — rótulo gravado no resultado
    """
    W = as_matrix(W, "W")
    _check_rank(W, k)
    _check_cov(W, cov)

    M, back = _project(W, cov, method, regularization)
    trunc = truncated_svd(M, k)
    return FactorizedLinear(
        U=trunc.U_k * trunc.sigma_k,
        V=back @ trunc.V_k,
        objective_used=Objective.parse(objective),
        degenerate=trunc.degenerate,
        numerical_rank=trunc.numerical_rank,
    )


def compress_input_agnostic(W: np.ndarray, k: int) -> FactorizedLinear:
    """SVD_k(W): U = U_k·Σ_k, V = V_k."""
    W = as_matrix(W, "W")
    _check_rank(W, k)
    trunc = truncated_svd(W, k)
    return FactorizedLinear(
        U=trunc.U_k * trunc.sigma_k,
        V=trunc.V_k.copy(),
        objective_used=Objective.INPUT_AGNOSTIC,
        degenerate=trunc.degenerate,
        numerical_rank=trunc.numerical_rank,
    )


def covariance_for_objective(obj: Objective, anchored: CovarianceSet) -> Optional[CovarianceSet]:
    """
    Estatísticas de uma variante, derivadas do conjunto ancorado (A = X, B = X').

    O conjunto ancorado guarda C = X·X'ᵀ, S = X'·X'ᵀ, G = X·Xᵀ; input-aware usa
    (G, G, G) e shift-aware (S, S, S). Input-agnostic não usa nenhuma.
    """
    obj = Objective.parse(obj)
    if obj is Objective.INPUT_AGNOSTIC:
        return None
    if obj is Objective.ANCHORED:
        return anchored
    if obj is Objective.INPUT_AWARE:
        return CovarianceSet(C=anchored.G, S=anchored.G, G=anchored.G, columns=anchored.columns)
    return CovarianceSet(C=anchored.S, S=anchored.S, G=anchored.S, columns=anchored.columns)


def compress_with_objective(
    W: np.ndarray,
    anchored: CovarianceSet,
    k: int,
    obj: Objective,
    method: FactorMethod = "cholesky",
    regularization: Regularization = None,
) -> FactorizedLinear:
    """Despacha pelo objetivo usando um único CovarianceSet ancorado."""
    obj = Objective.parse(obj)
    if obj is Objective.INPUT_AGNOSTIC:
        return compress_input_agnostic(W, k)
    cov = covariance_for_objective(obj, anchored)
    return compress_layer(W, cov, k, method=method, regularization=regularization, objective=obj)


def compress_layer_variant(
    W: np.ndarray,
    X: np.ndarray,
    Xp: np.ndarray,
    k: int,
    obj: Objective,
    method: FactorMethod = "cholesky",
    regularization: Regularization = None,
    batch_columns: Optional[int] = None,
) -> FactorizedLinear:
    """
    Comprime W a partir das ativações brutas original (X) e deslocada (X') sob um objetivo.

    X e X' devem estar alinhadas por coluna (a coluna i de ambas vem do mesmo token).
    """
    W = as_matrix(W, "W")
    X = as_matrix(X, "X")
    Xp = as_matrix(Xp, "Xp")
    if X.shape != Xp.shape:
        raise DimensionMismatchError(f"X and X' must have equal shapes, got {X.shape} and {Xp.shape}")
    if X.shape[0] != W.shape[1]:
        raise DimensionMismatchError(f"activations have {X.shape[0]} rows, layer expects {W.shape[1]}")
    anchored = accumulate_streams(X, Xp, batch_columns=batch_columns)
    return compress_with_objective(W, anchored, k, obj, method=method, regularization=regularization)


# ─── Valores do objetivo ─────────────────────────────────────────────────────

def objective_error(W: np.ndarray, F: FactorizedLinear, A: np.ndarray, B: np.ndarray) -> float:
    """‖W·A − U·Vᵀ·B‖_F² a partir das matrizes brutas."""
    W = as_matrix(W, "W")
    if A.shape != B.shape or A.shape[0] != W.shape[1] or F.in_dim != W.shape[1] or F.out_dim != W.shape[0]:
        raise DimensionMismatchError(
            f"incompatible shapes: W {W.shape}, U {F.U.shape}, V {F.V.shape}, A {A.shape}, B {B.shape}"
        )
    R = W @ A - F.U @ (F.V.T @ B)
    return float(np.sum(R * R))


def objective_error_from_covariance(W: np.ndarray, F: FactorizedLinear, cov: CovarianceSet) -> float:
    """
    Expansão em traços do mesmo objetivo:

        tr(W·G·Wᵀ) − 2·tr(W·C·V·Uᵀ) + tr(UᵀU · VᵀSV)
    """
    W = as_matrix(W, "W")
    if cov.dim != W.shape[1] or F.in_dim != W.shape[1] or F.out_dim != W.shape[0]:
        raise DimensionMismatchError(
            f"incompatible shapes: W {W.shape}, U {F.U.shape}, V {F.V.shape}, cov dim {cov.dim}"
        )
    target = float(np.sum((W @ cov.G) * W))
    cross = float(np.sum((W @ cov.C @ F.V) * F.U))
    fit = float(np.sum((F.U.T @ F.U) * (F.V.T @ cov.S @ F.V)))
    return max(target - 2.0 * cross + fit, 0.0)


def weight_error(W: np.ndarray, F: FactorizedLinear) -> float:
    """‖W − U·Vᵀ‖_F², o objetivo input-agnostic."""
    D = as_matrix(W, "W") - F.dense()
    return float(np.sum(D * D))


def closed_form_optimum(
    W: np.ndarray,
    cov: CovarianceSet,
    k: int,
    method: FactorMethod = "cholesky",
    regularization: Regularization = None,
) -> float:
    """
    Valor mínimo de ‖W·A − W'·B‖_F² sobre W' de posto k:

        tr(W·G·Wᵀ) − ‖M‖_F² + Σ_{i>k} σ_i(M)²
    """
    W = as_matrix(W, "W")
    _check_rank(W, k)
    _check_cov(W, cov)
    M, _ = _project(W, cov, method, regularization)
    tail = truncated_svd(M, k).tail_energy
    value = float(np.sum((W @ cov.G) * W)) - float(np.sum(M * M)) + tail
    return max(value, 0.0)


def variant_error(
    W: np.ndarray,
    F: FactorizedLinear,
    obj: Objective,
    anchored: CovarianceSet,
) -> float:
    """Valor de ``F`` sob o objetivo ``obj`` (estatísticas tiradas do conjunto ancorado)."""
    obj = Objective.parse(obj)
    if obj is Objective.INPUT_AGNOSTIC:
        return weight_error(W, F)
    return objective_error_from_covariance(W, F, covariance_for_objective(obj, anchored))


def variant_optimum(
    W: np.ndarray,
    k: int,
    obj: Objective,
    anchored: CovarianceSet,
    method: FactorMethod = "cholesky",
    regularization: Regularization = None,
) -> float:
    """Valor ótimo de ``obj``; no input-agnostic é a energia da cauda de W."""
    obj = Objective.parse(obj)
    if obj is Objective.INPUT_AGNOSTIC:
        return truncated_svd(as_matrix(W, "W"), k).tail_energy
    return closed_form_optimum(
        W, covariance_for_objective(obj, anchored), k, method=method, regularization=regularization
    )

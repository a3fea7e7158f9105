"""
Kernels de álgebra linear densa usados por todos os solvers do pacote.

Todas as matrizes são ``np.ndarray`` 2-D em ``float64``. As funções são puras:
não alteram as entradas e sempre devolvem arrays novos.

Uso típico:
    from aasvd.linalg import factor_spd, truncated_svd, invert_factor

    R = factor_spd(S, method="cholesky")      # S = R·Rᵀ
    trunc = truncated_svd(M, k=4)             # truncamento de Eckart–Young
    R_inv = invert_factor(R)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg as sla

from aasvd.errors import (
    DimensionMismatchError,
    NotPositiveDefiniteError,
    NotSymmetricError,
    RankOutOfRangeError,
    SingularFactorError,
)

FactorMethod = Literal["cholesky", "evd"]
FACTOR_METHODS = ("cholesky", "evd")

SYMMETRY_TOL = 1e-10
NOISE_FLOOR = 1e-12          # σ abaixo de NOISE_FLOOR·σ₁ conta como zero
MAX_CONDITION = 1e12


# ─── Auxiliares ──────────────────────────────────────────────────────────────

def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """``a`` como array 2-D float64; rejeita NaN/Inf."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def symmetrize(S: np.ndarray) -> np.ndarray:
    """(S + Sᵀ)/2; covariâncias acumuladas carregam assimetria de arredondamento."""
    return 0.5 * (S + S.T)


def _check_symmetric(S: np.ndarray, name: str = "S") -> np.ndarray:
    S = as_matrix(S, name)
    if S.shape[0] != S.shape[1]:
        raise DimensionMismatchError(f"{name} must be square, got {S.shape}")
    scale = max(float(np.max(np.abs(S))), 1.0) if S.size else 1.0
    asym = float(np.max(np.abs(S - S.T))) if S.size else 0.0
    if asym > SYMMETRY_TOL * scale:
        raise NotSymmetricError(
            f"{name} is not symmetric: max |S - Sᵀ| = {asym:.3e} (tolerance {SYMMETRY_TOL:.0e})"
        )
    return symmetrize(S)


def _normalize_signs(U: np.ndarray, Vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverte o sinal dos pares singulares para que a maior entrada (em módulo) de cada u seja positiva."""
    if U.size == 0:
        return U, Vt
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, Vt * signs[:, None]


# ─── Fatoração SPD ───────────────────────────────────────────────────────────

def factor_spd(S: np.ndarray, method: FactorMethod = "cholesky") -> np.ndarray:
    """
    Fatora uma matriz SPD como S = R·Rᵀ.

    method:
        cholesky — R triangular inferior
        evd      — R = Q·Λ^{1/2} a partir de S = QΛQᵀ

    Falhas de definição positiva nunca são regularizadas aqui; use
    ``tikhonov_factor`` ou ``pinv_sqrt`` explicitamente.
    """
    if method not in FACTOR_METHODS:
        raise ValueError(f"Unknown factor method: '{method}'. Available: {list(FACTOR_METHODS)}")
    S = _check_symmetric(S)

    if method == "cholesky":
        try:
            return sla.cholesky(S, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            smallest = float(sla.eigvalsh(S)[0]) if S.size else 0.0
            raise NotPositiveDefiniteError(
                f"S is not positive definite (Cholesky pivot failed; smallest eigenvalue {smallest:.3e})",
                smallest_eigenvalue=smallest,
            ) from exc

    evals, Q = sla.eigh(S, check_finite=False)
    smallest = float(evals[0]) if evals.size else 0.0
    if smallest <= 0.0:
        raise NotPositiveDefiniteError(
            f"S is not positive definite (smallest eigenvalue {smallest:.3e})",
            smallest_eigenvalue=smallest,
        )
    return Q * np.sqrt(evals)


def tikhonov_factor(S: np.ndarray, eps: float, method: FactorMethod = "cholesky") -> np.ndarray:
    """Fator da matriz regularizada: S + eps·I = R·Rᵀ."""
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    S = _check_symmetric(S)
    n = S.shape[0]
    scale = max(float(np.max(np.abs(S))), 1.0) if S.size else 1.0
    smallest = float(sla.eigvalsh(S)[0]) if n else 0.0
    if smallest < -SYMMETRY_TOL * scale:
        raise NotPositiveDefiniteError(
            f"S is not positive semi-definite (smallest eigenvalue {smallest:.3e})",
            smallest_eigenvalue=smallest,
        )
    return factor_spd(S + eps * np.eye(n), method=method)


def relative_min_eigenvalue(S: np.ndarray) -> float:
    """λ_min/λ_max de uma matriz simétrica (0.0 quando S = 0)."""
    S = _check_symmetric(S)
    if not S.size:
        return 0.0
    evals = sla.eigvalsh(S, check_finite=False)
    top = float(evals[-1])
    return float(evals[0]) / top if top > 0 else 0.0


def default_tikhonov_eps(S: np.ndarray) -> float:
    """Regularizador relativo à escala: 1e-6 · trace(S)/n (1e-6 quando S = 0)."""
    n = S.shape[0]
    eps = 1e-6 * float(np.trace(S)) / max(n, 1)
    return eps if eps > 0 else 1e-6


def sqrt_psd(S: np.ndarray) -> np.ndarray:
    """Raiz quadrada simétrica S^{1/2} de uma matriz PSD (ruído negativo cortado em 0)."""
    S = _check_symmetric(S)
    evals, Q = sla.eigh(S, check_finite=False)
    return (Q * np.sqrt(np.clip(evals, 0.0, None))) @ Q.T


def pinv_sqrt(S: np.ndarray) -> np.ndarray:
    """
    Raiz quadrada inversa de Moore–Penrose (S)^{+1/2}.

    Autovalores abaixo de NOISE_FLOOR·λ_max contam como zero.
    """
    S = _check_symmetric(S)
    evals, Q = sla.eigh(S, check_finite=False)
    top = float(evals[-1]) if evals.size else 0.0
    keep = evals > NOISE_FLOOR * top if top > 0 else np.zeros_like(evals, dtype=bool)
    inv_sqrt = np.zeros_like(evals)
    inv_sqrt[keep] = 1.0 / np.sqrt(evals[keep])
    return (Q * inv_sqrt) @ Q.T


# ─── Inversão ────────────────────────────────────────────────────────────────

def invert_factor(R: np.ndarray) -> np.ndarray:
    """
    R⁻¹ de um fator inversível; fatores triangulares usam substituição regressiva.

    Levanta SingularFactorError quando a estimativa de condicionamento passa de 1e12.
    """
    R = as_matrix(R, "R")
    n, m = R.shape
    if n != m:
        raise DimensionMismatchError(f"R must be square, got {R.shape}")
    cond = float(np.linalg.cond(R)) if n else 1.0
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularFactorError(
            f"factor is numerically singular (condition estimate {cond:.3e})", condition=cond
        )
    eye = np.eye(n)
    if np.array_equal(R, np.tril(R)):
        return sla.solve_triangular(R, eye, lower=True, check_finite=False)
    if np.array_equal(R, np.triu(R)):
        return sla.solve_triangular(R, eye, lower=False, check_finite=False)
    return sla.solve(R, eye, check_finite=False)


def invert_triangular_or_factor(R: np.ndarray, transpose: bool = False) -> np.ndarray:
    """R⁻¹, ou R⁻ᵀ quando ``transpose`` é verdadeiro."""
    R_inv = invert_factor(R)
    return R_inv.T if transpose else R_inv


# ─── SVD truncada ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SvdTruncation:
    """
    Os k maiores tripletos singulares de uma matriz M e a energia descartada.

    U_k: m×k, sigma_k: (k,), V_k: n×k, tail_energy = Σ_{i>k} σ_i².
    """

    U_k: np.ndarray
    sigma_k: np.ndarray
    V_k: np.ndarray
    tail_energy: float
    sigma_next: float = 0.0     # σ_{k+1}; 0 quando k = min(m, n)
    numerical_rank: int = 0

    @property
    def rank(self) -> int:
        return int(self.sigma_k.shape[0])

    @property
    def degenerate(self) -> bool:
        """σ_k = σ_{k+1} dentro do ruído: o melhor truncamento de posto k não é único."""
        if self.rank == 0 or self.sigma_next == 0.0:
            return False
        top = float(self.sigma_k[0]) if self.rank else 0.0
        return abs(float(self.sigma_k[-1]) - self.sigma_next) <= 1e-10 * max(top, 1.0)

    def reconstruct(self) -> np.ndarray:
        return (self.U_k * self.sigma_k) @ self.V_k.T


def truncated_svd(M: np.ndarray, k: int) -> SvdTruncation:
    """
    Melhor aproximação de posto k de M (Eckart–Young).

    Levanta RankOutOfRangeError salvo quando 1 ≤ k ≤ min(m, n).
    """
    M = as_matrix(M, "M")
    m, n = M.shape
    full = min(m, n)
    if not 1 <= k <= full:
        raise RankOutOfRangeError(f"rank k={k} outside [1, {full}] for a {m}×{n} matrix")

    try:
        U, s, Vt = sla.svd(M, full_matrices=False, check_finite=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        U, s, Vt = sla.svd(M, full_matrices=False, check_finite=False, lapack_driver="gesvd")
    U, Vt = _normalize_signs(U, Vt)

    top = float(s[0]) if s.size else 0.0
    numerical_rank = int(np.sum(s > NOISE_FLOOR * top)) if top > 0 else 0
    tail = s[k:]
    return SvdTruncation(
        U_k=np.ascontiguousarray(U[:, :k]),
        sigma_k=s[:k].copy(),
        V_k=np.ascontiguousarray(Vt[:k, :].T),
        tail_energy=float(np.sum(tail * tail)),
        sigma_next=float(s[k]) if k < full else 0.0,
        numerical_rank=numerical_rank,
    )

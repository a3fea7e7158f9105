"""
Acumulação em streaming das estatísticas suficientes do solver de camada.

Para uma camada com entradas do alvo A e entradas de condicionamento B (ambas n×l):

    C = A·Bᵀ      termo cruzado
    S = B·Bᵀ      covariância de condicionamento (branqueada pelo solver)
    G = A·Aᵀ      usada só no valor ótimo exato do objetivo

Lotes entram coluna a coluna; o custo da compressão não depende do tamanho
da calibração e as ativações brutas não ficam guardadas.

Uso típico:
    acc = CovarianceAccumulator(dim=64)
    for X_b, Xp_b in batches:
        acc.add(X_b, Xp_b)
    cov = acc.finalize()
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np

from aasvd.errors import DimensionMismatchError, EmptyAccumulatorError
from aasvd.linalg import symmetrize


@dataclass(frozen=True)
class CovarianceSet:
    """Estatísticas finalizadas C = A·Bᵀ, S = B·Bᵀ, G = A·Aᵀ sobre ``columns`` tokens."""

    C: np.ndarray
    S: np.ndarray
    G: np.ndarray
    columns: int

    @property
    def dim(self) -> int:
        return int(self.S.shape[0])

    @classmethod
    def from_matrices(cls, A: np.ndarray, B: np.ndarray) -> "CovarianceSet":
        """Estatísticas de uma só vez a partir das matrizes completas de ativação."""
        return CovarianceAccumulator(dim=np.shape(A)[0]).add(A, B).finalize()


class CovarianceAccumulator:
    """
    Somas correntes de A·Bᵀ, B·Bᵀ e A·Aᵀ com um único escritor.

    Calibração concorrente usa um acumulador por worker e depois ``merge``.
    """

    __slots__ = ("dim", "C", "S", "G", "columns_seen")

    def __init__(self, dim: int) -> None:
        if dim < 1:
            raise DimensionMismatchError(f"dim must be ≥ 1, got {dim}")
        self.dim = int(dim)
        self.clear()

    def clear(self) -> "CovarianceAccumulator":
        self.C = np.zeros((self.dim, self.dim))
        self.S = np.zeros((self.dim, self.dim))
        self.G = np.zeros((self.dim, self.dim))
        self.columns_seen = 0
        return self

    def add(self, A_batch: np.ndarray, B_batch: np.ndarray) -> "CovarianceAccumulator":
        """C += A·Bᵀ, S += B·Bᵀ, G += A·Aᵀ para um lote de colunas."""
        A = np.asarray(A_batch, dtype=np.float64)
        B = np.asarray(B_batch, dtype=np.float64)
        if A.ndim != 2 or B.ndim != 2:
            raise DimensionMismatchError(f"batches must be 2-D, got {A.shape} and {B.shape}")
        if A.shape[0] != self.dim or B.shape[0] != self.dim:
            raise DimensionMismatchError(
                f"batches must have {self.dim} rows, got A {A.shape} and B {B.shape}"
            )
        if A.shape[1] != B.shape[1]:
            raise DimensionMismatchError(
                f"A and B batches must be column-aligned: {A.shape[1]} vs {B.shape[1]} columns"
            )
        if A.shape[1] < 1:
            raise DimensionMismatchError("empty batch")

        self.C += A @ B.T
        self.S += B @ B.T
        self.G += A @ A.T
        self.columns_seen += int(A.shape[1])
        return self

    def copy(self) -> "CovarianceAccumulator":
        out = CovarianceAccumulator(self.dim)
        out.C = self.C.copy()
        out.S = self.S.copy()
        out.G = self.G.copy()
        out.columns_seen = self.columns_seen
        return out

    def finalize(self) -> CovarianceSet:
        """Simetriza S e G e congela as estatísticas."""
        if self.columns_seen < 1:
            raise EmptyAccumulatorError("cannot finalize an accumulator that has seen no columns")
        return CovarianceSet(
            C=self.C.copy(),
            S=symmetrize(self.S),
            G=symmetrize(self.G),
            columns=self.columns_seen,
        )


# ─── API funcional ───────────────────────────────────────────────────────────

def accumulate(
    acc: CovarianceAccumulator,
    A_batch: np.ndarray,
    B_batch: np.ndarray,
) -> CovarianceAccumulator:
    return acc.add(A_batch, B_batch)


def merge(a: CovarianceAccumulator, b: CovarianceAccumulator) -> CovarianceAccumulator:
    """Soma elemento a elemento de dois acumuladores (as entradas não são alteradas)."""
    if a.dim != b.dim:
        raise DimensionMismatchError(f"cannot merge accumulators of dim {a.dim} and {b.dim}")
    out = CovarianceAccumulator(a.dim)
    out.C = a.C + b.C
    out.S = a.S + b.S
    out.G = a.G + b.G
    out.columns_seen = a.columns_seen + b.columns_seen
    return out


def finalize(acc: CovarianceAccumulator) -> CovarianceSet:
    return acc.finalize()


def iter_column_batches(
    A: np.ndarray,
    B: np.ndarray,
    batch_columns: Optional[int] = None,
) -> Iterable[Tuple[np.ndarray, np.ndarray]]:
    """Fatias de A e B alinhadas por coluna (as matrizes inteiras quando batch_columns é None)."""
    l = A.shape[1]
    step = l if not batch_columns else int(batch_columns)
    for start in range(0, l, step):
        yield A[:, start:start + step], B[:, start:start + step]


def accumulate_streams(
    A: np.ndarray,
    B: np.ndarray,
    batch_columns: Optional[int] = None,
) -> CovarianceSet:
    """Acumula dois fluxos de ativação alinhados, lote a lote, e finaliza."""
    acc = CovarianceAccumulator(dim=A.shape[0])
    for A_b, B_b in iter_column_batches(A, B, batch_columns):
        acc.add(A_b, B_b)
    return acc.finalize()

"""Exceções levantadas pelo pacote aasvd.

Toda exceção deriva de ``AasvdError`` e da exceção nativa mais próxima do seu
significado; quem chama pode capturar ``ValueError`` ou a classe específica.
"""

from __future__ import annotations

from typing import Optional


class AasvdError(Exception):
    """Classe base de todas as exceções do pacote."""


# ─── Formas e configuração ───────────────────────────────────────────────────

class DimensionMismatchError(AasvdError, ValueError):
    pass


class InvalidDimsError(AasvdError, ValueError):
    pass


class ConfigError(AasvdError, ValueError):
    pass


class UnknownLayerError(AasvdError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown layer"


# ─── Álgebra linear ──────────────────────────────────────────────────────────

class NotSymmetricError(AasvdError, ValueError):
    pass


class NotPositiveDefiniteError(AasvdError, ArithmeticError):
    def __init__(self, message: str, smallest_eigenvalue: float) -> None:
        super().__init__(message)
        self.smallest_eigenvalue = smallest_eigenvalue


class RankOutOfRangeError(AasvdError, ValueError):
    pass


class SingularFactorError(AasvdError, ArithmeticError):
    def __init__(self, message: str, condition: float) -> None:
        super().__init__(message)
        self.condition = condition


class SingularCovarianceError(AasvdError, ArithmeticError):
    """Covariância S = B·Bᵀ não é definida positiva e nenhuma regularização foi pedida."""

    def __init__(
        self,
        message: str,
        block: Optional[int] = None,
        layer: Optional[str] = None,
    ) -> None:
        super().__init__(message)
        self.block = block
        self.layer = layer

    def __str__(self) -> str:
        base = super().__str__()
        if self.block is None and self.layer is None:
            return base
        return f"[block {self.block}, layer {self.layer}] {base}"


class EmptyAccumulatorError(AasvdError, ValueError):
    pass


# ─── Forward / backward / refinamento ────────────────────────────────────────

class NonFiniteActivationError(AasvdError, ArithmeticError):
    def __init__(self, message: str, block: Optional[int] = None, site: Optional[str] = None) -> None:
        super().__init__(message)
        self.block = block
        self.site = site

    def __str__(self) -> str:
        base = super().__str__()
        if self.block is None:
            return base
        return f"[block {self.block}, site {self.site}] {base}"


class CacheMismatchError(AasvdError, ValueError):
    pass


class NoFactorizedLayersError(AasvdError, ValueError):
    pass


class NonFiniteLossError(AasvdError, ArithmeticError):
    def __init__(self, message: str, epoch: int, block: Optional[int] = None) -> None:
        super().__init__(message)
        self.epoch = epoch
        self.block = block

    def __str__(self) -> str:
        base = super().__str__()
        where = f"epoch {self.epoch}" if self.block is None else f"block {self.block}, epoch {self.epoch}"
        return f"[{where}] {base}"


# ─── Arquivos ────────────────────────────────────────────────────────────────

class CorruptContainerError(AasvdError, OSError):
    pass


class ReportFormatError(AasvdError, ValueError):
    """Linha do CSV de relatório que não pode ser lida; ``line`` começa em 1 e conta o cabeçalho."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        super().__init__(message)
        self.line = line

    def __str__(self) -> str:
        base = super().__str__()
        return base if self.line is None else f"line {self.line}: {base}"

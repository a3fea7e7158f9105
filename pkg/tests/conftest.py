"""Fixtures sintéticas e semeadas compartilhadas entre todos os testes."""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

# Garante que scripts/ está no path para importar aasvd.*
sys.path.insert(0, str(Path(__file__).parent.parent / "scripts"))

from aasvd.pipeline import generate_calibration, init_model  # noqa: E402
from aasvd.toyformer import BlockDims, init_block  # noqa: E402


# ─── Matrizes ────────────────────────────────────────────────────────────────

@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def spd_matrix() -> np.ndarray:
    """S = ZᵀZ + I aleatória e SPD, com Z 5×5."""
    Z = np.random.default_rng(7).standard_normal((5, 5))
    return Z.T @ Z + np.eye(5)


@pytest.fixture
def layer_problem():
    """W (6×5), entradas originais X e entradas deslocadas X' = X + ruído (5×40)."""
    r = np.random.default_rng(11)
    W = r.standard_normal((6, 5))
    X = r.standard_normal((5, 40)) * np.array([3.0, 2.0, 1.0, 0.5, 0.2])[:, None]
    Xp = X + 0.3 * r.standard_normal(X.shape)
    return W, X, Xp


# ─── Transformer de brinquedo ────────────────────────────────────────────────

@pytest.fixture
def tiny_dims() -> BlockDims:
    return BlockDims(d_model=8, n_heads=2, d_ff=16, seq_len=4)


@pytest.fixture
def tiny_block(tiny_dims: BlockDims):
    return init_block(tiny_dims, seed=3)


@pytest.fixture
def tiny_input(tiny_dims: BlockDims) -> np.ndarray:
    """Três sequências do bloco mínimo."""
    return np.random.default_rng(5).standard_normal((tiny_dims.d_model, 3 * tiny_dims.seq_len))


@pytest.fixture
def small_dims() -> BlockDims:
    return BlockDims(d_model=16, n_heads=4, d_ff=32, seq_len=8)


@pytest.fixture
def small_model(small_dims: BlockDims):
    return init_model(small_dims, n_blocks=2, seed=0)


@pytest.fixture
def small_calib(small_model):
    return generate_calibration(small_model.dims, 48, seed=1, embed_seed=small_model.embed_seed, spectrum_decay=1.0)


@pytest.fixture
def small_eval(small_model):
    return generate_calibration(small_model.dims, 8, seed=2, embed_seed=small_model.embed_seed, spectrum_decay=1.0)


@pytest.fixture
def overflow_model(small_dims: BlockDims):
    """Três blocos; o down_proj do bloco 2 estoura para inf na saída do bloco."""
    model = init_model(small_dims, n_blocks=3, seed=0)
    W = model.blocks[2].linears["down_proj"]
    model.blocks[2].linears["down_proj"] = np.full_like(W, 1e308)
    return model

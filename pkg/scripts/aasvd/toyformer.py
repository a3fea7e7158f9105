"""
Bloco transformer pre-norm mínimo, no estilo LLaMA, com backward exato escrito à mão.

Layout: ativações são matrizes d_model×l cujas colunas são tokens; as l
colunas formam l/seq_len sequências contíguas e a máscara causal vale dentro
de cada sequência.

    N1 = RMSNorm₁(X)
    H1 = X  + o_proj(Attn(q_proj N1, k_proj N1, v_proj N1))
    N2 = RMSNorm₂(H1)
    Y  = H1 + down_proj(silu(gate_proj N2) ⊙ up_proj N2)

Cada uma das sete projeções é uma matriz densa ou um FactorizedLinear; camadas
fatoradas aplicam V e depois U, sem nunca construir U·Vᵀ.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from aasvd.errors import (
    CacheMismatchError,
    DimensionMismatchError,
    InvalidDimsError,
    NonFiniteActivationError,
    UnknownLayerError,
)
from aasvd.layerwise import FactorizedLinear

Linear = Union[np.ndarray, FactorizedLinear]

RMS_EPS = 1e-6

LAYER_ORDER: Tuple[str, ...] = (
    "q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj",
)

# Camadas que leem a mesma ativação, em ordem topológica do forward.
LAYER_GROUPS: Tuple[Tuple[str, Tuple[str, ...]], ...] = (
    ("attn_in",  ("q_proj", "k_proj", "v_proj")),
    ("attn_ctx", ("o_proj",)),
    ("mlp_in",   ("gate_proj", "up_proj")),
    ("mlp_act",  ("down_proj",)),
)

INPUT_TAP: Dict[str, str] = {layer: tap for tap, layers in LAYER_GROUPS for layer in layers}

NORM_KEYS: Tuple[str, ...] = ("norm1", "norm2")


# ─── Dimensões ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class BlockDims:
    d_model: int
    n_heads: int
    d_ff: int
    seq_len: int

    def __post_init__(self) -> None:
        for name in ("d_model", "n_heads", "d_ff", "seq_len"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InvalidDimsError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise InvalidDimsError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def layer_shape(self, name: str) -> Tuple[int, int]:
        """(saída, entrada) de uma projeção."""
        d, f = self.d_model, self.d_ff
        shapes = {
            "q_proj": (d, d), "k_proj": (d, d), "v_proj": (d, d), "o_proj": (d, d),
            "gate_proj": (f, d), "up_proj": (f, d), "down_proj": (d, f),
        }
        if name not in shapes:
            raise UnknownLayerError(f"Unknown layer: '{name}'. Available: {list(LAYER_ORDER)}")
        return shapes[name]

    def dense_parameter_count(self) -> int:
        """4·d² + 3·d·d_ff + 2·d."""
        d, f = self.d_model, self.d_ff
        return 4 * d * d + 3 * d * f + 2 * d

    def to_dict(self) -> Dict[str, int]:
        return {"d_model": self.d_model, "n_heads": self.n_heads, "d_ff": self.d_ff, "seq_len": self.seq_len}


# ─── Parâmetros ──────────────────────────────────────────────────────────────

@dataclass
class BlockParams:
    """Sete projeções (densas ou fatoradas) e dois ganhos de RMSNorm."""

    dims: BlockDims
    linears: Dict[str, Linear]
    norm1: np.ndarray
    norm2: np.ndarray

    def is_factorized(self, name: str) -> bool:
        return isinstance(self._linear(name), FactorizedLinear)

    def factorized_layers(self) -> List[str]:
        return [name for name in LAYER_ORDER if self.is_factorized(name)]

    def dense_weight(self, name: str) -> np.ndarray:
        """Equivalente denso de uma camada (U·Vᵀ para as fatoradas)."""
        L = self._linear(name)
        return L.dense() if isinstance(L, FactorizedLinear) else L

    def layer_parameter_count(self, name: str) -> int:
        L = self._linear(name)
        return L.parameter_count if isinstance(L, FactorizedLinear) else int(L.size)

    def parameter_count(self) -> int:
        return sum(self.layer_parameter_count(n) for n in LAYER_ORDER) + self.norm1.size + self.norm2.size

    def signature(self) -> Tuple:
        """Impressão digital da estrutura (tipos e postos das camadas) que casa caches com parâmetros."""
        sig = []
        for name in LAYER_ORDER:
            L = self._linear(name)
            sig.append((name, L.rank) if isinstance(L, FactorizedLinear) else (name, "dense"))
        return (self.dims, tuple(sig))

    def copy(self) -> "BlockParams":
        linears: Dict[str, Linear] = {}
        for name, L in self.linears.items():
            if isinstance(L, FactorizedLinear):
                linears[name] = FactorizedLinear(
                    U=L.U.copy(), V=L.V.copy(), objective_used=L.objective_used,
                    degenerate=L.degenerate, numerical_rank=L.numerical_rank,
                )
            else:
                linears[name] = L.copy()
        return BlockParams(self.dims, linears, self.norm1.copy(), self.norm2.copy())

    def _linear(self, name: str) -> Linear:
        if name not in self.linears:
            raise UnknownLayerError(f"Unknown layer: '{name}'. Available: {list(LAYER_ORDER)}")
        return self.linears[name]


def init_block(dims: BlockDims, seed: int) -> BlockParams:
    """Projeções gaussianas com desvio d_model^{-1/2}; ganhos de norma unitários."""
    if not isinstance(dims, BlockDims):
        raise InvalidDimsError(f"dims must be a BlockDims, got {type(dims).__name__}")
    rng = np.random.default_rng(seed)
    std = dims.d_model ** -0.5
    linears: Dict[str, Linear] = {
        name: rng.standard_normal(dims.layer_shape(name)) * std for name in LAYER_ORDER
    }
    return BlockParams(dims, linears, np.ones(dims.d_model), np.ones(dims.d_model))


def replace_linear(params: BlockParams, which: str, F: FactorizedLinear) -> BlockParams:
    """Novo BlockParams com a camada ``which`` trocada pela fatorada ``F``."""
    expected = params.dims.layer_shape(which)
    if (F.out_dim, F.in_dim) != expected:
        raise DimensionMismatchError(
            f"{which}: factors give a {F.out_dim}×{F.in_dim} layer, expected {expected[0]}×{expected[1]}"
        )
    linears = dict(params.linears)
    linears[which] = F
    return BlockParams(params.dims, linears, params.norm1, params.norm2)


def densify(params: BlockParams, which: str) -> BlockParams:
    """Novo BlockParams com a camada ``which`` materializada de volta em matriz densa."""
    linears = dict(params.linears)
    linears[which] = params.dense_weight(which).copy()
    return BlockParams(params.dims, linears, params.norm1, params.norm2)


# ─── Visão plana dos tensores (usada pelo otimizador) ────────────────────────

def trainable_keys(params: BlockParams) -> List[str]:
    """Chaves dos fatores das camadas fatoradas mais os dois ganhos de norma."""
    keys: List[str] = []
    for name in params.factorized_layers():
        keys.extend((f"{name}.U", f"{name}.V"))
    keys.extend(NORM_KEYS)
    return keys


def all_keys(params: BlockParams) -> List[str]:
    keys: List[str] = []
    for name in LAYER_ORDER:
        if params.is_factorized(name):
            keys.extend((f"{name}.U", f"{name}.V"))
        else:
            keys.append(name)
    keys.extend(NORM_KEYS)
    return keys


def get_tensor(params: BlockParams, key: str) -> np.ndarray:
    if key in NORM_KEYS:
        return getattr(params, key)
    name, _, part = key.partition(".")
    L = params._linear(name)
    if isinstance(L, FactorizedLinear):
        if part not in ("U", "V"):
            raise UnknownLayerError(f"Unknown tensor: '{key}'. Available: {all_keys(params)}")
        return getattr(L, part)
    if part:
        raise UnknownLayerError(f"Unknown tensor: '{key}'. Available: {all_keys(params)}")
    return L


def with_tensors(params: BlockParams, updates: Dict[str, np.ndarray]) -> BlockParams:
    """Novo BlockParams com os tensores nomeados substituídos (estrutura inalterada)."""
    linears = dict(params.linears)
    norms = {"norm1": params.norm1, "norm2": params.norm2}
    for key, value in updates.items():
        current = get_tensor(params, key)
        if np.shape(value) != current.shape:
            raise DimensionMismatchError(f"{key}: expected shape {current.shape}, got {np.shape(value)}")
        if key in NORM_KEYS:
            norms[key] = value
            continue
        name, _, part = key.partition(".")
        L = linears[name]
        if isinstance(L, FactorizedLinear):
            U = value if part == "U" else L.U
            V = value if part == "V" else L.V
            linears[name] = FactorizedLinear(
                U=U, V=V, objective_used=L.objective_used,
                degenerate=L.degenerate, numerical_rank=L.numerical_rank,
            )
        else:
            linears[name] = value
    return BlockParams(params.dims, linears, norms["norm1"], norms["norm2"])


# ─── Forward ─────────────────────────────────────────────────────────────────

@dataclass
class ForwardCache:
    """Intermediários de um forward, indexados pela ativação que guardam."""

    signature: Tuple
    n_seq: int
    X: np.ndarray
    r1: np.ndarray
    Xhat1: np.ndarray
    N1: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    P: np.ndarray            # (heads, n_seq, T, T) probabilidades de atenção
    A: np.ndarray            # contexto de atenção, entrada do o_proj
    O: np.ndarray
    H1: np.ndarray
    r2: np.ndarray
    Xhat2: np.ndarray
    N2: np.ndarray
    Gt: np.ndarray           # pré-ativação do gate
    Up: np.ndarray
    Z: np.ndarray            # silu(Gt) ⊙ Up, entrada do down_proj
    D: np.ndarray
    Y: np.ndarray
    taps: Dict[str, np.ndarray] = field(default_factory=dict)


def apply_linear(L: Linear, X: np.ndarray) -> np.ndarray:
    if isinstance(L, FactorizedLinear):
        return L.U @ (L.V.T @ X)
    return L @ X


def rms_norm(X: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(g ⊙ X/r, X/r, r) com r = sqrt(mean(x²) + ε) por coluna."""
    r = np.sqrt(np.mean(X * X, axis=0) + RMS_EPS)
    Xhat = X / r
    return g[:, None] * Xhat, Xhat, r


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def _heads(M: np.ndarray, dims: BlockDims, n_seq: int) -> np.ndarray:
    # linha h·d_head + j, coluna s·T + t  →  [h, j, s, t]
    return M.reshape(dims.n_heads, dims.d_head, n_seq, dims.seq_len)


def _causal_softmax(scores: np.ndarray) -> np.ndarray:
    T = scores.shape[-1]
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def check_input(dims: BlockDims, X: np.ndarray) -> int:
    """Valida uma entrada de bloco d_model×l e devolve o número de sequências."""
    if X.ndim != 2 or X.shape[0] != dims.d_model:
        raise DimensionMismatchError(f"block input must have {dims.d_model} rows, got shape {X.shape}")
    if X.shape[1] == 0 or X.shape[1] % dims.seq_len != 0:
        raise DimensionMismatchError(
            f"column count {X.shape[1]} is not a positive multiple of seq_len={dims.seq_len}"
        )
    return X.shape[1] // dims.seq_len


def block_forward(
    params: BlockParams, X: np.ndarray, block: Optional[int] = None
) -> Tuple[np.ndarray, ForwardCache]:
    """``block`` só rotula um NonFiniteActivationError."""
    dims = params.dims
    X = np.asarray(X, dtype=np.float64)
    n_seq = check_input(dims, X)
    if not np.all(np.isfinite(X)):
        raise NonFiniteActivationError("non-finite block input", block=block, site="input")
    L = params.linears

    N1, Xhat1, r1 = rms_norm(X, params.norm1)
    Q = apply_linear(L["q_proj"], N1)
    K = apply_linear(L["k_proj"], N1)
    V = apply_linear(L["v_proj"], N1)

    Qr, Kr, Vr = (_heads(M, dims, n_seq) for M in (Q, K, V))
    scores = np.einsum("hdni,hdnj->hnij", Qr, Kr) * dims.d_head ** -0.5
    P = _causal_softmax(scores)
    A = np.einsum("hnij,hdnj->hdni", P, Vr).reshape(dims.d_model, -1)

    O = apply_linear(L["o_proj"], A)
    H1 = X + O

    N2, Xhat2, r2 = rms_norm(H1, params.norm2)
    Gt = apply_linear(L["gate_proj"], N2)
    Up = apply_linear(L["up_proj"], N2)
    Z = silu(Gt) * Up
    D = apply_linear(L["down_proj"], Z)
    Y = H1 + D

    if not np.all(np.isfinite(Y)):
        raise NonFiniteActivationError("non-finite block output", block=block, site="block_out")

    cache = ForwardCache(
        signature=params.signature(), n_seq=n_seq,
        X=X, r1=r1, Xhat1=Xhat1, N1=N1, Q=Q, K=K, V=V, P=P, A=A, O=O, H1=H1,
        r2=r2, Xhat2=Xhat2, N2=N2, Gt=Gt, Up=Up, Z=Z, D=D, Y=Y,
    )
    cache.taps = {
        "attn_in": N1, "attn_ctx": A, "o_out": O,
        "mlp_in": N2, "mlp_act": Z, "down_out": D, "block_out": Y,
    }
    return Y, cache


def layer_input(cache: ForwardCache, layer: str) -> np.ndarray:
    """Ativação consumida por ``layer`` no forward em cache."""
    if layer not in INPUT_TAP:
        raise UnknownLayerError(f"Unknown layer: '{layer}'. Available: {list(LAYER_ORDER)}")
    return cache.taps[INPUT_TAP[layer]]


# ─── Backward ────────────────────────────────────────────────────────────────

@dataclass
class BlockGradients:
    """Gradientes indexados como ``all_keys`` mais o gradiente da entrada do bloco."""

    tensors: Dict[str, np.ndarray]
    dX: np.ndarray

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    def keys(self) -> Iterable[str]:
        return self.tensors.keys()


def _linear_backward(
    name: str, L: Linear, x: np.ndarray, dy: np.ndarray, out: Dict[str, np.ndarray]
) -> np.ndarray:
    if isinstance(L, FactorizedLinear):
        t = L.V.T @ x
        dt = L.U.T @ dy
        out[f"{name}.U"] = dy @ t.T
        out[f"{name}.V"] = x @ dt.T
        return L.V @ dt
    out[name] = dy @ x.T
    return L.T @ dy


def _rms_norm_backward(
    dN: np.ndarray, Xhat: np.ndarray, r: np.ndarray, g: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    dg = np.sum(dN * Xhat, axis=1)
    dXhat = dN * g[:, None]
    dX = (dXhat - Xhat * np.mean(dXhat * Xhat, axis=0)) / r
    return dX, dg


def block_backward(params: BlockParams, cache: ForwardCache, dY: np.ndarray) -> BlockGradients:
    """Gradientes em modo reverso de uma perda escalar, dado dLoss/dY."""
    if cache.signature != params.signature():
        raise CacheMismatchError("forward cache was produced by a block with a different structure")
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape != cache.Y.shape:
        raise DimensionMismatchError(f"dY shape {dY.shape} does not match block output {cache.Y.shape}")

    dims = params.dims
    L = params.linears
    grads: Dict[str, np.ndarray] = {}
    c = dims.d_head ** -0.5

    # ramo MLP
    dH1 = dY.copy()
    dZ = _linear_backward("down_proj", L["down_proj"], cache.Z, dY, grads)
    sg = sigmoid(cache.Gt)
    dUp = dZ * cache.Gt * sg
    dGt = dZ * cache.Up * sg * (1.0 + cache.Gt * (1.0 - sg))
    dN2 = _linear_backward("gate_proj", L["gate_proj"], cache.N2, dGt, grads)
    dN2 += _linear_backward("up_proj", L["up_proj"], cache.N2, dUp, grads)
    dH1_norm, grads["norm2"] = _rms_norm_backward(dN2, cache.Xhat2, cache.r2, params.norm2)
    dH1 += dH1_norm

    # ramo de atenção
    dX = dH1.copy()
    dA = _linear_backward("o_proj", L["o_proj"], cache.A, dH1, grads)
    dOr = _heads(dA, dims, cache.n_seq)
    Qr, Kr, Vr = (_heads(M, dims, cache.n_seq) for M in (cache.Q, cache.K, cache.V))
    P = cache.P
    dP = np.einsum("hdni,hdnj->hnij", dOr, Vr)
    dVr = np.einsum("hnij,hdni->hdnj", P, dOr)
    dS = P * (dP - np.sum(P * dP, axis=-1, keepdims=True))
    dQr = c * np.einsum("hnij,hdnj->hdni", dS, Kr)
    dKr = c * np.einsum("hnij,hdni->hdnj", dS, Qr)

    d, l = dims.d_model, cache.X.shape[1]
    dN1 = _linear_backward("q_proj", L["q_proj"], cache.N1, dQr.reshape(d, l), grads)
    dN1 += _linear_backward("k_proj", L["k_proj"], cache.N1, dKr.reshape(d, l), grads)
    dN1 += _linear_backward("v_proj", L["v_proj"], cache.N1, dVr.reshape(d, l), grads)
    dX_norm, grads["norm1"] = _rms_norm_backward(dN1, cache.Xhat1, cache.r1, params.norm1)
    dX += dX_norm

    return BlockGradients(tensors=grads, dX=dX)

"""
Compressão sequencial bloco a bloco com dois fluxos de ativação.

Dois fluxos percorrem o modelo lado a lado:

    X   — saídas dos blocos originais (alvos)
    X'  — saídas dos blocos já comprimidos (o que o próximo bloco vê de fato)

Em cada bloco, as sete projeções são comprimidas em ordem topológica do forward
(q/k/v → o → gate/up → down). Cada grupo de camadas lê a entrada original de um
forward do bloco original sobre X e a entrada deslocada do bloco comprimido em
construção sobre X'; irmãs comprimidas antes no mesmo bloco já aparecem em X'.
O refinamento opcional ajusta o bloco inteiro antes de os dois fluxos avançarem.

Uso típico:
    model = init_model(BlockDims(32, 4, 64, 16), n_blocks=4, seed=0)
    calib = generate_calibration(model.dims, 64, seed=1, embed_seed=model.embed_seed)
    compressed, report = compress_model(model, calib, RunConfig(), verbose=True)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from aasvd.config import RunConfig, split_seed
from aasvd.container import read_container, write_container
from aasvd.covariance import accumulate_streams
from aasvd.errors import (
    CorruptContainerError,
    DimensionMismatchError,
    InvalidDimsError,
    SingularCovarianceError,
)
from aasvd.layerwise import (
    ALL_OBJECTIVES,
    FactorizedLinear,
    compress_with_objective,
    objective_error_from_covariance,
    rank_from_ratio,
    variant_error,
    variant_optimum,
)
from aasvd.metrics import BlockRecord, CompressionReport, LayerRecord, cosine_distance, mse
from aasvd.refine import refine_block
from aasvd.toyformer import (
    LAYER_GROUPS,
    LAYER_ORDER,
    BlockDims,
    BlockParams,
    block_forward,
    init_block,
    replace_linear,
)

PathLike = Union[str, Path]


# ─── Modelo e dados de calibração ────────────────────────────────────────────

@dataclass
class ToyModel:
    dims: BlockDims
    blocks: List[BlockParams]
    embed_seed: int = 0

    def __post_init__(self) -> None:
        if not self.blocks:
            raise DimensionMismatchError("a model needs at least one block")
        for b, blk in enumerate(self.blocks):
            if blk.dims != self.dims:
                raise DimensionMismatchError(f"block {b} has dims {blk.dims}, model has {self.dims}")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def parameter_count(self) -> int:
        return sum(blk.parameter_count() for blk in self.blocks)

    def forward(self, X: np.ndarray) -> np.ndarray:
        for b, blk in enumerate(self.blocks):
            X, _ = block_forward(blk, X, block=b)
        return X

    def block_outputs(self, X: np.ndarray) -> List[np.ndarray]:
        outs: List[np.ndarray] = []
        for b, blk in enumerate(self.blocks):
            X, _ = block_forward(blk, X, block=b)
            outs.append(X)
        return outs

    def copy(self) -> "ToyModel":
        return ToyModel(self.dims, [blk.copy() for blk in self.blocks], self.embed_seed)


@dataclass
class CalibrationSet:
    inputs: np.ndarray          # d_model × (n_sequences·seq_len)
    n_sequences: int
    seq_len: int
    seed: int

    @property
    def columns(self) -> int:
        return int(self.inputs.shape[1])

    def head(self, n_sequences: int) -> "CalibrationSet":
        """As primeiras ``n_sequences`` sequências (varreduras de orçamento de calibração)."""
        n = min(n_sequences, self.n_sequences)
        return CalibrationSet(self.inputs[:, : n * self.seq_len].copy(), n, self.seq_len, self.seed)


def init_model(dims: BlockDims, n_blocks: int, seed: int) -> ToyModel:
    """Modelo semeado; o bloco b sorteia de split_seed(seed, 'model', b)."""
    if n_blocks < 1:
        raise DimensionMismatchError(f"n_blocks must be ≥ 1, got {n_blocks}")
    blocks = [init_block(dims, split_seed(seed, "model", b)) for b in range(n_blocks)]
    return ToyModel(dims, blocks, embed_seed=split_seed(seed, "embedding"))


def embedding_basis(d_model: int, embed_seed: int) -> np.ndarray:
    """Base ortonormal d×d semeada do espaço sintético de embeddings."""
    G = np.random.default_rng(embed_seed).standard_normal((d_model, d_model))
    Q, R = np.linalg.qr(G)
    return Q * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))


def generate_calibration(
    dims: BlockDims,
    n_sequences: int,
    seed: int,
    embed_seed: int = 0,
    spectrum_decay: float = 0.0,
) -> CalibrationSet:
    """
    Embeddings sintéticos: tokens gaussianos, opcionalmente moldados por escalas
    de canal (i+1)^-spectrum_decay numa base fixada por ``embed_seed``, com cada
    sequência reescalada para RMS unitário.

    A sequência i depende só de (seed, i): um sorteio menor é prefixo de um maior.
    """
    if n_sequences < 1:
        raise DimensionMismatchError(f"n_sequences must be ≥ 1, got {n_sequences}")
    d, T = dims.d_model, dims.seq_len
    Z = np.random.default_rng(seed).standard_normal((n_sequences * T, d)).T
    if spectrum_decay > 0:
        scales = (np.arange(d) + 1.0) ** -spectrum_decay
        Z = embedding_basis(d, embed_seed) @ (scales[:, None] * Z)
    Zr = Z.reshape(d, n_sequences, T)
    rms = np.sqrt(np.mean(Zr * Zr, axis=(0, 2)))
    Zr = Zr / rms[None, :, None]
    return CalibrationSet(Zr.reshape(d, n_sequences * T), n_sequences, T, seed)


# ─── Compressão ──────────────────────────────────────────────────────────────

def _compress_block(
    b: int,
    orig: BlockParams,
    X: np.ndarray,
    Xp: np.ndarray,
    cfg: RunConfig,
    report: CompressionReport,
    verbose: bool,
) -> BlockParams:
    _, cache_orig = block_forward(orig, X, block=b)
    cache_entry = None
    if cfg.shift_source == "block_entry":
        _, cache_entry = block_forward(orig, Xp, block=b)

    work = orig
    for tap, layers in LAYER_GROUPS:
        X_j = cache_orig.taps[tap]
        if cache_entry is not None:
            Xp_j = cache_entry.taps[tap]
        else:
            _, cache_work = block_forward(work, Xp, block=b)
            Xp_j = cache_work.taps[tap]
        anchored = accumulate_streams(X_j, Xp_j, batch_columns=cfg.batch_columns)

        for layer in layers:
            W = orig.linears[layer]
            m, n = W.shape
            k = rank_from_ratio(m, n, cfg.ratio_policy)
            try:
                F = compress_with_objective(
                    W, anchored, k, cfg.objective, method=cfg.method, regularization=cfg.regularization
                )
                optimum = variant_optimum(
                    W, k, cfg.objective, anchored, method=cfg.method, regularization=cfg.regularization
                )
                dominance: Dict[str, float] = {}
                if cfg.track_dominance:
                    for obj in ALL_OBJECTIVES:
                        F_obj = F if obj is cfg.objective else compress_with_objective(
                            W, anchored, k, obj, method=cfg.method, regularization=cfg.regularization
                        )
                        dominance[obj.value] = objective_error_from_covariance(W, F_obj, anchored)
            except SingularCovarianceError as exc:
                raise SingularCovarianceError(exc.args[0], block=b, layer=layer) from exc

            record = LayerRecord(
                block=b,
                layer=layer,
                m=m,
                n=n,
                rank=k,
                objective=cfg.objective.value,
                objective_value=variant_error(W, F, cfg.objective, anchored),
                optimum=optimum,
                anchored_value=objective_error_from_covariance(W, F, anchored),
                params_before=m * n,
                params_after=F.parameter_count,
                degenerate=F.degenerate,
                numerical_rank=F.numerical_rank,
                dominance=dominance,
            )
            report.layers.append(record)
            work = replace_linear(work, layer, F)
            if verbose:
                print(f"     {layer:<10} {m}×{n} → k={k:<4} objective={record.objective_value:.6e}")
    return work


def compress_model(
    model: ToyModel,
    calib: CalibrationSet,
    cfg: RunConfig,
    run_id: Optional[str] = None,
    verbose: bool = False,
) -> tuple[ToyModel, CompressionReport]:
    """
    Comprime todas as projeções de todos os blocos e devolve o novo modelo com o relatório.

    ``model`` não é alterado.
    """
    if calib.inputs.shape[0] != model.dims.d_model or calib.seq_len != model.dims.seq_len:
        raise DimensionMismatchError(
            f"calibration data ({calib.inputs.shape[0]} rows, seq_len {calib.seq_len}) does not match "
            f"model dims (d_model {model.dims.d_model}, seq_len {model.dims.seq_len})"
        )
    run_id = run_id or f"{cfg.objective.value}{'+refine' if cfg.refine_enabled else ''}"
    report = CompressionReport(run_id=run_id, objective=cfg.objective.value, refine_enabled=cfg.refine_enabled)

    X = calib.inputs
    Xp = calib.inputs.copy()
    blocks: List[BlockParams] = []
    for b, orig in enumerate(model.blocks):
        if verbose:
            print(f"  → block {b + 1}/{model.n_blocks}")
        work = _compress_block(b, orig, X, Xp, cfg, report, verbose)

        record = BlockRecord(block=b, mse=0.0, cosine=0.0)
        if cfg.refine_enabled:
            if verbose:
                print(f"     refining ({cfg.refine.epochs} epochs)...")
            result = refine_block(
                orig, work, X, Xp, cfg.refine,
                seed=split_seed(cfg.seed, "refine", b), block_index=b, verbose=verbose,
            )
            work = result.params
            record.refined = True
            record.refine_initial_loss = result.initial_loss
            record.refine_final_loss = result.final_loss
            record.loss_trace = list(result.loss_trace)

        Y, _ = block_forward(orig, X, block=b)
        Yp, _ = block_forward(work, Xp, block=b)
        record.mse = mse(Y, Yp)
        record.cosine = cosine_distance(Y, Yp)
        report.blocks.append(record)
        if verbose:
            print(f"     block output: mse={record.mse:.6e}  cosine={record.cosine:.6e}")

        blocks.append(work)
        X, Xp = Y, Yp

    return ToyModel(model.dims, blocks, model.embed_seed), report


# ─── Persistência ────────────────────────────────────────────────────────────

def model_tensors(model: ToyModel) -> Dict[str, np.ndarray]:
    d = model.dims
    tensors: Dict[str, np.ndarray] = {
        "meta.dims": np.array([[d.d_model, d.n_heads, d.d_ff, d.seq_len, model.n_blocks, model.embed_seed]], dtype=np.float64),
    }
    for b, blk in enumerate(model.blocks):
        for name in LAYER_ORDER:
            L = blk.linears[name]
            if isinstance(L, FactorizedLinear):
                tensors[f"block{b}.{name}.U"] = L.U
                tensors[f"block{b}.{name}.V"] = L.V
                tensors[f"block{b}.{name}.meta"] = np.array([[
                    L.rank, ALL_OBJECTIVES.index(L.objective_used), float(L.degenerate), L.numerical_rank,
                ]], dtype=np.float64)
            else:
                tensors[f"block{b}.{name}.W"] = L
        tensors[f"block{b}.norm1"] = blk.norm1[None, :]
        tensors[f"block{b}.norm2"] = blk.norm2[None, :]
    return tensors


def _require(tensors: Dict[str, np.ndarray], name: str, shape: tuple, source: str) -> np.ndarray:
    if name not in tensors:
        raise CorruptContainerError(f"{source}: missing tensor '{name}'")
    value = tensors[name]
    if value.shape != shape:
        raise DimensionMismatchError(f"{source}: tensor '{name}' has shape {value.shape}, expected {shape}")
    return value


def _meta_ints(row: np.ndarray, name: str, source: str, minimum: Sequence[int]) -> List[int]:
    if not np.all(np.isfinite(row)) or np.any(row != np.round(row)):
        raise CorruptContainerError(f"{source}: '{name}' must hold integers, got {row.tolist()}")
    values = [int(v) for v in row]
    if any(v < lo for v, lo in zip(values, minimum)):
        raise CorruptContainerError(f"{source}: '{name}' holds out-of-range values {values}")
    return values


def model_from_tensors(tensors: Dict[str, np.ndarray], source: str = "<container>") -> ToyModel:
    meta = _require(tensors, "meta.dims", (1, 6), source)[0]
    d_model, n_heads, d_ff, seq_len, n_blocks, embed_seed = _meta_ints(
        meta, "meta.dims", source, minimum=(1, 1, 1, 1, 1, 0)
    )
    try:
        dims = BlockDims(d_model, n_heads, d_ff, seq_len)
    except InvalidDimsError as exc:
        raise CorruptContainerError(f"{source}: {exc}") from exc

    used = {"meta.dims"}
    blocks: List[BlockParams] = []
    for b in range(n_blocks):
        linears: Dict[str, Union[np.ndarray, FactorizedLinear]] = {}
        for name in LAYER_ORDER:
            m, n = dims.layer_shape(name)
            prefix = f"block{b}.{name}"
            if f"{prefix}.W" in tensors:
                linears[name] = _require(tensors, f"{prefix}.W", (m, n), source).copy()
                used.add(f"{prefix}.W")
                continue
            info = _require(tensors, f"{prefix}.meta", (1, 4), source)[0]
            k, code, _, numerical_rank = _meta_ints(info, f"{prefix}.meta", source, minimum=(1, 0, 0, 0))
            if not 0 <= code < len(ALL_OBJECTIVES):
                raise CorruptContainerError(f"{source}: '{prefix}.meta' has unknown objective code {code}")
            linears[name] = FactorizedLinear(
                U=_require(tensors, f"{prefix}.U", (m, k), source).copy(),
                V=_require(tensors, f"{prefix}.V", (n, k), source).copy(),
                objective_used=ALL_OBJECTIVES[code],
                degenerate=bool(info[2]),
                numerical_rank=numerical_rank,
            )
            used.update({f"{prefix}.U", f"{prefix}.V", f"{prefix}.meta"})
        norm1 = _require(tensors, f"block{b}.norm1", (1, d_model), source)[0].copy()
        norm2 = _require(tensors, f"block{b}.norm2", (1, d_model), source)[0].copy()
        used.update({f"block{b}.norm1", f"block{b}.norm2"})
        blocks.append(BlockParams(dims, linears, norm1, norm2))

    extra = sorted(set(tensors) - used)
    if extra:
        raise CorruptContainerError(f"{source}: unexpected tensors {extra[:5]}")
    return ToyModel(dims, blocks, embed_seed)


def save_model(path: PathLike, model: ToyModel) -> Path:
    return write_container(path, model_tensors(model))


def load_model(path: PathLike) -> ToyModel:
    return model_from_tensors(read_container(path), source=str(path))

"""Métricas de distorção, contabilidade de parâmetros/FLOPs e o relatório de compressão."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Dict, List, Mapping, Optional

import numpy as np
import pandas as pd

from aasvd.errors import DimensionMismatchError
from aasvd.toyformer import LAYER_ORDER, block_forward

if TYPE_CHECKING:
    from aasvd.pipeline import CalibrationSet, ToyModel

NEAR_ZERO = 1e-12

EVOLUTION_SITES = {"o_proj": "o_out", "mlp_down": "down_out", "block_out": "block_out"}
EVOLUTION_COLUMNS = ["run_id", "block", "site", "metric", "value"]


# ─── Distorção ───────────────────────────────────────────────────────────────

def _check_pair(Y: np.ndarray, Yp: np.ndarray) -> None:
    if np.shape(Y) != np.shape(Yp):
        raise DimensionMismatchError(f"operands differ in shape: {np.shape(Y)} vs {np.shape(Yp)}")


def mse(Y: np.ndarray, Yp: np.ndarray) -> float:
    """Média das diferenças quadráticas entrada a entrada."""
    _check_pair(Y, Yp)
    D = np.asarray(Y, dtype=np.float64) - np.asarray(Yp, dtype=np.float64)
    return float(np.mean(D * D)) if D.size else 0.0


def cosine_distance(Y: np.ndarray, Yp: np.ndarray) -> float:
    """
    Média sobre colunas (tokens) de 1 − cos(y, y').

    Coluna em que os dois vetores têm norma < 1e-12 conta 0; se só um tiver, conta 1.
    """
    _check_pair(Y, Yp)
    Y = np.asarray(Y, dtype=np.float64)
    Yp = np.asarray(Yp, dtype=np.float64)
    if Y.ndim == 1:
        Y, Yp = Y[:, None], Yp[:, None]
    if Y.shape[1] == 0:
        return 0.0
    n1 = np.linalg.norm(Y, axis=0)
    n2 = np.linalg.norm(Yp, axis=0)
    small1, small2 = n1 < NEAR_ZERO, n2 < NEAR_ZERO
    regular = ~(small1 | small2)

    dist = np.where(small1 & small2, 0.0, 1.0)
    cos = np.sum(Y[:, regular] * Yp[:, regular], axis=0) / (n1[regular] * n2[regular])
    dist[regular] = 1.0 - np.clip(cos, -1.0, 1.0)
    return float(np.mean(dist))


# ─── Contabilidade ───────────────────────────────────────────────────────────

@dataclass(frozen=True)
class LayerAccounting:
    m: int
    n: int
    rank: Optional[int]         # None quando a camada ficou densa

    @property
    def dense_params(self) -> int:
        return self.m * self.n

    @property
    def params(self) -> int:
        return self.dense_params if self.rank is None else self.rank * (self.m + self.n)

    @property
    def ratio(self) -> float:
        return self.params / self.dense_params

    @property
    def remapped_ratio(self) -> float:
        return 1.0 if self.rank is None else self.rank / min(self.m, self.n)

    @property
    def remapped_storage(self) -> int:
        return self.dense_params if self.rank is None else max(self.m, self.n) * self.rank

    @property
    def flops_before(self) -> int:
        """Multiplicações-somas por token da camada densa."""
        return self.dense_params

    @property
    def flops_after(self) -> int:
        return self.params


@dataclass
class AccountingTotals:
    params_before: int
    params_after: int
    linear_params_before: int
    linear_params_after: int
    compressed_layers: int
    effective_ratio: float          # Σ k(m+n) / Σ mn nas camadas comprimidas
    remapped_ratio: float           # Σ max(m,n)·k / Σ mn nas camadas comprimidas
    remapped_storage: int
    flops_before: int
    flops_after: int
    flop_reduction: float
    remap: bool = False
    remap_regime: bool = False      # os fatores de alguma camada são maiores que a matriz densa

    def to_dict(self) -> Dict:
        return asdict(self)


def summarize_layers(layers: List[LayerAccounting], extra_params: int = 0, remap: bool = False) -> AccountingTotals:
    compressed = [a for a in layers if a.rank is not None]
    dense_c = sum(a.dense_params for a in compressed)
    lin_before = sum(a.dense_params for a in layers)
    lin_after = sum(a.params for a in layers)
    flops_after = sum(a.flops_after for a in layers)
    return AccountingTotals(
        params_before=lin_before + extra_params,
        params_after=lin_after + extra_params,
        linear_params_before=lin_before,
        linear_params_after=lin_after,
        compressed_layers=len(compressed),
        effective_ratio=(sum(a.params for a in compressed) / dense_c) if dense_c else 1.0,
        remapped_ratio=(sum(a.remapped_storage for a in compressed) / dense_c) if dense_c else 1.0,
        remapped_storage=sum(a.remapped_storage for a in layers),
        flops_before=lin_before,
        flops_after=flops_after,
        flop_reduction=lin_before / flops_after if flops_after else float("inf"),
        remap=remap,
        remap_regime=any(a.params > a.dense_params for a in compressed),
    )


def model_layer_accounting(model: "ToyModel") -> List[LayerAccounting]:
    out: List[LayerAccounting] = []
    for block in model.blocks:
        for name in LAYER_ORDER:
            m, n = model.dims.layer_shape(name)
            rank = block.linears[name].rank if block.is_factorized(name) else None
            out.append(LayerAccounting(m, n, rank))
    return out


def accounting(model_before: "ToyModel", model_after: "ToyModel", remap: bool = False) -> AccountingTotals:
    """Totais exatos de parâmetros e FLOPs das camadas lineares de ``model_after`` contra ``model_before``."""
    if model_before.dims != model_after.dims or model_before.n_blocks != model_after.n_blocks:
        raise DimensionMismatchError(
            f"models differ in shape: {model_before.dims}×{model_before.n_blocks} vs "
            f"{model_after.dims}×{model_after.n_blocks}"
        )
    before = summarize_layers(model_layer_accounting(model_before))
    after_layers = model_layer_accounting(model_after)
    norms = 2 * model_after.dims.d_model * model_after.n_blocks
    totals = summarize_layers(after_layers, extra_params=norms, remap=remap)
    totals.params_before = before.params_after + norms
    totals.linear_params_before = before.linear_params_after
    totals.flops_before = before.flops_after
    totals.flop_reduction = totals.flops_before / totals.flops_after if totals.flops_after else float("inf")
    return totals


# ─── Registros do relatório ──────────────────────────────────────────────────

@dataclass
class LayerRecord:
    block: int
    layer: str
    m: int
    n: int
    rank: int
    objective: str
    objective_value: float
    optimum: float
    anchored_value: float
    params_before: int
    params_after: int
    degenerate: bool = False
    numerical_rank: int = 0
    dominance: Dict[str, float] = field(default_factory=dict)

    def to_row(self) -> Dict:
        row = {k: v for k, v in asdict(self).items() if k != "dominance"}
        for obj, value in self.dominance.items():
            row[f"anchored_by_{obj}"] = value
        return row


@dataclass
class BlockRecord:
    block: int
    mse: float
    cosine: float
    refined: bool = False
    refine_initial_loss: Optional[float] = None
    refine_final_loss: Optional[float] = None
    loss_trace: List[float] = field(default_factory=list)

    def to_row(self) -> Dict:
        return {
            "block": self.block,
            "mse": self.mse,
            "cosine": self.cosine,
            "refined": self.refined,
            "refine_initial_loss": self.refine_initial_loss,
            "refine_final_loss": self.refine_final_loss,
            "refine_epochs": len(self.loss_trace),
        }


@dataclass
class CompressionReport:
    """Registros por camada e por bloco de uma execução de compress_model, mais os totais."""

    run_id: str
    objective: str
    refine_enabled: bool
    layers: List[LayerRecord] = field(default_factory=list)
    blocks: List[BlockRecord] = field(default_factory=list)
    totals: Optional[AccountingTotals] = None

    def layers_frame(self) -> pd.DataFrame:
        df = pd.DataFrame([r.to_row() for r in self.layers])
        if len(df):
            df.insert(0, "run_id", self.run_id)
        return df

    def blocks_frame(self) -> pd.DataFrame:
        df = pd.DataFrame([r.to_row() for r in self.blocks])
        if len(df):
            df.insert(0, "run_id", self.run_id)
        return df

    def refine_frame(self) -> pd.DataFrame:
        rows = [
            {"run_id": self.run_id, "block": b.block, "epoch": e + 1, "loss": loss}
            for b in self.blocks for e, loss in enumerate(b.loss_trace)
        ]
        return pd.DataFrame(rows, columns=["run_id", "block", "epoch", "loss"])

    def effective_ratio(self) -> float:
        """Σ k(m+n) / Σ mn recalculado a partir dos registros de camada."""
        dense = sum(r.params_before for r in self.layers)
        return sum(r.params_after for r in self.layers) / dense if dense else 1.0

    def final_block(self) -> Optional[BlockRecord]:
        return self.blocks[-1] if self.blocks else None


# ─── Evolução do erro ────────────────────────────────────────────────────────

def error_evolution(
    orig: "ToyModel",
    comp: "ToyModel",
    eval_set: "CalibrationSet",
    run_id: str = "run",
) -> pd.DataFrame:
    """
    Roda os dois modelos lado a lado sobre ``eval_set`` (cada um no seu fluxo) e
    registra MSE e distância cosseno na saída do o_proj, na saída do down_proj
    e na saída de cada bloco.

    Devolve uma tabela longa com colunas run_id, block, site, metric, value.
    """
    if orig.dims != comp.dims or orig.n_blocks != comp.n_blocks:
        raise DimensionMismatchError("models differ in shape")
    if eval_set.inputs.shape[0] != orig.dims.d_model:
        raise DimensionMismatchError(
            f"evaluation inputs have {eval_set.inputs.shape[0]} rows, model expects {orig.dims.d_model}"
        )
    rows: List[Dict] = []
    X = Xp = eval_set.inputs
    for b, (blk, blk_c) in enumerate(zip(orig.blocks, comp.blocks)):
        X, cache = block_forward(blk, X, block=b)
        Xp, cache_c = block_forward(blk_c, Xp, block=b)
        for site, tap in EVOLUTION_SITES.items():
            a, c = cache.taps[tap], cache_c.taps[tap]
            rows.append({"run_id": run_id, "block": b, "site": site, "metric": "mse", "value": mse(a, c)})
            rows.append({"run_id": run_id, "block": b, "site": site, "metric": "cosine", "value": cosine_distance(a, c)})
    return pd.DataFrame(rows, columns=EVOLUTION_COLUMNS)


def error_evolution_table(
    orig: "ToyModel",
    runs: Mapping[str, "ToyModel"],
    eval_set: "CalibrationSet",
) -> pd.DataFrame:
    """Evolução do erro de vários modelos comprimidos, concatenada por run_id."""
    frames = [error_evolution(orig, comp, eval_set, run_id=run_id) for run_id, comp in runs.items()]
    if not frames:
        return pd.DataFrame(columns=EVOLUTION_COLUMNS)
    return pd.concat(frames, ignore_index=True)


def evolution_pivot(df: pd.DataFrame) -> pd.DataFrame:
    """Visão larga: uma linha por (run_id, block), uma coluna por site/métrica."""
    if df.empty:
        return pd.DataFrame()
    wide = df.pivot_table(index=["run_id", "block"], columns=["site", "metric"], values="value", aggfunc="first")
    wide.columns = [f"{site}_{metric}" for site, metric in wide.columns]
    return wide.reset_index()

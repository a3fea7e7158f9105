"""
Refinamento local no nível do bloco.

Depois que todas as projeções de um bloco foram fatoradas, os pares de fatores
e os ganhos de RMSNorm são ajustados juntos para que o bloco comprimido, aplicado
ao fluxo deslocado X', reproduza a saída do bloco original sobre X:

    minimizar  mean((L(X) − L'(X'))²)   sobre {U_j, V_j}, norm1, norm2

L(X) é calculado uma vez e congelado. A otimização é AdamW com weight decay
desacoplado, sob taxa de aprendizado com warmup linear e decaimento cosseno;
os minibatches são sequências inteiras de calibração.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from aasvd.errors import (
    ConfigError,
    DimensionMismatchError,
    NoFactorizedLayersError,
    NonFiniteActivationError,
    NonFiniteLossError,
)
from aasvd.toyformer import (
    BlockParams,
    block_backward,
    block_forward,
    check_input,
    get_tensor,
    trainable_keys,
    with_tensors,
)


@dataclass(frozen=True)
class RefineConfig:
    base_lr: float = 1e-4
    epochs: int = 25
    batch_size: int = 32
    warmup_fraction: float = 0.1
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    shuffle: bool = True

    def __post_init__(self) -> None:
        if not self.base_lr >= 0:
            raise ConfigError(f"refine.base_lr must be ≥ 0, got {self.base_lr}")
        if self.epochs < 1:
            raise ConfigError(f"refine.epochs must be ≥ 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"refine.batch_size must be ≥ 1, got {self.batch_size}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"refine.warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.weight_decay < 0:
            raise ConfigError(f"refine.weight_decay must be ≥ 0, got {self.weight_decay}")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError(f"refine.betas must lie in [0, 1), got {self.betas}")
        if self.adam_eps <= 0:
            raise ConfigError(f"refine.adam_eps must be > 0, got {self.adam_eps}")

    def to_dict(self) -> Dict:
        return {
            "base_lr": self.base_lr,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "warmup_fraction": self.warmup_fraction,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "adam_eps": self.adam_eps,
            "shuffle": self.shuffle,
        }


@dataclass
class OptimizerState:
    """Primeiro e segundo momentos por chave de tensor e o número de passos dados."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


@dataclass
class RefineResult:
    params: BlockParams
    loss_trace: List[float]
    initial_loss: float
    final_loss: float
    steps: int = 0


# ─── Perda, agenda, otimizador ───────────────────────────────────────────────

def mse_block_loss(Y_ref: np.ndarray, Y_comp: np.ndarray) -> Tuple[float, np.ndarray]:
    """Erro quadrático médio sobre todas as entradas e seu gradiente em relação a Y_comp."""
    if Y_ref.shape != Y_comp.shape:
        raise DimensionMismatchError(f"loss operands differ in shape: {Y_ref.shape} vs {Y_comp.shape}")
    diff = Y_comp - Y_ref
    count = diff.size
    return float(np.sum(diff * diff)) / count, (2.0 / count) * diff


def lr_schedule(step: int, total_steps: int, cfg: RefineConfig) -> float:
    """Warmup linear 0 → base_lr, depois decaimento cosseno base_lr → 0 em total_steps."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be ≥ 1, got {total_steps}")
    step = min(max(step, 0), total_steps)
    warmup = cfg.warmup_fraction * total_steps
    if step < warmup:
        return cfg.base_lr * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: RefineConfig,
) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """
    Um passo de AdamW em cada chave de ``params`` (as entradas não são alteradas).

        p ← p·(1 − lr·wd)
        p ← p − (lr / (1 − β₁ᵗ)) · m / (sqrt(v)/sqrt(1 − β₂ᵗ) + eps)
    """
    if lr < 0:
        raise ConfigError(f"lr must be ≥ 0, got {lr}")
    beta1, beta2 = cfg.betas
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t

    new_params: Dict[str, np.ndarray] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape or state.m[key].shape != p.shape:
            raise DimensionMismatchError(
                f"{key}: parameter {p.shape}, gradient {g.shape}, moment {state.m[key].shape}"
            )
        m = beta1 * state.m[key] + (1.0 - beta1) * g
        v = beta2 * state.v[key] + (1.0 - beta2) * g * g
        updated = p * (1.0 - lr * cfg.weight_decay) if cfg.weight_decay else p
        denom = np.sqrt(v) / math.sqrt(bc2) + cfg.adam_eps
        new_params[key] = updated - (lr / bc1) * m / denom
        new_m[key] = m
        new_v[key] = v
    return new_params, OptimizerState(m=new_m, v=new_v, step=t)


# ─── Refinamento do bloco ────────────────────────────────────────────────────

def _sequence_columns(seqs: np.ndarray, seq_len: int) -> np.ndarray:
    return (seqs[:, None] * seq_len + np.arange(seq_len)[None, :]).ravel()


def block_mse(params: BlockParams, Xp: np.ndarray, Y_ref: np.ndarray) -> float:
    Y, _ = block_forward(params, Xp)
    return mse_block_loss(Y_ref, Y)[0]


def refine_block(
    orig: BlockParams,
    comp: BlockParams,
    X: np.ndarray,
    Xp: np.ndarray,
    cfg: RefineConfig,
    seed: int = 0,
    block_index: Optional[int] = None,
    verbose: bool = False,
) -> RefineResult:
    """
    Ajusta os fatores e os ganhos de norma de ``comp`` em direção às saídas de ``orig``.

    Camadas densas que restam em ``comp`` não são treinadas; ``orig`` e ``comp``
    nunca são alterados. O loss trace guarda, por época, a média ponderada por
    entradas das perdas dos minibatches daquela época.
    """
    if not comp.factorized_layers():
        raise NoFactorizedLayersError("refinement needs at least one factorized layer")
    if X.shape != Xp.shape:
        raise DimensionMismatchError(f"X and X' must be column-aligned, got {X.shape} and {Xp.shape}")
    n_seq = check_input(comp.dims, Xp)
    T = comp.dims.seq_len

    Y_ref, _ = block_forward(orig, X, block=block_index)
    params = comp.copy()
    keys = trainable_keys(params)
    tensors = {k: get_tensor(params, k) for k in keys}
    state = OptimizerState.zeros_like(tensors)
    rng = np.random.default_rng(seed)

    n_batches = math.ceil(n_seq / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    initial_loss = block_mse(params, Xp, Y_ref)

    loss_trace: List[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_seq) if cfg.shuffle else np.arange(n_seq)
        weighted, entries = 0.0, 0
        for start in range(0, n_seq, cfg.batch_size):
            cols = _sequence_columns(order[start:start + cfg.batch_size], T)
            Y_b = Y_ref[:, cols]
            try:
                Y_c, cache = block_forward(params, Xp[:, cols])
            except NonFiniteActivationError as exc:
                raise NonFiniteLossError(
                    "refinement diverged (non-finite activations)", epoch=epoch, block=block_index
                ) from exc
            loss, dY = mse_block_loss(Y_b, Y_c)
            if not math.isfinite(loss):
                raise NonFiniteLossError("refinement diverged", epoch=epoch, block=block_index)

            grads = block_backward(params, cache, dY)
            lr = lr_schedule(step, total_steps, cfg)
            tensors, state = adamw_step(tensors, {k: grads[k] for k in keys}, state, lr, cfg)
            params = with_tensors(params, tensors)

            weighted += loss * Y_b.size
            entries += Y_b.size
            step += 1

        epoch_loss = weighted / entries
        loss_trace.append(epoch_loss)
        if verbose:
            print(f"      epoch {epoch + 1:>3}/{cfg.epochs}  loss={epoch_loss:.6e}")

    final_loss = block_mse(params, Xp, Y_ref)
    if not math.isfinite(final_loss):
        raise NonFiniteLossError("refinement ended with a non-finite loss", epoch=cfg.epochs - 1, block=block_index)
    return RefineResult(
        params=params,
        loss_trace=loss_trace,
        initial_loss=initial_loss,
        final_loss=final_loss,
        steps=step,
    )

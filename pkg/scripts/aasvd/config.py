"""
Configuração da execução: um documento YAML/JSON lido em dataclasses congeladas.

Seções (todas opcionais, padrões abaixo):

    name: "AA-SVD run"
    seed: 0
    output_dir: outputs
    model:        {d_model, n_heads, d_ff, seq_len, n_blocks}
    calibration:  {n_sequences, eval_sequences, spectrum_decay, batch_columns}
    compression:  {ratio, remap, objective, method, regularization, shift_source, track_dominance}
    refine:       {enabled, base_lr, epochs, batch_size, warmup_fraction, weight_decay, betas, adam_eps}
    ablation:     {objectives, refine, calib_sizes}

JSON é subconjunto de YAML; os dois são lidos com ``yaml.safe_load``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from aasvd.errors import ConfigError, InvalidDimsError
from aasvd.layerwise import ALL_OBJECTIVES, Objective, RatioPolicy
from aasvd.linalg import FACTOR_METHODS
from aasvd.refine import RefineConfig
from aasvd.toyformer import BlockDims

SEED_CONSUMERS = ("model", "embedding", "calibration", "evaluation", "refine")
SHIFT_SOURCES = ("in_place", "block_entry")
SECTIONS = ("name", "seed", "output_dir", "model", "calibration", "compression", "refine", "ablation")


# ─── Sementes ────────────────────────────────────────────────────────────────

def split_seed(root: int, consumer: str, index: int = 0) -> int:
    """Semente independente de 32 bits para um consumidor (e sub-índice opcional) de uma semente raiz."""
    if consumer not in SEED_CONSUMERS:
        raise ConfigError(f"Unknown seed consumer: '{consumer}'. Available: {list(SEED_CONSUMERS)}")
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=(SEED_CONSUMERS.index(consumer), int(index)))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# ─── Auxiliares de coerção ───────────────────────────────────────────────────

def _section(raw: Dict[str, Any], key: str) -> Dict[str, Any]:
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"section '{key}' must be a mapping, got {type(value).__name__}")
    return value


def _int(section: str, cfg: Dict[str, Any], key: str, default: Optional[int]) -> Optional[int]:
    value = cfg.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
        raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key} must be an integer, got {value!r}") from None


def _float(section: str, cfg: Dict[str, Any], key: str, default: float) -> float:
    value = cfg.get(key, default)
    if isinstance(value, bool):
        raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key} must be a number, got {value!r}") from None


def _bool(section: str, cfg: Dict[str, Any], key: str, default: bool) -> bool:
    value = cfg.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError(f"{section}.{key} must be true or false, got {value!r}")
    return value


# ─── Seções ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    seq_len: int = 16
    n_blocks: int = 4

    def __post_init__(self) -> None:
        _ = self.dims
        if self.n_blocks < 1:
            raise InvalidDimsError(f"n_blocks must be ≥ 1, got {self.n_blocks}")

    @property
    def dims(self) -> BlockDims:
        return BlockDims(self.d_model, self.n_heads, self.d_ff, self.seq_len)

    @classmethod
    def from_dict(cls, cfg: Dict[str, Any]) -> "ModelConfig":
        d = cls()
        return cls(
            d_model=_int("model", cfg, "d_model", d.d_model),
            n_heads=_int("model", cfg, "n_heads", d.n_heads),
            d_ff=_int("model", cfg, "d_ff", d.d_ff),
            seq_len=_int("model", cfg, "seq_len", d.seq_len),
            n_blocks=_int("model", cfg, "n_blocks", d.n_blocks),
        )

    def to_dict(self) -> Dict[str, int]:
        return {**self.dims.to_dict(), "n_blocks": self.n_blocks}


@dataclass(frozen=True)
class CalibrationConfig:
    n_sequences: int = 64
    eval_sequences: int = 16
    spectrum_decay: float = 1.0
    batch_columns: Optional[int] = None

    def __post_init__(self) -> None:
        if self.n_sequences < 1 or self.eval_sequences < 1:
            raise ConfigError("calibration.n_sequences and calibration.eval_sequences must be ≥ 1")
        if self.spectrum_decay < 0:
            raise ConfigError(f"calibration.spectrum_decay must be ≥ 0, got {self.spectrum_decay}")
        if self.batch_columns is not None and self.batch_columns < 1:
            raise ConfigError(f"calibration.batch_columns must be ≥ 1, got {self.batch_columns}")

    @classmethod
    def from_dict(cls, cfg: Dict[str, Any]) -> "CalibrationConfig":
        d = cls()
        return cls(
            n_sequences=_int("calibration", cfg, "n_sequences", d.n_sequences),
            eval_sequences=_int("calibration", cfg, "eval_sequences", d.eval_sequences),
            spectrum_decay=_float("calibration", cfg, "spectrum_decay", d.spectrum_decay),
            batch_columns=_int("calibration", cfg, "batch_columns", d.batch_columns),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_sequences": self.n_sequences,
            "eval_sequences": self.eval_sequences,
            "spectrum_decay": self.spectrum_decay,
            "batch_columns": self.batch_columns,
        }


def _parse_regularization(value: Any) -> Union[None, str, float]:
    if value is None or value in ("tikhonov", "pinv"):
        return value
    if isinstance(value, (int, float)) and not isinstance(value, bool) and value > 0:
        return float(value)
    raise ConfigError(
        f"Unknown regularization: '{value}'. Available: [None, 'tikhonov', 'pinv', <eps > 0>]"
    )


@dataclass(frozen=True)
class RunConfig:
    """Tudo o que compress_model precisa além do modelo e dos dados de calibração."""

    ratio_policy: RatioPolicy = field(default_factory=lambda: RatioPolicy(0.5))
    objective: Objective = Objective.ANCHORED
    method: str = "cholesky"
    refine: RefineConfig = field(default_factory=RefineConfig)
    refine_enabled: bool = False
    seed: int = 0
    regularization: Union[None, str, float] = None
    shift_source: str = "in_place"
    track_dominance: bool = False
    batch_columns: Optional[int] = None

    def __post_init__(self) -> None:
        if self.method not in FACTOR_METHODS:
            raise ConfigError(f"Unknown method: '{self.method}'. Available: {list(FACTOR_METHODS)}")
        if self.shift_source not in SHIFT_SOURCES:
            raise ConfigError(
                f"Unknown shift_source: '{self.shift_source}'. Available: {list(SHIFT_SOURCES)}"
            )
        object.__setattr__(self, "objective", Objective.parse(self.objective))
        object.__setattr__(self, "regularization", _parse_regularization(self.regularization))

    def with_(self, **changes: Any) -> "RunConfig":
        return replace(self, **changes)


def refine_from_dict(cfg: Dict[str, Any]) -> Tuple[RefineConfig, bool]:
    d = RefineConfig()
    betas = cfg.get("betas", list(d.betas))
    if not isinstance(betas, (list, tuple)) or len(betas) != 2:
        raise ConfigError(f"refine.betas must be a pair, got {betas!r}")
    try:
        betas_t = (float(betas[0]), float(betas[1]))
    except (TypeError, ValueError):
        raise ConfigError(f"refine.betas must be numbers, got {betas!r}") from None
    refine = RefineConfig(
        base_lr=_float("refine", cfg, "base_lr", d.base_lr),
        epochs=_int("refine", cfg, "epochs", d.epochs),
        batch_size=_int("refine", cfg, "batch_size", d.batch_size),
        warmup_fraction=_float("refine", cfg, "warmup_fraction", d.warmup_fraction),
        weight_decay=_float("refine", cfg, "weight_decay", d.weight_decay),
        betas=betas_t,
        adam_eps=_float("refine", cfg, "adam_eps", d.adam_eps),
        shuffle=_bool("refine", cfg, "shuffle", d.shuffle),
    )
    return refine, _bool("refine", cfg, "enabled", False)


@dataclass(frozen=True)
class AblationConfig:
    objectives: Tuple[Objective, ...] = ALL_OBJECTIVES
    refine_modes: Tuple[bool, ...] = (False, True)
    calib_sizes: Tuple[int, ...] = ()

    @classmethod
    def from_dict(cls, cfg: Dict[str, Any]) -> "AblationConfig":
        objectives = tuple(Objective.parse(o) for o in cfg.get("objectives", [o.value for o in ALL_OBJECTIVES]))
        modes = cfg.get("refine", [False, True])
        if not isinstance(modes, list) or not all(isinstance(m, bool) for m in modes):
            raise ConfigError(f"ablation.refine must be a list of booleans, got {modes!r}")
        sizes = cfg.get("calib_sizes", []) or []
        if not isinstance(sizes, list) or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 1 for s in sizes):
            raise ConfigError(f"ablation.calib_sizes must be a list of positive integers, got {sizes!r}")
        if not objectives or not modes:
            raise ConfigError("ablation.objectives and ablation.refine must not be empty")
        return cls(objectives=objectives, refine_modes=tuple(modes), calib_sizes=tuple(sizes))


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "AA-SVD run"
    seed: int = 0
    output_dir: Path = Path("outputs")
    model: ModelConfig = field(default_factory=ModelConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    run: RunConfig = field(default_factory=RunConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @classmethod
    def from_dict(cls, raw: Optional[Dict[str, Any]]) -> "ExperimentConfig":
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"Unknown config section(s): {unknown}. Available: {list(SECTIONS)}")

        seed = _int("root", raw, "seed", 0)
        comp = _section(raw, "compression")
        calibration = CalibrationConfig.from_dict(_section(raw, "calibration"))
        refine, refine_enabled = refine_from_dict(_section(raw, "refine"))
        ratio = _float("compression", comp, "ratio", 0.5)
        try:
            policy = RatioPolicy(ratio, remap=_bool("compression", comp, "remap", False))
        except ValueError as exc:
            raise ConfigError(f"compression.ratio: {exc}") from None
        run = RunConfig(
            ratio_policy=policy,
            objective=comp.get("objective", Objective.ANCHORED.value),
            method=str(comp.get("method", "cholesky")),
            refine=refine,
            refine_enabled=refine_enabled,
            seed=seed,
            regularization=comp.get("regularization"),
            shift_source=str(comp.get("shift_source", "in_place")),
            track_dominance=_bool("compression", comp, "track_dominance", False),
            batch_columns=calibration.batch_columns,
        )
        return cls(
            name=str(raw.get("name", "AA-SVD run")),
            seed=seed,
            output_dir=Path(raw.get("output_dir", "outputs")),
            model=ModelConfig.from_dict(_section(raw, "model")),
            calibration=calibration,
            run=run,
            ablation=AblationConfig.from_dict(_section(raw, "ablation")),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "model": self.model.to_dict(),
            "calibration": self.calibration.to_dict(),
            "compression": {
                "ratio": self.run.ratio_policy.target_ratio,
                "remap": self.run.ratio_policy.remap,
                "objective": self.run.objective.value,
                "method": self.run.method,
                "regularization": self.run.regularization,
                "shift_source": self.run.shift_source,
                "track_dominance": self.run.track_dominance,
            },
            "refine": {"enabled": self.run.refine_enabled, **self.run.refine.to_dict()},
            "ablation": {
                "objectives": [o.value for o in self.ablation.objectives],
                "refine": list(self.ablation.refine_modes),
                "calib_sizes": list(self.ablation.calib_sizes),
            },
        }


# ─── Leitura e sobrescritas ──────────────────────────────────────────────────

def read_config_dict(path: Union[str, Path]) -> Dict[str, Any]:
    """Mapeamento bruto de um arquivo YAML/JSON; arquivo vazio dá {}."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    return raw


def apply_overrides(raw: Dict[str, Any], assignments: Sequence[str]) -> Dict[str, Any]:
    """
    Aplica atribuições ``section.key=value`` (valor lido como YAML) a uma cópia de ``raw``.

    Exemplo:
        apply_overrides(raw, ["compression.ratio=0.25", "refine.enabled=true"])
    """
    out = copy.deepcopy(raw)
    for item in assignments:
        dotted, sep, text = item.partition("=")
        if not sep or not dotted.strip():
            raise ConfigError(f"override must look like section.key=value, got '{item}'")
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError:
            raise ConfigError(f"override '{item}': value is not valid YAML") from None
        parts = [p.strip() for p in dotted.split(".")]
        node = out
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"override '{item}': '{part}' is not a section")
            node = child
        node[parts[-1]] = value
    return out


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    raw = read_config_dict(path) if path is not None else {}
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides))


def load_dims(path: Union[str, Path]) -> Tuple[ModelConfig, int]:
    """
    Documento de dimensões do modelo: {d_model, n_heads, d_ff, seq_len, n_blocks, seed}.

    Uma config completa de experimento também serve (a seção ``model`` e o ``seed`` raiz).
    """
    raw = read_config_dict(path)
    if "model" in raw and isinstance(raw["model"], dict):
        return ModelConfig.from_dict(raw["model"]), _int("root", raw, "seed", 0)
    return ModelConfig.from_dict(raw), _int("dims", raw, "seed", 0)

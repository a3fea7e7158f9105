"""
Runner AA-SVD: modelos de brinquedo semeados, compressão bloco a bloco, grades de ablação e relatórios.

Uso:
    uv run python scripts/run_aasvd.py gen-model --dims configs/dims.json --out outputs/model.aasv
    uv run python scripts/run_aasvd.py compress --model outputs/model.aasv --config configs/example.yaml --out outputs/run
    uv run python scripts/run_aasvd.py ablate --model outputs/model.aasv --config configs/example.yaml --out outputs/ablation
    uv run python scripts/run_aasvd.py report --in outputs/run

Códigos de saída: 0 ok · 2 config ou arquivo de relatório inválido · 3 falha de E/S · 4 falha numérica.
AASVD_THREADS limita os pools de threads do BLAS.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

if os.environ.get("AASVD_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = os.environ["AASVD_THREADS"]

sys.path.insert(0, str(Path(__file__).parent))

import pandas as pd  # noqa: E402

from aasvd.config import ExperimentConfig, ModelConfig, load_config, load_dims, split_seed  # noqa: E402
from aasvd.errors import (  # noqa: E402
    ConfigError,
    DimensionMismatchError,
    InvalidDimsError,
    NonFiniteActivationError,
    NonFiniteLossError,
    NotPositiveDefiniteError,
    RankOutOfRangeError,
    ReportFormatError,
    SingularCovarianceError,
    SingularFactorError,
    UnknownLayerError,
)
from aasvd.metrics import CompressionReport, accounting, error_evolution  # noqa: E402
from aasvd.pipeline import (  # noqa: E402
    CalibrationSet,
    ToyModel,
    compress_model,
    generate_calibration,
    init_model,
    load_model,
    save_model,
)
from aasvd.report import MarkdownReport, read_evolution_csv, write_csv, write_json  # noqa: E402

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

NUMERIC_ERRORS = (
    SingularCovarianceError, NonFiniteActivationError, NonFiniteLossError,
    NotPositiveDefiniteError, SingularFactorError,
)
CONFIG_ERRORS = (
    ConfigError, InvalidDimsError, ReportFormatError, DimensionMismatchError,
    UnknownLayerError, RankOutOfRangeError,
)


# ─── Auxiliares ──────────────────────────────────────────────────────────────

def _say(args: argparse.Namespace, message: str = "") -> None:
    if not getattr(args, "quiet", False):
        print(message)


def _banner(args: argparse.Namespace, title: str) -> None:
    _say(args, f"\n{'=' * 60}\n  {title}\n{'=' * 60}")


def _overrides(args: argparse.Namespace) -> List[str]:
    out: List[str] = []
    if getattr(args, "seed", None) is not None:
        out.append(f"seed={args.seed}")
    if getattr(args, "ratio", None) is not None:
        out.append(f"compression.ratio={args.ratio}")
    if getattr(args, "objective", None):
        out.append(f"compression.objective={args.objective}")
    if getattr(args, "remap", None) is not None:
        out.append(f"compression.remap={'true' if args.remap else 'false'}")
    if getattr(args, "refine", None) is not None:
        out.append(f"refine.enabled={'true' if args.refine else 'false'}")
    out.extend(getattr(args, "set", None) or [])
    return out


def load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    if not args.config.exists():
        raise FileNotFoundError(f"config not found: {args.config}")
    return load_config(args.config, overrides=_overrides(args))


def prepare_data(cfg: ExperimentConfig, model: ToyModel, n_sequences: Optional[int] = None) -> Tuple[CalibrationSet, CalibrationSet]:
    """Pool de calibração com ``n_sequences`` (padrão: o da config) e o conjunto de avaliação."""
    cal = cfg.calibration
    calib = generate_calibration(
        model.dims, n_sequences or cal.n_sequences, split_seed(cfg.seed, "calibration"),
        embed_seed=model.embed_seed, spectrum_decay=cal.spectrum_decay,
    )
    eval_set = generate_calibration(
        model.dims, cal.eval_sequences, split_seed(cfg.seed, "evaluation"),
        embed_seed=model.embed_seed, spectrum_decay=cal.spectrum_decay,
    )
    return calib, eval_set


def _final_distortion(evolution: pd.DataFrame, n_blocks: int) -> Dict[str, float]:
    last = evolution[(evolution["block"] == n_blocks - 1) & (evolution["site"] == "block_out")]
    values = dict(zip(last["metric"], last["value"]))
    return {"final_mse": values["mse"], "final_cosine": values["cosine"]}


def _accounting_entry(report: CompressionReport) -> Dict[str, Any]:
    return {"objective": report.objective, "refine": report.refine_enabled, **report.totals.to_dict()}


REMAP_WARNING = "remapped ranks: factorized storage exceeds the dense layer (standard ratio > 1)"


def _warnings(reports: List[CompressionReport]) -> List[str]:
    out: List[str] = []
    for r in reports:
        if r.totals is not None and r.totals.remap_regime:
            out.append(f"{r.run_id}: {REMAP_WARNING}")
        degenerate = [f"{rec.block}/{rec.layer}" for rec in r.layers if rec.degenerate]
        if degenerate:
            out.append(f"{r.run_id}: non-unique rank-k truncation in {', '.join(degenerate)}")
    return out


def _summary(
    title: str, cfg: ExperimentConfig, runs: pd.DataFrame, blocks: pd.DataFrame, warnings: List[str],
) -> MarkdownReport:
    md = MarkdownReport(title, description=f"Config: `{cfg.name}` · seed {cfg.seed}", date=False)
    policy = cfg.run.ratio_policy
    md.metric("Target ratio", policy.target_ratio, unit="(remap)" if policy.remap else "")
    md.metric("Calibration sequences", cfg.calibration.n_sequences)
    md.h2("Runs").table(runs)
    if warnings:
        md.h2("Warnings").alerts(warnings, level="warning")
    if len(blocks):
        md.h2("Per-block distortion on calibration data").table(blocks)
    return md


def _check_model(model: ToyModel, cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    if model.dims != cfg.model.dims or model.n_blocks != cfg.model.n_blocks:
        _say(args, f"  note: using the model's own dims {model.dims.to_dict()} × {model.n_blocks} blocks")


# ─── Subcomandos ─────────────────────────────────────────────────────────────

def cmd_gen_model(args: argparse.Namespace) -> int:
    if args.dims is not None:
        model_cfg, seed = load_dims(args.dims)
    else:
        model_cfg, seed = ModelConfig(), 0
    if args.seed is not None:
        seed = args.seed

    _banner(args, "gen-model")
    model = init_model(model_cfg.dims, model_cfg.n_blocks, seed)
    save_model(args.out, model)
    _say(args, f"  → dims: {model_cfg.to_dict()}  seed={seed}")
    _say(args, f"  → parameters: {model.parameter_count():,}")
    _say(args, f"  saved to: {args.out}")
    return EXIT_OK


def cmd_compress(args: argparse.Namespace) -> int:
    cfg = load_experiment(args)
    model = load_model(args.model)
    _banner(args, cfg.name)
    _check_model(model, cfg, args)

    calib, eval_set = prepare_data(cfg, model)
    _say(args, f"\nCompressing ({cfg.run.objective.value}, ρ={cfg.run.ratio_policy.target_ratio}, "
               f"remap={cfg.run.ratio_policy.remap}, refine={cfg.run.refine_enabled})...")
    compressed, report = compress_model(model, calib, cfg.run, verbose=not args.quiet)
    report.totals = accounting(model, compressed, remap=cfg.run.ratio_policy.remap)
    evolution = error_evolution(model, compressed, eval_set, run_id=report.run_id)

    runs = pd.DataFrame([{"run_id": report.run_id, **_final_distortion(evolution, model.n_blocks),
                          "effective_ratio": report.totals.effective_ratio}])
    out = args.out
    save_model(out / "compressed.aasv", compressed)
    write_csv(out / "report.csv", evolution)
    write_csv(out / "layers.csv", report.layers_frame())
    write_csv(out / "blocks.csv", report.blocks_frame())
    write_csv(out / "refine.csv", report.refine_frame())
    write_json(out / "accounting.json", {"runs": {report.run_id: _accounting_entry(report)}})
    write_json(out / "config.json", cfg.to_dict())
    _summary(cfg.name, cfg, runs, report.blocks_frame(), _warnings([report])).save(out / "summary.md")

    t = report.totals
    _say(args, f"\n  parameters: {t.params_before:,} → {t.params_after:,} (effective ρ {t.effective_ratio:.4f})")
    _say(args, f"  final output: mse={runs['final_mse'].iloc[0]:.6e}  cosine={runs['final_cosine'].iloc[0]:.6e}")
    if t.remap_regime:
        _say(args, f"  ⚠ {REMAP_WARNING}")
    _say(args, f"  saved to: {out}")
    return EXIT_OK


def _run_grid(
    cfg: ExperimentConfig, model: ToyModel, calib: CalibrationSet, eval_set: CalibrationSet,
    args: argparse.Namespace,
) -> Tuple[List[CompressionReport], List[pd.DataFrame], List[Dict[str, Any]]]:
    reports: List[CompressionReport] = []
    evolutions: List[pd.DataFrame] = []
    rows: List[Dict[str, Any]] = []
    for obj in cfg.ablation.objectives:
        for refine in cfg.ablation.refine_modes:
            run_cfg = cfg.run.with_(objective=obj, refine_enabled=refine, track_dominance=True)
            _say(args, f"\n  → {obj.value} / refine={'on' if refine else 'off'}")
            compressed, report = compress_model(model, calib, run_cfg)
            report.totals = accounting(model, compressed, remap=run_cfg.ratio_policy.remap)
            evolution = error_evolution(model, compressed, eval_set, run_id=report.run_id)
            final = _final_distortion(evolution, model.n_blocks)
            rows.append({
                "run_id": report.run_id,
                "objective": obj.value,
                "refine": refine,
                **final,
                "effective_ratio": report.totals.effective_ratio,
                "anchored_objective_total": sum(r.anchored_value for r in report.layers),
            })
            _say(args, f"     final mse={final['final_mse']:.6e}  cosine={final['final_cosine']:.6e}")
            reports.append(report)
            evolutions.append(evolution)
    return reports, evolutions, rows


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_experiment(args)
    if args.calib_sizes:
        try:
            sizes = [int(s) for s in args.calib_sizes.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--calib-sizes must be comma-separated integers, got '{args.calib_sizes}'") from None
        if any(s < 1 for s in sizes):
            raise ConfigError("--calib-sizes entries must be ≥ 1")
    else:
        sizes = list(cfg.ablation.calib_sizes)

    model = load_model(args.model)
    _banner(args, f"{cfg.name} — ablation")
    _check_model(model, cfg, args)
    n_main = cfg.calibration.n_sequences
    pool, eval_set = prepare_data(cfg, model, n_sequences=max([n_main, *sizes]))
    calib = pool.head(n_main)

    reports, evolutions, rows = _run_grid(cfg, model, calib, eval_set, args)
    grid = pd.DataFrame(rows)

    sweep_rows: List[Dict[str, Any]] = []
    for size in sizes:
        _say(args, f"\n  calibration budget: {size} sequences")
        _, _, size_rows = _run_grid(cfg, model, pool.head(size), eval_set, args)
        sweep_rows.extend({"n_sequences": size, **r} for r in size_rows)

    out = args.out
    write_csv(out / "ablation.csv", grid)
    write_csv(out / "report.csv", pd.concat(evolutions, ignore_index=True))
    write_csv(out / "layers.csv", pd.concat([r.layers_frame() for r in reports], ignore_index=True))
    write_csv(out / "blocks.csv", pd.concat([r.blocks_frame() for r in reports], ignore_index=True))
    write_csv(out / "refine.csv", pd.concat([r.refine_frame() for r in reports], ignore_index=True))
    write_json(out / "accounting.json", {"runs": {r.run_id: _accounting_entry(r) for r in reports}})
    write_json(out / "config.json", cfg.to_dict())
    if sizes:
        write_csv(out / "calib_sweep.csv", pd.DataFrame(sweep_rows))
    _summary(f"{cfg.name} — ablation", cfg, grid, pd.DataFrame(), _warnings(reports)).save(out / "summary.md")

    _say(args, f"\n  {len(grid)} cells saved to: {out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    in_dir: Path = args.in_dir
    csv_path, acc_path = in_dir / "report.csv", in_dir / "accounting.json"
    for path in (csv_path, acc_path):
        if not path.exists():
            raise FileNotFoundError(f"missing report file: {path}")

    evolution = read_evolution_csv(csv_path)
    try:
        acc = json.loads(acc_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ReportFormatError(f"{acc_path}: invalid JSON ({exc.msg})", line=exc.lineno) from None
    runs = acc.get("runs") if isinstance(acc, dict) else None
    if not isinstance(runs, dict):
        raise ReportFormatError(f"{acc_path}: expected an object with a 'runs' mapping", line=1)

    md = MarkdownReport(f"Report — {in_dir.name}", date=False)
    md.h2("Totals")
    totals = pd.DataFrame([{"run_id": run_id, **entry} for run_id, entry in runs.items()])
    if len(totals):
        md.text(totals.map(_exact).to_markdown(index=False, disable_numparse=True))
    else:
        md.text("No runs.")
    if len(evolution):
        md.h2("Error evolution (evaluation set)")
        shown = evolution.assign(value=evolution["value"].map(_exact))
        md.text(shown.to_markdown(index=False, disable_numparse=True))
    print(md.build())
    return EXIT_OK


def _exact(value: Any) -> str:
    """Menor texto que volta ao mesmo float."""
    return repr(float(value)) if isinstance(value, float) else str(value)


# ─── CLI ─────────────────────────────────────────────────────────────────────

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", type=Path, required=True, help="Contêiner do modelo (.aasv).")
    p.add_argument("--config", type=Path, required=True, help="Config da execução (YAML ou JSON).")
    p.add_argument("--out", type=Path, required=True, help="Diretório de saída.")
    p.add_argument("--seed", type=int, default=None, help="Sobrescreve a semente raiz.")
    p.add_argument("--ratio", type=float, default=None, help="Sobrescreve compression.ratio.")
    p.add_argument("--objective", default=None, help="Sobrescreve compression.objective.")
    p.add_argument("--remap", action=argparse.BooleanOptionalAction, default=None, help="Regra de posto remapeada.")
    p.add_argument("--refine", action=argparse.BooleanOptionalAction, default=None, help="Refinamento de bloco.")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="Sobrescrita genérica da config (repetível).")
    p.add_argument("-q", "--quiet", action="store_true", help="Suprime linhas de progresso.")


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    p = argparse.ArgumentParser(description="Compressão SVD ancorada e adaptativa de blocos transformer de brinquedo.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-model", help="Grava um contêiner de modelo de brinquedo semeado.")
    g.add_argument("--dims", type=Path, default=None, help="JSON de dimensões {d_model, n_heads, d_ff, seq_len, n_blocks, seed}.")
    g.add_argument("--seed", type=int, default=None, help="Sobrescreve a semente do arquivo de dimensões.")
    g.add_argument("--out", type=Path, required=True, help="Caminho do contêiner de saída.")
    g.add_argument("-q", "--quiet", action="store_true", help="Suprime linhas de progresso.")
    g.set_defaults(handler=cmd_gen_model)

    c = sub.add_parser("compress", help="Comprime um modelo e grava os arquivos de relatório.")
    _add_run_flags(c)
    c.set_defaults(handler=cmd_compress)

    a = sub.add_parser("ablate", help="Grade objetivo × refinamento sobre um modelo e uma semente de calibração.")
    _add_run_flags(a)
    a.add_argument("--calib-sizes", default=None, help="Orçamentos de calibração separados por vírgula, ex: 16,32,64.")
    a.set_defaults(handler=cmd_ablate)

    r = sub.add_parser("report", help="Imprime o resumo de um diretório de execução.")
    r.add_argument("--in", dest="in_dir", type=Path, required=True, help="Diretório de saída da execução.")
    r.set_defaults(handler=cmd_report)

    return p.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    try:
        return args.handler(args)
    except NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())

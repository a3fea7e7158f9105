"""Construtor fluente de resumos Markdown e emissores CSV/JSON dos artefatos de relatório."""

from __future__ import annotations

import datetime
import io
import json
import re
from pathlib import Path
from typing import Any, Dict, List, Union

import pandas as pd

from aasvd.container import atomic_write_text
from aasvd.errors import ReportFormatError
from aasvd.metrics import EVOLUTION_COLUMNS, EVOLUTION_SITES

CSV_FLOAT_FORMAT = "%.17g"


class MarkdownReport:
    """
    Monta um documento Markdown passo a passo.

    Exemplo:
        report = (
            MarkdownReport("AA-SVD run", "Seeded toy model, 4 blocks.", date=False)
            .h2("Totals")
            .metric("Effective ratio", "0.4988")
            .table(blocks_df)
            .alert("remapped ranks exceed dense storage", level="warning")
        )
        report.save("outputs/summary.md")
    """

    def __init__(self, title: str, description: str = "", date: bool = True) -> None:
        self._parts: List[str] = []
        self._parts.append(f"# {title}\n")
        if date:
            today = datetime.date.today().isoformat()
            self._parts.append(f"**Generated:** {today}\n")
        if description:
            self._parts.append(f"\n{description}\n")

    # ── Estrutura ─────────────────────────────────────────────────────────

    def h2(self, title: str) -> "MarkdownReport":
        self._parts.append(f"\n## {title}\n")
        return self

    # ── Conteúdo ──────────────────────────────────────────────────────────

    def text(self, content: str) -> "MarkdownReport":
        self._parts.append(f"{content}\n")
        return self

    def table(self, df: pd.DataFrame, index: bool = False, float_fmt: str = ".6g") -> "MarkdownReport":
        """DataFrame como tabela Markdown (tabulate)."""
        self._parts.append(df.to_markdown(index=index, floatfmt=float_fmt) + "\n")
        return self

    def alert(self, message: str, level: str = "warning") -> "MarkdownReport":
        """
        Linha de alerta em citação.

        level: 'warning' | 'error' | 'info' | 'success'
        """
        icons = {"warning": "⚠️", "error": "🔴", "info": "ℹ️", "success": "✅"}
        self._parts.append(f"> {icons.get(level, '•')} **{message}**\n")
        return self

    def alerts(self, messages: List[str], level: str = "warning") -> "MarkdownReport":
        """Adiciona vários alertas do mesmo nível."""
        for msg in messages:
            self.alert(msg, level=level)
        return self

    def metric(self, label: str, value: Any, unit: str = "") -> "MarkdownReport":
        self._parts.append(f"**{label}:** {value}{' ' + unit if unit else ''}\n")
        return self

    # ── Output ────────────────────────────────────────────────────────────

    def build(self) -> str:
        return "\n".join(self._parts)

    def save(self, path: Union[str, Path]) -> "MarkdownReport":
        atomic_write_text(path, self.build())
        return self


# ─── Emissores de artefatos───────────────────────────────────────────────────

def frame_to_csv_text(df: pd.DataFrame) -> str:
    buf = io.StringIO()
    df.to_csv(buf, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return buf.getvalue()


def write_csv(path: Union[str, Path], df: pd.DataFrame) -> Path:
    """CSV com floats em formato de ida e volta exata, gravado atomicamente."""
    return atomic_write_text(path, frame_to_csv_text(df))


def json_text(payload: Dict[str, Any]) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_json(path: Union[str, Path], payload: Dict[str, Any]) -> Path:
    return atomic_write_text(path, json_text(payload))


# ─── Releitura do report.csv ─────────────────────────────────────────────────

def _bad(line: int, message: str) -> ReportFormatError:
    return ReportFormatError(message, line=line)


def read_evolution_csv(path: Union[str, Path]) -> pd.DataFrame:
    """
    Lê e valida um report.csv gravado por ``write_csv``.

    Levanta ReportFormatError apontando a primeira linha inválida (o cabeçalho é a linha 1).
    """
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except pd.errors.EmptyDataError:
        raise _bad(1, "file is empty (expected a header row)") from None
    except pd.errors.ParserError as exc:
        found = re.search(r"line (\d+)", str(exc))
        raise ReportFormatError(str(exc).strip(), line=int(found.group(1)) if found else None) from None

    if list(df.columns) != EVOLUTION_COLUMNS:
        raise _bad(1, f"header must be {','.join(EVOLUTION_COLUMNS)}, got {','.join(map(str, df.columns))}")

    blocks: List[int] = []
    values: List[float] = []
    for line, row in enumerate(df.itertuples(index=False), start=2):
        run_id, block, site, metric, value = row
        if not all(isinstance(v, str) and v != "" for v in row):
            raise _bad(line, "missing field")
        if not block.isdigit():
            raise _bad(line, f"block must be a non-negative integer, got '{block}'")
        if site not in EVOLUTION_SITES:
            raise _bad(line, f"Unknown site: '{site}'. Available: {list(EVOLUTION_SITES)}")
        if metric not in ("mse", "cosine"):
            raise _bad(line, f"Unknown metric: '{metric}'. Available: ['mse', 'cosine']")
        try:
            values.append(float(value))
        except ValueError:
            raise _bad(line, f"value is not a number: '{value}'") from None
        blocks.append(int(block))

    out = df.copy()
    out["block"] = pd.Series(blocks, dtype="int64")
    out["value"] = pd.Series(values, dtype="float64")
    return out

"""
Contêiner binário de matrizes e escrita atômica de arquivos.

Layout (little-endian):

    b"AASV"  u32 version=1
    repetido:
        u32 name_len, name (utf-8), u32 rows, u32 cols, rows·cols float64 (row-major)

Todo tensor é gravado como matriz 2-D; vetores viram linhas 1×n.

Exemplo:
    write_container("model.aasv", {"block0.q_proj.W": Wq, "block0.norm1": g[None, :]})
    tensors = read_container("model.aasv")
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from aasvd.covariance import CovarianceSet
from aasvd.errors import CorruptContainerError, DimensionMismatchError

MAGIC = b"AASV"
VERSION = 1

PathLike = Union[str, Path]

_U32 = struct.Struct("<I")
_F64 = np.dtype("<f8")


# ─── Escrita atômica ─────────────────────────────────────────────────────────

def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Grava num arquivo temporário no diretório de destino e renomeia sobre ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


# ─── Codificação ─────────────────────────────────────────────────────────────

def encode_container(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION)]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise DimensionMismatchError(f"tensor '{name}' must be 1-D or 2-D, got shape {arr.shape}")
        raw_name = name.encode("utf-8")
        parts.append(_U32.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(_U32.pack(arr.shape[0]))
        parts.append(_U32.pack(arr.shape[1]))
        parts.append(np.ascontiguousarray(arr, dtype=_F64).tobytes())
    return b"".join(parts)


def decode_container(data: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    if len(data) < len(MAGIC) + _U32.size:
        raise CorruptContainerError(f"{source}: file too short for a container header")
    if data[:4] != MAGIC:
        raise CorruptContainerError(f"{source}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = _U32.unpack_from(data, 4)
    if version != VERSION:
        raise CorruptContainerError(f"{source}: unsupported container version {version}")

    tensors: Dict[str, np.ndarray] = {}
    pos = 8
    end = len(data)

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > end:
            raise CorruptContainerError(
                f"{source}: truncated while reading {what} at byte {pos} (need {n}, have {end - pos})"
            )
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < end:
        (name_len,) = _U32.unpack(take(_U32.size, "name length"))
        try:
            name = take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptContainerError(f"{source}: tensor name is not valid utf-8") from exc
        (rows,) = _U32.unpack(take(_U32.size, f"rows of '{name}'"))
        (cols,) = _U32.unpack(take(_U32.size, f"cols of '{name}'"))
        payload = take(rows * cols * _F64.itemsize, f"values of '{name}'")
        if name in tensors:
            raise CorruptContainerError(f"{source}: duplicate tensor name '{name}'")
        tensors[name] = np.frombuffer(payload, dtype=_F64).astype(np.float64).reshape(rows, cols)
    return tensors


def write_container(path: PathLike, tensors: Mapping[str, np.ndarray]) -> Path:
    return atomic_write_bytes(path, encode_container(tensors))


def read_container(path: PathLike) -> Dict[str, np.ndarray]:
    path = Path(path)
    return decode_container(path.read_bytes(), source=str(path))


# ─── Checkpoints de covariância───────────────────────────────────────────────

def save_covariance(path: PathLike, cov: CovarianceSet) -> Path:
    return write_container(path, {
        "cov.C": cov.C,
        "cov.S": cov.S,
        "cov.G": cov.G,
        "cov.columns": np.array([[float(cov.columns)]]),
    })


def load_covariance(path: PathLike) -> CovarianceSet:
    tensors = read_container(path)
    missing = [k for k in ("cov.C", "cov.S", "cov.G", "cov.columns") if k not in tensors]
    if missing:
        raise CorruptContainerError(f"{path}: not a covariance checkpoint (missing {missing})")
    C, S, G = tensors["cov.C"], tensors["cov.S"], tensors["cov.G"]
    if not (C.shape == S.shape == G.shape and C.shape[0] == C.shape[1]):
        raise DimensionMismatchError(f"{path}: inconsistent covariance shapes {C.shape}, {S.shape}, {G.shape}")
    return CovarianceSet(C=C, S=S, G=G, columns=int(tensors["cov.columns"][0, 0]))

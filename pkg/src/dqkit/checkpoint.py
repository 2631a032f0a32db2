"""Binary checkpoint format for named parameter tensors.

Layout (little-endian):
  magic "DQWC" | u32 version | u32 meta_len | meta JSON | u32 n_tensors
  then per tensor:
  u16 name_len | name utf-8 | u8 dtype (0=f64, 1=f32, 2=q8) | u8 rank |
  u32 extents... | payload
q8 payload is signed-byte codes followed by one f32 scale; only projection
matrices are stored as q8, everything else falls back to f32.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, BadVersionError, CorruptionError,
                     ParameterError, TruncatedCheckpointError)
from .model import ModelConfig, SeqModel
from .quantize import quantize_tensor

log = logging.getLogger(__name__)

MAGIC = b"DQWC"
VERSION = 1
_DTYPE_F64, _DTYPE_F32, _DTYPE_Q8 = 0, 1, 2


def _write_tensor(buf, name: str, data: np.ndarray, dtype_code: int,
                  bits: int = 8) -> None:
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<BB", dtype_code, data.ndim))
    for ext in data.shape:
        buf.write(struct.pack("<I", ext))
    if dtype_code == _DTYPE_F64:
        buf.write(data.astype("<f8").tobytes())
    elif dtype_code == _DTYPE_F32:
        buf.write(data.astype("<f4").tobytes())
    else:
        codes, alpha = quantize_tensor(data, bits)
        if codes.size and codes.max() > 127:
            log.info("clamping +%d code(s) of %s to +127 for byte storage",
                     int(np.sum(codes > 127)), name)
        codes = np.clip(codes, -128, 127)
        buf.write(codes.astype("<i1").tobytes())
        buf.write(struct.pack("<f", alpha))


def model_bytes(model: SeqModel, storage_dtype: str, meta: dict | None = None,
                bits: int = 8) -> bytes:
    """Serialize to bytes. storage_dtype in {f64, f32, q8}; q8 quantizes the
    attention/feed-forward projection matrices and keeps the rest f32."""
    if storage_dtype not in ("f64", "f32", "q8"):
        raise ParameterError(f"unknown storage dtype {storage_dtype!r}")
    header_meta = {
        "config": model.config.to_dict(),
        "role": model.role,
        "storage_dtype": storage_dtype,
        "bits": bits if storage_dtype == "q8" else 0,
    }
    header_meta.update(meta or {})
    meta_bytes = json.dumps(header_meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(model.params)))
    q8_names = set(model.projection_names("all")) if storage_dtype == "q8" else set()
    for name, p in model.params.items():
        if storage_dtype == "f64":
            code = _DTYPE_F64
        elif name in q8_names:
            code = _DTYPE_Q8
        else:
            code = _DTYPE_F32
        _write_tensor(buf, name, p.data, code, bits=bits)
    return buf.getvalue()


def serialized_size(model: SeqModel, storage_dtype: str, bits: int = 8) -> int:
    return len(model_bytes(model, storage_dtype, bits=bits))


def save_checkpoint(model: SeqModel, path, storage_dtype: str = "f32",
                    meta: dict | None = None, bits: int = 8) -> int:
    data = model_bytes(model, storage_dtype, meta=meta, bits=bits)
    Path(path).write_bytes(data)
    return len(data)


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedCheckpointError(f"expected {n} bytes, got {len(data)}")
    return data


def load_checkpoint(path):
    """Load a checkpoint; returns (SeqModel, meta dict). q8 tensors come back
    as their dequantized float values."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise BadMagicError(f"{path}: not a DQWC checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise BadVersionError(f"{path}: unsupported version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4))
        meta = json.loads(_read_exact(f, meta_len).decode("utf-8"))
        (n_tensors,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            dtype_code, rank = struct.unpack("<BB", _read_exact(f, 2))
            extents = [struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(rank)]
            count = int(np.prod(extents)) if extents else 1
            if dtype_code == _DTYPE_F64:
                data = np.frombuffer(_read_exact(f, count * 8), dtype="<f8")
            elif dtype_code == _DTYPE_F32:
                data = np.frombuffer(_read_exact(f, count * 4), dtype="<f4")
            elif dtype_code == _DTYPE_Q8:
                codes = np.frombuffer(_read_exact(f, count), dtype="<i1")
                (alpha,) = struct.unpack("<f", _read_exact(f, 4))
                data = codes.astype(np.float64) * np.float64(alpha)
            else:
                raise CorruptionError(f"{path}: unknown dtype code {dtype_code}")
            tensors[name] = np.asarray(data, dtype=np.float64).reshape(extents)
        if f.read(1):
            raise CorruptionError(f"{path}: trailing bytes after last record")
    config = ModelConfig.from_dict(meta["config"])
    model = SeqModel(config, role=meta.get("role", "student"), seed=0)
    missing = set(model.params) - set(tensors)
    extra = set(tensors) - set(model.params)
    if missing or extra:
        raise CorruptionError(
            f"{path}: parameter names do not match config "
            f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})"
        )
    for name, data in tensors.items():
        if model.params[name].data.shape != data.shape:
            raise CorruptionError(f"{path}: shape mismatch for {name}")
        model.params[name].data = data
    return model, meta

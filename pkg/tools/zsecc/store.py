"""Single-file model container.

Layout (all integers little-endian)::

    "ZSEC" | version u16 | strategy u8 | record count u16
    per record: kind u8 | dims 4 x u32 | scale f64 | pad u8
                | payload length u64 | payload | redundancy length u64 | redundancy
    CRC32 (u32) of every preceding byte

Strategy 0-3 are the protection strategies; 0xFF marks a float checkpoint whose
payloads are float64 values.
"""
from __future__ import annotations

import logging
import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ChecksumError, CorruptionError, ModelFileError, OutputError, ShapeError, VersionError
from .nn import PARAMETRIC, Layer, LayerKind, LayerSpec, Network, QuantizedNetwork
from .protect import (
    ProtectedModel,
    ProtectionStrategy,
    RecoveryCounters,
    StoredRecord,
    apply_strategy_store,
    to_network,
)

logger = logging.getLogger(__name__)

MAGIC = b"ZSEC"
VERSION = 1
FLOAT_TAG = 0xFF

_HEADER = struct.Struct("<4sHBH")
_RECORD = struct.Struct("<B4IdBQ")
_LENGTH = struct.Struct("<Q")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class RecordSummary:
    kind: LayerKind
    dims: tuple[int, int, int, int]
    scale: float
    pad: int
    payload_bytes: int
    redundancy_bytes: int


@dataclass(frozen=True)
class FileSummary:
    version: int
    strategy_tag: int
    records: tuple[RecordSummary, ...]
    crc: int

    @property
    def strategy_name(self) -> str:
        if self.strategy_tag == FLOAT_TAG:
            return "float"
        return ProtectionStrategy(self.strategy_tag).cli_name


# --- encoding -------------------------------------------------------------------

def _encode(tag: int, records: list[StoredRecord]) -> bytes:
    out = bytearray(_HEADER.pack(MAGIC, VERSION, tag, len(records)))
    for r in records:
        out += _RECORD.pack(int(r.kind), *r.dims, float(r.scale), r.pad, r.payload.size)
        out += r.payload.tobytes()
        out += _LENGTH.pack(r.redundancy.size)
        out += r.redundancy.tobytes()
    out += _CRC.pack(zlib.crc32(out))
    return bytes(out)


def _write_atomic(path: Path, data: bytes) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        Path(tmp).unlink(missing_ok=True)
        raise OutputError(f"cannot write {path}: {e}") from e
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.info("wrote %s (%d bytes)", path, len(data))
    return path


def write_store(pm: ProtectedModel, path: Path | str) -> Path:
    return _write_atomic(Path(path), _encode(int(pm.strategy), list(pm.records)))


def save(model: QuantizedNetwork | ProtectedModel, strategy: ProtectionStrategy | str,
         path: Path | str, protect_biases: bool = True) -> Path:
    """Store a quantized network under ``strategy`` (a ProtectedModel is written as-is)."""
    if isinstance(model, ProtectedModel):
        if model.strategy is not ProtectionStrategy.parse(strategy):
            raise ModelFileError(f"model is stored as {model.strategy.cli_name}, not {strategy}")
        return write_store(model, path)
    return write_store(apply_strategy_store(model, strategy, protect_biases), path)


def save_float(net: Network, path: Path | str) -> Path:
    records = []
    for layer in net.layers:
        spec = layer.spec
        if spec.parametric:
            w = np.ascontiguousarray(layer.weight, dtype="<f8").reshape(-1).view(np.uint8)
            b = np.ascontiguousarray(layer.bias, dtype="<f8").view(np.uint8)
            records.append(StoredRecord(spec.kind, spec.dims, payload=w))
            records.append(StoredRecord(LayerKind.BIAS, (layer.bias.size, 1, 1, 1), payload=b))
        else:
            records.append(StoredRecord(spec.kind, spec.dims))
    return _write_atomic(Path(path), _encode(FLOAT_TAG, records))


# --- decoding -------------------------------------------------------------------

def _parse(raw: bytes) -> tuple[int, int, list[StoredRecord], int]:
    if len(raw) < _HEADER.size + _CRC.size:
        raise CorruptionError(f"file is {len(raw)} bytes, too short for a model file")
    magic, version, tag, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CorruptionError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported model file version {version} (expected {VERSION})")
    body_end = len(raw) - _CRC.size
    (crc,) = _CRC.unpack_from(raw, body_end)
    computed = zlib.crc32(raw[:body_end])
    if computed != crc:
        raise ChecksumError(f"CRC32 mismatch: stored {crc:#010x}, computed {computed:#010x}")
    off = _HEADER.size
    records = []
    for _ in range(count):
        if off + _RECORD.size > body_end:
            raise CorruptionError("truncated record header")
        kind, d0, d1, d2, d3, scale, pad, n = _RECORD.unpack_from(raw, off)
        off += _RECORD.size
        if off + n + _LENGTH.size > body_end:
            raise CorruptionError("truncated payload")
        payload = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off)
        off += n
        (m,) = _LENGTH.unpack_from(raw, off)
        off += _LENGTH.size
        if off + m > body_end:
            raise CorruptionError("truncated redundancy")
        redundancy = np.frombuffer(raw, dtype=np.uint8, count=m, offset=off)
        off += m
        try:
            kind = LayerKind(kind)
        except ValueError:
            raise CorruptionError(f"unknown record kind {kind}") from None
        records.append(StoredRecord(kind, (d0, d1, d2, d3), scale, pad, payload, redundancy))
    if off != body_end:
        raise CorruptionError(f"{body_end - off} trailing bytes after the last record")
    return version, tag, records, crc


def _read(path: Path | str) -> tuple[int, int, list[StoredRecord], int]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ModelFileError(f"cannot read {path}: {e}") from e
    return _parse(raw)


def _expected_redundancy(strategy: ProtectionStrategy, payload: int) -> int:
    if strategy in (ProtectionStrategy.PARITY_ZERO, ProtectionStrategy.STANDARD_ECC):
        return payload // 8
    return 0


def _check_record(tag: int, rec: StoredRecord) -> None:
    n = int(np.prod(rec.dims))
    if tag == FLOAT_TAG:
        if rec.kind in PARAMETRIC:
            size = 8 * n
        elif rec.kind is LayerKind.BIAS:
            size = 8 * rec.dims[0]
        else:
            size = 0
        ok = rec.payload.size == size and rec.redundancy.size == 0
    elif rec.kind in PARAMETRIC:
        ok = (
            rec.pad < 8
            and rec.payload.size == n + rec.pad
            and rec.payload.size % 8 == 0
            and rec.redundancy.size == _expected_redundancy(ProtectionStrategy(tag), rec.payload.size)
        )
    elif rec.kind is LayerKind.BIAS:
        size = 4 * (rec.dims[0] + rec.pad)
        allowed = (0,) if tag == ProtectionStrategy.FAULTY else (0, size // 8)
        ok = rec.pad < 2 and rec.payload.size == size and rec.redundancy.size in allowed
    else:
        ok = rec.payload.size == 0 and rec.redundancy.size == 0
    if not ok:
        raise CorruptionError(
            f"{rec.kind.name} record dims={rec.dims} pad={rec.pad}: payload {rec.payload.size} / "
            f"redundancy {rec.redundancy.size} bytes inconsistent with the strategy"
        )


def infer_input_shape(specs: list[LayerSpec], default_side: int = 28) -> tuple[int, int, int]:
    """Square input shape consistent with the layer stack.

    The file stores no input shape; the spatial size is recovered from the
    first Linear after Flatten and the pooling factor in front of it.
    """
    in_channels = channels = None
    pool = 1
    for i, spec in enumerate(specs):
        if spec.kind is LayerKind.CONV2D:
            in_channels = spec.dims[1] if in_channels is None else in_channels
            channels = spec.dims[0]
        elif spec.kind is LayerKind.MAXPOOL2D:
            pool *= spec.dims[0]
        elif spec.kind is LayerKind.FLATTEN:
            fc = next((s for s in specs[i + 1:] if s.kind is LayerKind.LINEAR), None)
            if fc is None:
                break
            c = channels or 1
            side = math.isqrt(fc.dims[1] // c)
            if c * side * side != fc.dims[1]:
                raise CorruptionError(f"Linear input {fc.dims[1]} is not {c} x side^2")
            return (in_channels or 1, side * pool, side * pool)
        elif spec.kind is LayerKind.LINEAR:
            raise CorruptionError("Linear layer before Flatten")
    return (in_channels or 1, default_side, default_side)


def _specs(records: list[StoredRecord]) -> list[LayerSpec]:
    try:
        return [LayerSpec(r.kind, r.dims) for r in records if r.kind is not LayerKind.BIAS]
    except ShapeError as e:
        raise CorruptionError(str(e)) from e


def load(path: Path | str, input_shape: tuple[int, int, int] | None = None) -> ProtectedModel:
    """Read a quantized model file as stored (no decoding, faults included)."""
    _, tag, records, _ = _read(path)
    if tag == FLOAT_TAG:
        raise ModelFileError(f"{path} is a float checkpoint; quantize it first")
    try:
        strategy = ProtectionStrategy(tag)
    except ValueError:
        raise CorruptionError(f"unknown strategy tag {tag}") from None
    for r in records:
        _check_record(tag, r)
    shape = tuple(input_shape) if input_shape else infer_input_shape(_specs(records))
    return ProtectedModel(strategy, tuple(records), shape)


def load_network(path: Path | str, input_shape: tuple[int, int, int] | None = None
                 ) -> tuple[QuantizedNetwork, RecoveryCounters]:
    pm = load(path, input_shape)
    try:
        return to_network(pm)
    except ShapeError as e:
        raise CorruptionError(f"{path}: {e}") from e


def load_float(path: Path | str, input_shape: tuple[int, int, int] | None = None) -> Network:
    _, tag, records, _ = _read(path)
    if tag != FLOAT_TAG:
        raise ModelFileError(f"{path} is a quantized model, not a float checkpoint")
    for r in records:
        _check_record(tag, r)
    specs = iter(_specs(records))
    layers: list[Layer] = []
    it = iter(records)
    for rec in it:
        if rec.kind is LayerKind.BIAS:
            raise CorruptionError("Bias record without a preceding Conv2D/Linear record")
        spec = next(specs)
        if spec.parametric:
            bias = next(it, None)
            if bias is None or bias.kind is not LayerKind.BIAS:
                raise CorruptionError(f"{rec.kind.name} record is not followed by a Bias record")
            w = rec.payload.view("<f8").astype(np.float64).reshape(spec.weight_shape)
            layers.append(Layer(spec, w, bias.payload.view("<f8").astype(np.float64)))
        else:
            layers.append(Layer(spec))
    shape = tuple(input_shape) if input_shape else infer_input_shape([l.spec for l in layers])
    try:
        return Network(layers, shape)
    except ShapeError as e:
        raise CorruptionError(f"{path}: {e}") from e


def inspect(path: Path | str) -> FileSummary:
    version, tag, records, crc = _read(path)
    return FileSummary(
        version=version,
        strategy_tag=tag,
        records=tuple(
            RecordSummary(r.kind, r.dims, r.scale, r.pad, r.payload.size, r.redundancy.size)
            for r in records
        ),
        crc=crc,
    )

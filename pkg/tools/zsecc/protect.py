"""Protection strategies for stored int8 models.

A ``ProtectedModel`` is the in-memory image of a model file: one
``StoredRecord`` per layer (and per bias) holding payload bytes plus an
optional redundancy array. Weight payloads are always padded to whole 8-byte
blocks so every strategy sees the same weight bytes.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import inplace, secded
from .errors import ArgumentError, ShapeError
from .inplace import BLOCK
from .nn import PARAMETRIC, LayerKind, LayerSpec, QuantizedLayer, QuantizedNetwork, layer_name
from .quantizer import QuantizedBias, QuantizedTensor
from .secded import OutcomeKind

logger = logging.getLogger(__name__)

EMPTY = np.zeros(0, dtype=np.uint8)


class ProtectionStrategy(enum.IntEnum):
    """Strategy tag as stored in the model file header."""

    FAULTY = 0
    PARITY_ZERO = 1
    STANDARD_ECC = 2
    IN_PLACE = 3

    @property
    def cli_name(self) -> str:
        return _CLI_NAMES[self]

    @classmethod
    def parse(cls, name: str | ProtectionStrategy) -> ProtectionStrategy:
        if isinstance(name, ProtectionStrategy):
            return name
        for strategy, cli in _CLI_NAMES.items():
            if name == cli:
                return strategy
        raise ArgumentError(f"unknown strategy {name!r}; expected one of {list(_CLI_NAMES.values())}")


_CLI_NAMES = {
    ProtectionStrategy.FAULTY: "faulty",
    ProtectionStrategy.PARITY_ZERO: "zero",
    ProtectionStrategy.STANDARD_ECC: "ecc",
    ProtectionStrategy.IN_PLACE: "in-place",
}


@dataclass(frozen=True)
class StoredRecord:
    kind: LayerKind
    dims: tuple[int, int, int, int]
    scale: float = 1.0
    pad: int = 0
    payload: np.ndarray = field(default_factory=lambda: EMPTY)
    redundancy: np.ndarray = field(default_factory=lambda: EMPTY)

    @property
    def is_weights(self) -> bool:
        return self.kind in PARAMETRIC


@dataclass(frozen=True)
class RecoveryCounters:
    corrected: int = 0
    detected_double: int = 0
    detected_uncorrectable: int = 0
    parity_zeroed: int = 0

    def __add__(self, other: RecoveryCounters) -> RecoveryCounters:
        return RecoveryCounters(
            self.corrected + other.corrected,
            self.detected_double + other.detected_double,
            self.detected_uncorrectable + other.detected_uncorrectable,
            self.parity_zeroed + other.parity_zeroed,
        )

    @classmethod
    def from_kinds(cls, kinds: np.ndarray) -> RecoveryCounters:
        return cls(
            corrected=int(np.count_nonzero(kinds == OutcomeKind.CORRECTED_SINGLE)),
            detected_double=int(np.count_nonzero(kinds == OutcomeKind.DETECTED_DOUBLE)),
            detected_uncorrectable=int(np.count_nonzero(kinds == OutcomeKind.DETECTED_UNCORRECTABLE)),
        )


@dataclass(frozen=True)
class ProtectedModel:
    strategy: ProtectionStrategy
    records: tuple[StoredRecord, ...]
    input_shape: tuple[int, int, int] = (1, 28, 28)

    def weight_records(self) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.is_weights]

    @property
    def weight_bytes(self) -> int:
        """Padded weight payload bytes."""
        return sum(self.records[i].payload.size for i in self.weight_records())

    @property
    def overhead_bytes(self) -> int:
        return sum(self.records[i].redundancy.size for i in self.weight_records())

    @property
    def space_overhead_pct(self) -> float:
        return 100.0 * self.overhead_bytes / self.weight_bytes if self.weight_bytes else 0.0

    def stored_bits(self, scope: str = "all") -> int:
        if scope == "weights":
            return 8 * self.weight_bytes
        return 8 * (self.weight_bytes + self.overhead_bytes)

    def with_records(self, records: list[StoredRecord]) -> ProtectedModel:
        return replace(self, records=tuple(records))


# --- per-byte parity --------------------------------------------------------

def parity_bits(payload: np.ndarray) -> np.ndarray:
    """Even parity of each byte, packed LSB-first (one bit per byte)."""
    bits = np.unpackbits(payload.reshape(-1, 1), axis=1).sum(axis=1) & 1
    return np.packbits(bits.astype(np.uint8), bitorder="little")


def _parity_recover(payload: np.ndarray, redundancy: np.ndarray) -> tuple[np.ndarray, int]:
    stored = np.unpackbits(redundancy, bitorder="little")[: payload.size]
    actual = np.unpackbits(parity_bits(payload), bitorder="little")[: payload.size]
    bad = stored != actual
    out = payload.copy()
    out[bad] = 0
    return out, int(np.count_nonzero(bad))


# --- (72,64,1) side-band ECC -------------------------------------------------

def _ecc72_layout() -> tuple[secded.SecDedCode, np.ndarray, np.ndarray]:
    code = secded.build_code(64)
    data_idx = np.array(code.parity.data_positions, dtype=np.intp) - 1
    check_idx = np.array(code.parity.check_positions, dtype=np.intp) - 1
    return code, data_idx, check_idx


def ecc72_redundancy(payload: np.ndarray) -> np.ndarray:
    """One check byte per 8-byte block; bit j is the j-th check position."""
    code, _, check_idx = _ecc72_layout()
    blocks = payload.reshape(-1, BLOCK)
    data = np.unpackbits(blocks, axis=1, bitorder="little")
    words = secded.encode_batch(code, data)
    return np.packbits(words[:, check_idx], axis=1, bitorder="little").reshape(-1)


def ecc72_decode(payload: np.ndarray, redundancy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    code, data_idx, check_idx = _ecc72_layout()
    blocks = payload.reshape(-1, BLOCK)
    words = np.zeros((blocks.shape[0], code.k), dtype=np.uint8)
    words[:, data_idx] = np.unpackbits(blocks, axis=1, bitorder="little")
    words[:, check_idx] = np.unpackbits(redundancy.reshape(-1, 1), axis=1, bitorder="little")
    data, kinds, _ = secded.decode_batch(code, words)
    return np.packbits(data, axis=1, bitorder="little").reshape(-1), kinds


# --- store / recover ----------------------------------------------------------

def _weight_record(spec: LayerSpec, t: QuantizedTensor, strategy: ProtectionStrategy,
                   name: str) -> StoredRecord:
    if strategy is ProtectionStrategy.IN_PLACE:
        payload, pad = inplace.protect_tensor(t, layer=name)
        redundancy = EMPTY
    else:
        blocks, pad = inplace.pad_to_blocks(t.values)
        payload = blocks.reshape(-1).view(np.uint8).copy()
        if strategy is ProtectionStrategy.PARITY_ZERO:
            redundancy = parity_bits(payload)
        elif strategy is ProtectionStrategy.STANDARD_ECC:
            redundancy = ecc72_redundancy(payload)
        else:
            redundancy = EMPTY
    return StoredRecord(spec.kind, spec.dims, t.scale, pad, payload, redundancy)


def _bias_record(b: QuantizedBias, protect: bool) -> StoredRecord:
    n = b.values.size
    pad = n % 2
    values = np.concatenate([b.values, np.zeros(pad, dtype=np.int32)]).astype("<i4")
    payload = values.view(np.uint8).copy()
    redundancy = ecc72_redundancy(payload) if protect else EMPTY
    return StoredRecord(LayerKind.BIAS, (n, 1, 1, 1), b.scale, pad, payload, redundancy)


def apply_strategy_store(qnet: QuantizedNetwork, strategy: ProtectionStrategy | str,
                         protect_biases: bool = True) -> ProtectedModel:
    """Lay a quantized network out in memory under one protection strategy.

    Biases get (72,64,1) redundancy when ``protect_biases`` is set, except
    under Faulty, which stores every record bare. Raises ConstraintViolation
    when ``strategy`` is in-place and a weight tensor is not WOT-compliant.
    """
    strategy = ProtectionStrategy.parse(strategy)
    protect_biases = protect_biases and strategy is not ProtectionStrategy.FAULTY
    records: list[StoredRecord] = []
    for i, layer in enumerate(qnet.layers):
        spec = layer.spec
        if spec.parametric:
            records.append(_weight_record(spec, layer.weights, strategy, layer_name(i, spec)))
            records.append(_bias_record(layer.bias, protect_biases))
        else:
            records.append(StoredRecord(spec.kind, spec.dims))
    pm = ProtectedModel(strategy, tuple(records), qnet.input_shape)
    logger.debug("stored under %s: %d weight bytes, %d redundancy bytes",
                 strategy.cli_name, pm.weight_bytes, pm.overhead_bytes)
    return pm


def _weight_count(rec: StoredRecord) -> int:
    return int(np.prod(rec.dims)) if rec.kind is LayerKind.CONV2D else rec.dims[0] * rec.dims[1]


def _recover_weights(strategy: ProtectionStrategy, rec: StoredRecord) -> tuple[np.ndarray, RecoveryCounters]:
    n = _weight_count(rec)
    if rec.payload.size != n + rec.pad:
        raise ShapeError(f"weight payload is {rec.payload.size} bytes, expected {n + rec.pad}")
    if strategy is ProtectionStrategy.IN_PLACE:
        values, kinds, _ = inplace.unprotect_tensor(rec.payload, rec.pad)
        return values, RecoveryCounters.from_kinds(kinds)
    if strategy is ProtectionStrategy.PARITY_ZERO:
        payload, zeroed = _parity_recover(rec.payload, rec.redundancy)
        return payload.view(np.int8)[:n], RecoveryCounters(parity_zeroed=zeroed)
    if strategy is ProtectionStrategy.STANDARD_ECC:
        payload, kinds = ecc72_decode(rec.payload, rec.redundancy)
        return payload.view(np.int8)[:n], RecoveryCounters.from_kinds(kinds)
    return rec.payload.view(np.int8)[:n].copy(), RecoveryCounters()


def _recover_bias(rec: StoredRecord) -> tuple[QuantizedBias, RecoveryCounters]:
    counters = RecoveryCounters()
    payload = rec.payload
    if rec.redundancy.size:
        payload, kinds = ecc72_decode(payload, rec.redundancy)
        counters = RecoveryCounters.from_kinds(kinds)
    values = payload.view("<i4").astype(np.int32)[: rec.dims[0]]
    return QuantizedBias(values=values, scale=rec.scale), counters


def recover(protected: ProtectedModel) -> tuple[list[QuantizedTensor], RecoveryCounters]:
    """Decode every weight record; failures are counted, never raised."""
    tensors: list[QuantizedTensor] = []
    total = RecoveryCounters()
    for i in protected.weight_records():
        rec = protected.records[i]
        values, counters = _recover_weights(protected.strategy, rec)
        shape = rec.dims if rec.kind is LayerKind.CONV2D else rec.dims[:2]
        tensors.append(QuantizedTensor(values=values.reshape(shape), scale=rec.scale))
        total += counters
    return tensors, total


def to_network(protected: ProtectedModel) -> tuple[QuantizedNetwork, RecoveryCounters]:
    """Rebuild the runnable QuantizedNetwork from a (possibly faulty) store."""
    tensors, counters = recover(protected)
    weights = iter(tensors)
    layers: list[QuantizedLayer] = []
    records = iter(protected.records)
    for rec in records:
        spec = LayerSpec(rec.kind, rec.dims)
        if rec.is_weights:
            bias_rec = next(records, None)
            if bias_rec is None or bias_rec.kind is not LayerKind.BIAS:
                raise ShapeError(f"{rec.kind.name} record is not followed by a Bias record")
            bias, bias_counters = _recover_bias(bias_rec)
            counters += bias_counters
            layers.append(QuantizedLayer(spec, next(weights), bias))
        elif rec.kind is LayerKind.BIAS:
            raise ShapeError("Bias record without a preceding Conv2D/Linear record")
        else:
            layers.append(QuantizedLayer(spec))
    return QuantizedNetwork(tuple(layers), protected.input_shape), counters

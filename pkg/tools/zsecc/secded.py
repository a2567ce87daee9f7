"""SEC-DED extended-Hamming codes: (64,57,1) and shortened (72,64,1).

Logical positions are 1-indexed. Hamming check bits sit at the power-of-two
positions 1, 2, 4, ...; data bits fill the remaining positions in ascending
order; the overall-parity bit is logical position k. The (72,64,1) code is the
(127,120) parent shortened by dropping its highest data positions, which leaves
logical positions 1..71 plus overall parity at 72.

Bit-vectors are numpy uint8 arrays of 0/1. Batch functions take ``(n, d)`` or
``(n, k)`` arrays; the single-word functions wrap them.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ArgumentError, ConfigurationError

SUPPORTED_DATA_BITS = (57, 64)


@dataclass(frozen=True)
class CodeSpec:
    k: int
    d: int
    t: int
    r: int

    def __post_init__(self):
        if self.k != self.d + self.r:
            raise ConfigurationError(f"k ({self.k}) != d + r ({self.d} + {self.r})")
        if 2 ** (self.r - 1) < self.d + self.r:
            raise ConfigurationError(f"r={self.r} check bits cannot protect d={self.d}")
        if self.t != 1:
            raise ConfigurationError("only single-error-correcting codes are supported")


@dataclass(frozen=True)
class ParityStructure:
    """Parity-check matrix in column form plus the logical position layout.

    ``columns[p - 1]`` is the r-bit column for logical position p: bits 0..r-2
    are the Hamming syndrome (equal to p for p < k), bit r-1 is the overall
    parity row.
    """

    columns: tuple[int, ...]
    check_positions: tuple[int, ...]
    data_positions: tuple[int, ...]

    def matrix(self, r: int) -> np.ndarray:
        """(r, k) parity-check matrix H over GF(2)."""
        cols = np.array(self.columns, dtype=np.int64)
        return ((cols[None, :] >> np.arange(r)[:, None]) & 1).astype(np.uint8)


@dataclass(frozen=True)
class SecDedCode:
    spec: CodeSpec
    parity: ParityStructure

    @property
    def k(self) -> int:
        return self.spec.k

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def r(self) -> int:
        return self.spec.r


class OutcomeKind(enum.IntEnum):
    NO_ERROR = 0
    CORRECTED_SINGLE = 1
    DETECTED_DOUBLE = 2
    DETECTED_UNCORRECTABLE = 3


@dataclass(frozen=True)
class DecodeOutcome:
    kind: OutcomeKind
    position: int | None = None

    def __str__(self) -> str:
        if self.kind is OutcomeKind.CORRECTED_SINGLE:
            return f"CorrectedSingle({self.position})"
        return {
            OutcomeKind.NO_ERROR: "NoError",
            OutcomeKind.DETECTED_DOUBLE: "DetectedDouble",
            OutcomeKind.DETECTED_UNCORRECTABLE: "DetectedUncorrectable",
        }[self.kind]


@lru_cache(maxsize=None)
def build_code(data_bits: int) -> SecDedCode:
    if data_bits not in SUPPORTED_DATA_BITS:
        raise ConfigurationError(
            f"unsupported SEC-DED data width {data_bits}; expected one of {SUPPORTED_DATA_BITS}"
        )
    m = 1
    while 2**m - m - 1 < data_bits:
        m += 1
    checks = [1 << i for i in range(m)]
    data: list[int] = []
    p = 1
    while len(data) < data_bits:
        if p & (p - 1):
            data.append(p)
        p += 1
    last = max(data[-1], checks[-1])
    k = last + 1
    spec = CodeSpec(k=k, d=data_bits, t=1, r=m + 1)
    overall = 1 << m
    columns = tuple([pos | overall for pos in range(1, k)] + [overall])
    parity = ParityStructure(
        columns=columns,
        check_positions=tuple(checks + [k]),
        data_positions=tuple(data),
    )
    return SecDedCode(spec=spec, parity=parity)


@lru_cache(maxsize=None)
def _tables(code: SecDedCode) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(hamming rows (m, k), data index, check index of Hamming checks, position weights)."""
    H = code.parity.matrix(code.r)
    data_idx = np.array(code.parity.data_positions, dtype=np.intp) - 1
    hcheck_idx = np.array(code.parity.check_positions[:-1], dtype=np.intp) - 1
    weights = (1 << np.arange(code.r - 1)).astype(np.int64)
    return H[:-1], data_idx, hcheck_idx, weights


def _as_bits(x: np.ndarray, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint8)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ArgumentError(f"{what} must have {width} bits, got shape {np.shape(x)}")
    return x


def encode_batch(code: SecDedCode, data: np.ndarray) -> np.ndarray:
    """Encode ``(n, d)`` data bits into ``(n, k)`` codewords."""
    data = _as_bits(data, code.d, "data")
    hrows, data_idx, hcheck_idx, _ = _tables(code)
    words = np.zeros((data.shape[0], code.k), dtype=np.uint8)
    words[:, data_idx] = data
    # each Hamming check column is a unit vector, so the check bit equals the
    # partial syndrome of the data alone
    words[:, hcheck_idx] = (words @ hrows.T) & 1
    words[:, code.k - 1] = words.sum(axis=1, dtype=np.int64) & 1
    return words


def decode_batch(code: SecDedCode, words: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode ``(n, k)`` words.

    Returns ``(data (n, d), kinds (n,) OutcomeKind values, positions (n,))``;
    positions are 0 unless the kind is CORRECTED_SINGLE.
    """
    words = _as_bits(words, code.k, "word").copy()
    hrows, data_idx, _, weights = _tables(code)
    n = words.shape[0]
    syndrome = ((words @ hrows.T) & 1).astype(np.int64) @ weights
    odd = (words.sum(axis=1, dtype=np.int64) & 1).astype(bool)

    kinds = np.full(n, OutcomeKind.NO_ERROR, dtype=np.int8)
    positions = np.zeros(n, dtype=np.int64)

    # syndrome 0 with odd parity: the overall-parity bit itself flipped
    parity_bit = odd & (syndrome == 0)
    kinds[parity_bit] = OutcomeKind.CORRECTED_SINGLE
    positions[parity_bit] = code.k

    single = odd & (syndrome != 0)
    valid = single & (syndrome <= code.k - 1)
    kinds[valid] = OutcomeKind.CORRECTED_SINGLE
    positions[valid] = syndrome[valid]
    rows = np.nonzero(valid)[0]
    words[rows, syndrome[valid] - 1] ^= 1
    kinds[single & ~valid] = OutcomeKind.DETECTED_UNCORRECTABLE

    kinds[~odd & (syndrome != 0)] = OutcomeKind.DETECTED_DOUBLE
    return words[:, data_idx], kinds, positions


def encode(code: SecDedCode, data: np.ndarray) -> np.ndarray:
    data = np.asarray(data)
    if data.ndim != 1:
        raise ArgumentError("encode takes a single bit-vector; use encode_batch")
    return encode_batch(code, data)[0]


def decode(code: SecDedCode, word: np.ndarray) -> tuple[np.ndarray, DecodeOutcome]:
    word = np.asarray(word)
    if word.ndim != 1:
        raise ArgumentError("decode takes a single bit-vector; use decode_batch")
    data, kinds, positions = decode_batch(code, word)
    kind = OutcomeKind(int(kinds[0]))
    pos = int(positions[0]) if kind is OutcomeKind.CORRECTED_SINGLE else None
    return data[0], DecodeOutcome(kind, pos)


def syndrome(code: SecDedCode, words: np.ndarray) -> np.ndarray:
    """Full r-bit syndrome H·c for each word; all zero for valid codewords."""
    words = _as_bits(words, code.k, "word")
    return (words @ code.parity.matrix(code.r).T) & 1

"""In-place zero-space ECC over 8-byte weight blocks.

A block is 8 consecutive int8 weights in flattened row-major order. Physical bit
``8*b + j`` is bit j of byte b. When bytes 0-6 lie in [-64, 63], their bit 6
repeats the sign bit; those seven bits hold the (64,57,1) check bits, and the
other 57 bits are the data. Decoding routes the bits back to logical order,
runs the standard SEC-DED decoder, then copies each sign bit over bit 6.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import secded
from .errors import ArgumentError, ConstraintViolation
from .secded import DecodeOutcome, OutcomeKind

logger = logging.getLogger(__name__)

BLOCK = 8
SMALL_MIN, SMALL_MAX = -64, 63
CHECK_BIT = 6


@dataclass(frozen=True)
class SwizzleMap:
    """Physical bit index <-> logical code position for one 64-bit block."""

    check_phys: tuple[int, ...]
    data_phys: tuple[int, ...]
    check_logical: tuple[int, ...]
    data_logical: tuple[int, ...]

    def logical_order(self) -> np.ndarray:
        """``perm[p - 1]`` = physical bit index feeding logical position p."""
        perm = np.empty(len(self.check_phys) + len(self.data_phys), dtype=np.intp)
        perm[np.array(self.check_logical) - 1] = self.check_phys
        perm[np.array(self.data_logical) - 1] = self.data_phys
        return perm


@lru_cache(maxsize=None)
def swizzle_map() -> SwizzleMap:
    code = secded.build_code(57)
    check_phys = tuple(BLOCK * b + CHECK_BIT for b in range(BLOCK - 1))
    data_phys = tuple(i for i in range(BLOCK * 8) if i not in check_phys)
    return SwizzleMap(
        check_phys=check_phys,
        data_phys=data_phys,
        check_logical=code.parity.check_positions,
        data_logical=code.parity.data_positions,
    )


@dataclass(frozen=True)
class BlockDecodeResult:
    block: np.ndarray
    outcome: DecodeOutcome


def has_noninformative_bit(w: int | np.ndarray) -> bool | np.ndarray:
    """True where bit 6 equals the sign bit, i.e. w in [-64, 63]."""
    u = np.asarray(w).astype(np.int8).view(np.uint8)
    same = ((u >> 6) & 1) == ((u >> 7) & 1)
    return bool(same) if np.ndim(w) == 0 else same


def _as_blocks(blocks: np.ndarray) -> np.ndarray:
    blocks = np.asarray(blocks)
    if blocks.ndim == 1:
        blocks = blocks[None, :]
    if blocks.ndim != 2 or blocks.shape[1] != BLOCK:
        raise ArgumentError(f"blocks must be (n, {BLOCK}), got {np.shape(blocks)}")
    return blocks.astype(np.int8, copy=False)


def _to_bits(blocks: np.ndarray) -> np.ndarray:
    return np.unpackbits(blocks.view(np.uint8), axis=1, bitorder="little")


def _from_bits(bits: np.ndarray) -> np.ndarray:
    return np.packbits(bits, axis=1, bitorder="little").view(np.int8)


def first_violation(blocks: np.ndarray) -> int | None:
    """Flat index of the first large value at a non-eighth position, or None."""
    bad = ~has_noninformative_bit(blocks[:, : BLOCK - 1])
    if not bad.any():
        return None
    row, col = np.argwhere(bad)[0]
    return int(row) * BLOCK + int(col)


def encode_blocks(blocks: np.ndarray) -> np.ndarray:
    blocks = _as_blocks(blocks)
    bad = first_violation(blocks)
    if bad is not None:
        raise ConstraintViolation(bad, value=int(blocks.reshape(-1)[bad]))
    smap = swizzle_map()
    code = secded.build_code(57)
    bits = _to_bits(blocks)
    words = secded.encode_batch(code, bits[:, smap.data_phys])
    bits[:, smap.check_phys] = words[:, np.array(smap.check_logical) - 1]
    return _from_bits(bits)


def decode_blocks(blocks: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode encoded blocks; returns (restored blocks, outcome kinds, positions)."""
    blocks = _as_blocks(blocks)
    smap = swizzle_map()
    code = secded.build_code(57)
    bits = _to_bits(blocks)
    data, kinds, positions = secded.decode_batch(code, bits[:, smap.logical_order()])
    bits[:, smap.data_phys] = data
    # sign restore
    for b in range(BLOCK - 1):
        bits[:, BLOCK * b + CHECK_BIT] = bits[:, BLOCK * b + 7]
    return _from_bits(bits), kinds, positions


def encode_block(block: np.ndarray) -> np.ndarray:
    return encode_blocks(np.asarray(block).reshape(1, BLOCK))[0]


def decode_block(block: np.ndarray) -> BlockDecodeResult:
    restored, kinds, positions = decode_blocks(np.asarray(block).reshape(1, BLOCK))
    kind = OutcomeKind(int(kinds[0]))
    pos = int(positions[0]) if kind is OutcomeKind.CORRECTED_SINGLE else None
    return BlockDecodeResult(block=restored[0], outcome=DecodeOutcome(kind, pos))


def pad_to_blocks(values: np.ndarray) -> tuple[np.ndarray, int]:
    """Flatten and zero-pad to a whole number of blocks; returns (blocks, pad)."""
    flat = np.asarray(values, dtype=np.int8).reshape(-1)
    pad = (-flat.size) % BLOCK
    if pad:
        flat = np.concatenate([flat, np.zeros(pad, dtype=np.int8)])
    return flat.reshape(-1, BLOCK), pad


def protect_tensor(t, layer: str | None = None) -> tuple[np.ndarray, int]:
    """In-place encode a QuantizedTensor; returns (payload bytes, pad count).

    The payload is exactly as long as the padded weight bytes.
    """
    blocks, pad = pad_to_blocks(t.values)
    bad = first_violation(blocks)
    if bad is not None:
        raise ConstraintViolation(bad, layer=layer, value=int(blocks.reshape(-1)[bad]))
    encoded = encode_blocks(blocks)
    logger.debug("in-place encoded %s: %d blocks, pad %d", layer or "tensor", len(blocks), pad)
    return encoded.reshape(-1).view(np.uint8).copy(), pad


def unprotect_tensor(payload: np.ndarray, pad: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of protect_tensor: (flat int8 values without pad, kinds, positions)."""
    blocks = np.asarray(payload, dtype=np.uint8).view(np.int8).reshape(-1, BLOCK)
    restored, kinds, positions = decode_blocks(blocks)
    flat = restored.reshape(-1)
    return flat[: flat.size - pad] if pad else flat, kinds, positions

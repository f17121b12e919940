"""K-bit affine gradient codec and its wire format.

Wire layout: [min f32 LE][max f32 LE][len u64 LE][K u8][payload], where the
payload packs element i into bits i*K .. i*K+K-1, little-endian bit order.
"""

import numpy as np

from models import BIT_MAX, BIT_MIN, HEADER, QuantizedTensor, payload_size


class CorruptionError(ValueError):
    """Raised when a payload or wire message is inconsistent with its header."""


class NonFiniteError(ValueError):
    """Raised when a vector to encode contains NaN or Inf."""


class QuantCodecService:
    """Deterministic round-to-nearest-even quantisation over [min, max]."""

    HEADER_BYTES = HEADER.size
    RAW_ELEMENT_BYTES = 4

    @staticmethod
    def check_bits(bits: int):
        if not BIT_MIN <= int(bits) <= BIT_MAX:
            raise ValueError(f"bits={bits} outside [{BIT_MIN}, {BIT_MAX}]")

    @staticmethod
    def pack_codes(codes: np.ndarray, bits: int) -> bytes:
        """Pack integer codes in [0, 2^bits - 1]; trailing pad bits are zero."""
        QuantCodecService.check_bits(bits)
        codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
        shifts = np.arange(bits, dtype=np.uint8)
        bit_matrix = (codes[:, None] >> shifts) & np.uint8(1)
        return np.packbits(bit_matrix.reshape(-1), bitorder="little").tobytes()

    @staticmethod
    def unpack_codes(payload: bytes, length: int, bits: int) -> np.ndarray:
        """Inverse of ``pack_codes``.

        Raises:
            CorruptionError: If the payload size or pad bits disagree with length/bits
        """
        QuantCodecService.check_bits(bits)
        if len(payload) != payload_size(length, bits):
            raise CorruptionError(
                f"payload has {len(payload)} bytes, expected {payload_size(length, bits)} "
                f"for {length} x {bits}-bit codes"
            )
        raw = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
        used = length * bits
        if raw[used:].any():
            raise CorruptionError("non-zero pad bits after the last code")
        weights = (np.uint16(1) << np.arange(bits, dtype=np.uint16)).astype(np.uint16)
        return (raw[:used].reshape(length, bits).astype(np.uint16) @ weights).astype(np.uint8)

    @staticmethod
    def quantize(vec: np.ndarray, bits: int) -> QuantizedTensor:
        """Encode ``vec`` with ``bits`` bits per element.

        Codes are round((v - min) / (max - min) * (2^K - 1)) with ties to even;
        a constant vector encodes as all-zero codes.

        Raises:
            NonFiniteError: If ``vec`` holds NaN or Inf
            ValueError: If ``vec`` is empty or ``bits`` is outside [2, 8]
        """
        QuantCodecService.check_bits(bits)
        vec = np.asarray(vec, dtype=np.float32).reshape(-1)
        if vec.size == 0:
            raise ValueError("cannot quantize an empty vector")
        if not np.all(np.isfinite(vec)):
            raise NonFiniteError("vector contains NaN or Inf")

        lo, hi = np.float32(vec.min()), np.float32(vec.max())
        levels = (1 << bits) - 1
        if hi > lo:
            span = np.float64(hi) - np.float64(lo)
            position = (vec.astype(np.float64) - np.float64(lo)) / span * levels
            codes = np.clip(np.rint(position), 0, levels).astype(np.uint8)
        else:
            codes = np.zeros(vec.size, dtype=np.uint8)
        return QuantizedTensor(
            bits=int(bits),
            min_val=float(lo),
            max_val=float(hi),
            length=int(vec.size),
            payload=QuantCodecService.pack_codes(codes, bits),
        )

    @staticmethod
    def dequantize(qt: QuantizedTensor) -> np.ndarray:
        """Decode to float32: min + code * (max - min) / (2^K - 1)."""
        codes = QuantCodecService.unpack_codes(qt.payload, qt.length, qt.bits)
        lo = np.float64(np.float32(qt.min_val))
        hi = np.float64(np.float32(qt.max_val))
        if hi == lo:
            return np.full(qt.length, np.float32(lo), dtype=np.float32)
        values = lo + (codes.astype(np.float64) * (hi - lo)) / qt.levels
        return values.astype(np.float32)

    @staticmethod
    def encoded_size_bytes(length: int, bits: int) -> int:
        """Header (17 bytes) plus ceil(length * bits / 8) payload bytes."""
        return QuantCodecService.HEADER_BYTES + payload_size(length, bits)

    @staticmethod
    def raw_size_bytes(length: int) -> int:
        return QuantCodecService.RAW_ELEMENT_BYTES * length

    @staticmethod
    def to_wire(qt: QuantizedTensor) -> bytes:
        return qt.to_bytes()

    @staticmethod
    def from_wire(data: bytes) -> QuantizedTensor:
        """Parse a wire message, checking the payload against the header.

        Raises:
            CorruptionError: On truncated data, bad header fields or pad bits
        """
        if len(data) < HEADER.size:
            raise CorruptionError(f"message shorter than the {HEADER.size}-byte header")
        lo, hi, length, bits = HEADER.unpack_from(data, 0)
        payload = bytes(data[HEADER.size :])
        if not BIT_MIN <= bits <= BIT_MAX:
            raise CorruptionError(f"header bits={bits} outside [{BIT_MIN}, {BIT_MAX}]")
        if length < 1 or len(payload) != payload_size(length, bits):
            raise CorruptionError(
                f"payload has {len(payload)} bytes, header says {length} x {bits}-bit codes"
            )
        if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
            raise CorruptionError(f"invalid range header [{lo}, {hi}]")
        QuantCodecService.unpack_codes(payload, length, bits)
        return QuantizedTensor(bits=bits, min_val=lo, max_val=hi, length=length, payload=payload)

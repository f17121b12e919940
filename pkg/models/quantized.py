import struct
from dataclasses import dataclass

import numpy as np

from .base import BaseModel, ConfigurationError

# min (f32), max (f32), len (u64), K (u8); little-endian, no padding
HEADER = struct.Struct("<ffQB")
BIT_MIN = 2
BIT_MAX = 8


def payload_size(length: int, bits: int) -> int:
    return (length * bits + 7) // 8


@dataclass(frozen=True)
class QuantizedTensor(BaseModel):
    """K-bit affine encoding of a vector with its range header.

    Immutable once built; ``payload`` holds ``len`` codes of ``bits`` bits,
    element i in bits i*K .. i*K+K-1 in little-endian bit order.
    """

    bits: int
    min_val: float
    max_val: float
    length: int
    payload: bytes

    def validate(self):
        if not BIT_MIN <= self.bits <= BIT_MAX:
            raise ConfigurationError(f"bits={self.bits} outside [{BIT_MIN}, {BIT_MAX}]")
        if not self.min_val <= self.max_val:
            raise ConfigurationError(f"min {self.min_val} > max {self.max_val}")
        if self.length < 1:
            raise ConfigurationError("length must be >= 1")
        return True

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def expected_payload_size(self) -> int:
        return payload_size(self.length, self.bits)

    def nbytes(self) -> int:
        return HEADER.size + len(self.payload)

    def to_bytes(self) -> bytes:
        header = HEADER.pack(
            np.float32(self.min_val), np.float32(self.max_val), self.length, self.bits
        )
        return header + self.payload

    @classmethod
    def header_from_bytes(cls, data: bytes) -> tuple[float, float, int, int]:
        return HEADER.unpack_from(data, 0)

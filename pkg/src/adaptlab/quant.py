"""Symmetric block quantization to 4 (``q4s``) and 6 (``q6s``) bits.

Each run of 32 consecutive elements (row-major flattening) gets one binary32
scale ``max|x| / qmax`` and signed integer codes in ``[-qmax, qmax]``, with
qmax = 7 for q4s and 31 for q6s. Rounding is half-away-from-zero. These are
simplified stand-ins for llama.cpp's q4_k / q6_k super-block formats.

Packed code layout (codes stored with an offset, so always unsigned):

* q4s: ``code + 7`` in a nibble, two per byte, low nibble first
  (16 bytes per block).
* q6s: ``code + 31`` in 6 bits, a little-endian bitstream, so 4 codes
  fill 3 bytes (24 bytes per block).

The trailing partial block is padded with code 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BLOCK_SIZE = 32
QMAX = {"q4s": 7, "q6s": 31}
CODE_BYTES = {"q4s": 16, "q6s": 24}  # packed bytes per block, scale excluded


@dataclass(frozen=True, eq=False)
class QuantTensor:
    scheme: str
    shape: tuple[int, ...]
    scales: np.ndarray  # float32 [n_blocks]
    codes: np.ndarray  # int8 [n_blocks * BLOCK_SIZE]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def n_blocks(self) -> int:
        return len(self.scales)

    @property
    def nbytes(self) -> int:
        return self.n_blocks * (4 + CODE_BYTES[self.scheme])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return (
            self.scheme == other.scheme
            and self.shape == other.shape
            and np.array_equal(self.scales.view(np.uint32), other.scales.view(np.uint32))
            and np.array_equal(self.codes, other.codes)
        )

    def to_bytes(self) -> bytes:
        """Per-block records: little-endian f32 scale followed by packed codes."""
        packed = pack_codes(self.codes, self.scheme).reshape(self.n_blocks, CODE_BYTES[self.scheme])
        scales = self.scales.astype("<f4").view(np.uint8).reshape(self.n_blocks, 4)
        return np.concatenate([scales, packed], axis=1).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, scheme: str, shape: tuple[int, ...]) -> "QuantTensor":
        size = int(np.prod(shape, dtype=np.int64))
        n_blocks = -(-size // BLOCK_SIZE)
        rec = 4 + CODE_BYTES[scheme]
        if len(data) != n_blocks * rec:
            raise ValueError(f"expected {n_blocks * rec} bytes for {scheme}{list(shape)}, got {len(data)}")
        raw = np.frombuffer(data, dtype=np.uint8).reshape(n_blocks, rec)
        scales = raw[:, :4].copy().view("<f4").reshape(-1).astype(np.float32)
        codes = unpack_codes(raw[:, 4:].reshape(-1), scheme, n_blocks * BLOCK_SIZE)
        return cls(scheme, tuple(shape), scales, codes)


def packed_nbytes(scheme: str, shape: tuple[int, ...]) -> int:
    size = int(np.prod(shape, dtype=np.int64))
    return -(-size // BLOCK_SIZE) * (4 + CODE_BYTES[scheme])


def pack_codes(codes: np.ndarray, scheme: str) -> np.ndarray:
    q = QMAX[scheme]
    u = (codes.astype(np.int16) + q).astype(np.uint8)
    if scheme == "q4s":
        u = u.reshape(-1, 2)
        return (u[:, 0] | (u[:, 1] << 4)).astype(np.uint8)
    # 4 codes -> 24 bits -> 3 bytes, code i at bit offset 6*i
    u = u.reshape(-1, 4).astype(np.uint32)
    word = u[:, 0] | (u[:, 1] << 6) | (u[:, 2] << 12) | (u[:, 3] << 18)
    out = np.stack([word & 0xFF, (word >> 8) & 0xFF, (word >> 16) & 0xFF], axis=1)
    return out.astype(np.uint8).reshape(-1)


def unpack_codes(packed: np.ndarray, scheme: str, n: int) -> np.ndarray:
    q = QMAX[scheme]
    packed = np.asarray(packed, dtype=np.uint8)
    if scheme == "q4s":
        u = np.stack([packed & 0x0F, packed >> 4], axis=1).reshape(-1)
    else:
        b = packed.reshape(-1, 3).astype(np.uint32)
        word = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        u = np.stack([(word >> s) & 0x3F for s in (0, 6, 12, 18)], axis=1).reshape(-1)
    return (u[:n].astype(np.int16) - q).astype(np.int8)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(tensor: np.ndarray, scheme: str) -> QuantTensor:
    if scheme not in QMAX:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {sorted(QMAX)}")
    x = np.asarray(tensor)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize NaN or Inf entries")
    qmax = QMAX[scheme]
    flat = x.astype(np.float64).reshape(-1)
    n_blocks = -(-flat.size // BLOCK_SIZE)
    blocks = np.zeros(n_blocks * BLOCK_SIZE)
    blocks[: flat.size] = flat
    blocks = blocks.reshape(n_blocks, BLOCK_SIZE)
    scales = (np.abs(blocks).max(axis=1) / qmax).astype(np.float32)
    s64 = scales.astype(np.float64)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        codes = np.where(s64 > 0, _round_half_away(blocks / np.where(s64 > 0, s64, 1.0)), 0.0)
    codes = np.clip(codes, -qmax, qmax).astype(np.int8).reshape(-1)
    return QuantTensor(scheme, tuple(int(d) for d in x.shape), scales, codes)


def dequantize(q: QuantTensor) -> np.ndarray:
    """Float64 reconstruction ``code * scale``; exact for every element."""
    vals = q.codes.reshape(q.n_blocks, BLOCK_SIZE).astype(np.float64) * q.scales.astype(np.float64)[:, None]
    return vals.reshape(-1)[: q.size].reshape(q.shape)


@dataclass(frozen=True)
class QuantError:
    max_abs: float
    rmse: float
    per_block_max: np.ndarray


def quant_error(tensor: np.ndarray, scheme: str) -> QuantError:
    x = np.asarray(tensor, dtype=np.float64)
    err = np.abs(dequantize(quantize(x, scheme)) - x).reshape(-1)
    if err.size == 0:
        return QuantError(0.0, 0.0, np.zeros(0))
    padded = np.zeros(-(-err.size // BLOCK_SIZE) * BLOCK_SIZE)
    padded[: err.size] = err
    return QuantError(
        float(err.max()),
        float(np.sqrt(np.mean(err**2))),
        padded.reshape(-1, BLOCK_SIZE).max(axis=1),
    )

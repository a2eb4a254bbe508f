"""TLMF: a single-file packed tensor container, plus layered loading.

Layout (all integers little-endian)::

    magic        4 bytes  b"TLMF"
    version      u32      1
    n_kv         u32
    n_tensors    u32
    kv entries   key:str  type:u8  value        (0=str, 1=u64, 2=f32)
    tensor index name:str dtype:u8 ndim:u32 dims:u64*ndim offset:u64 length:u64
                                                (dtype 0=f32, 1=q4s, 2=q6s)
    zero padding up to a 32-byte boundary
    payloads     each at a 32-byte aligned absolute offset, zero padded between
    crc32        u32      CRC-32 of every preceding byte

``str`` is a u32 byte length followed by UTF-8. f32 payloads are raw
little-endian binary32; q4s/q6s payloads are the per-block records of
:meth:`QuantTensor.to_bytes`, so each block's scale sits next to its codes.

The shape is GGUF's (KV metadata, aligned tensor index, quantized payloads)
at a fraction of the size. ``load_layered`` keeps the first
``n_offload_layers`` transformer layers (and all global tensors) resident and
reads the remaining layers from disk on every access, mimicking llama.cpp's
``n_gpu_layers`` split between device memory and a host-side buffer.
"""

from __future__ import annotations

import io
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import model as tlm
from .lora import LoraAdapter, LoraEntry
from .quant import QuantTensor, dequantize, packed_nbytes

MAGIC = b"TLMF"
VERSION = 1
ALIGN = 32
KINDS = ("base", "merged", "adapter")

_DTYPES = {"f32": 0, "q4s": 1, "q6s": 2}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}
_KV_STR, _KV_U64, _KV_F32 = 0, 1, 2

_CONFIG_KEYS = ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq", "seed")


class FormatError(ValueError):
    """Malformed TLMF file; ``code`` names the failure class."""

    CODES = ("bad-magic", "bad-version", "misaligned", "length-mismatch", "bad-checksum", "bad-header")

    def __init__(self, code: str, message: str) -> None:
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class IndexEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    offset: int
    length: int


def _nbytes(dtype: str, shape: tuple[int, ...]) -> int:
    if dtype == "f32":
        return 4 * int(np.prod(shape, dtype=np.int64))
    return packed_nbytes(dtype, shape)


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _encode_kv(key: str, value) -> bytes:
    if isinstance(value, bool):
        raise TypeError(f"metadata {key!r}: bool is not a supported type")
    if isinstance(value, str):
        return _str(key) + bytes([_KV_STR]) + _str(value)
    if isinstance(value, (int, np.integer)):
        if not 0 <= int(value) < 2**64:
            raise ValueError(f"metadata {key!r}: integers must fit in u64")
        return _str(key) + bytes([_KV_U64]) + struct.pack("<Q", int(value))
    if isinstance(value, (float, np.floating)):
        return _str(key) + bytes([_KV_F32]) + struct.pack("<f", float(value))
    raise TypeError(f"metadata {key!r}: unsupported type {type(value).__name__}")


def _payload(t) -> tuple[str, bytes]:
    if isinstance(t, QuantTensor):
        return t.scheme, t.to_bytes()
    arr = np.asarray(t)
    if arr.dtype != np.float32:
        raise TypeError(f"f32 tensors must be float32, got {arr.dtype}")
    return "f32", arr.astype("<f4").tobytes()


def pack_tensors(tensors: Mapping[str, np.ndarray | QuantTensor], metadata: Mapping, path: str | Path | None = None) -> tuple[bytes, int]:
    """Serialize tensors + metadata; writes ``path`` if given. Returns (bytes, crc)."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names")
    payloads = [(_payload(tensors[n]), tuple(int(d) for d in tensors[n].shape)) for n in names]

    kv = b"".join(_encode_kv(k, v) for k, v in metadata.items())
    index_size = sum(
        4 + len(n.encode("utf-8")) + 1 + 4 + 8 * len(shape) + 16 for n, (_, shape) in zip(names, payloads)
    )
    header_len = 16 + len(kv) + index_size
    offset = _align(header_len)
    entries = []
    for n, ((dtype, blob), shape) in zip(names, payloads):
        entries.append(IndexEntry(n, dtype, shape, offset, len(blob)))
        offset = _align(offset + len(blob))

    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<III", VERSION, len(metadata), len(names)))
    out.write(kv)
    for e in entries:
        out.write(_str(e.name) + bytes([_DTYPES[e.dtype]]) + struct.pack("<I", len(e.shape)))
        out.write(struct.pack(f"<{len(e.shape)}Q", *e.shape))
        out.write(struct.pack("<QQ", e.offset, e.length))
    for e, ((_, blob), _) in zip(entries, payloads):
        out.write(b"\0" * (e.offset - out.tell()))
        out.write(blob)
    if not entries:
        out.write(b"\0" * (_align(header_len) - out.tell()))
    data = out.getvalue()
    crc = zlib.crc32(data) & 0xFFFFFFFF
    data += struct.pack("<I", crc)
    if path is not None:
        try:
            Path(path).write_bytes(data)
        except OSError as e:
            raise OSError(f"cannot write {path}: {e.strerror}") from e
    return data, crc


class _Reader:
    def __init__(self, data: bytes, limit: int) -> None:
        self.data, self.pos, self.limit = data, 0, limit

    def take(self, n: int) -> bytes:
        if self.pos + n > self.limit:
            raise FormatError("length-mismatch", "file ends inside the header")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def str(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("bad-header", "string is not valid UTF-8") from None


@dataclass
class Header:
    version: int
    metadata: dict
    index: list[IndexEntry]
    header_len: int


def parse_header(data: bytes, file_size: int | None = None) -> Header:
    """Parse and structurally validate a TLMF image (checksum excluded)."""
    size = len(data) if file_size is None else file_size
    if size < 4 or data[:4] != MAGIC:
        raise FormatError("bad-magic", "not a TLMF file")
    r = _Reader(data, max(size - 4, 0))
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise FormatError("bad-version", f"unsupported format version {version}")
    n_kv, n_tensors = r.u32(), r.u32()
    metadata: dict = {}
    for _ in range(n_kv):
        key = r.str()
        kind = r.u8()
        if kind == _KV_STR:
            metadata[key] = r.str()
        elif kind == _KV_U64:
            metadata[key] = r.u64()
        elif kind == _KV_F32:
            metadata[key] = struct.unpack("<f", r.take(4))[0]
        else:
            raise FormatError("bad-header", f"unknown metadata type {kind} for key {key!r}")
    index = []
    for _ in range(n_tensors):
        name = r.str()
        code = r.u8()
        if code not in _DTYPE_NAMES:
            raise FormatError("bad-header", f"tensor {name!r}: unknown dtype {code}")
        ndim = r.u32()
        shape = tuple(r.u64() for _ in range(ndim))
        index.append(IndexEntry(name, _DTYPE_NAMES[code], shape, r.u64(), r.u64()))
    header_len = r.pos

    if len({e.name for e in index}) != len(index):
        raise FormatError("bad-header", "duplicate tensor names")
    end = _align(header_len)
    for e in index:
        if e.offset % ALIGN:
            raise FormatError("misaligned", f"tensor {e.name!r} at offset {e.offset}")
        if e.length != _nbytes(e.dtype, e.shape):
            raise FormatError("length-mismatch", f"tensor {e.name!r}: {e.length} bytes for {e.dtype}{list(e.shape)}")
        if e.offset < end:
            raise FormatError("length-mismatch", f"tensor {e.name!r} overlaps preceding data")
        end = _align(e.offset + e.length) if e is not index[-1] else e.offset + e.length
    if size != end + 4:
        raise FormatError("length-mismatch", f"file is {size} bytes, layout needs {end + 4}")
    return Header(version, metadata, index, header_len)


def _decode(e: IndexEntry, blob: bytes):
    if e.dtype == "f32":
        return np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(e.shape)
    return QuantTensor.from_bytes(blob, e.dtype, e.shape)


def read_tensors(path: str | Path) -> tuple[dict, dict]:
    """Fully validate a file and return ``(tensors, metadata)``."""
    data = Path(path).read_bytes()
    header = parse_header(data)
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError("bad-checksum", "CRC-32 does not match file contents")
    tensors = {e.name: _decode(e, data[e.offset : e.offset + e.length]) for e in header.index}
    return tensors, header.metadata


def config_metadata(cfg: tlm.ModelConfig) -> dict:
    return {f"config.{k}": int(v) for k, v in cfg.to_dict().items()}


def config_from_metadata(meta: Mapping) -> tlm.ModelConfig:
    try:
        return tlm.ModelConfig(**{k: int(meta[f"config.{k}"]) for k in _CONFIG_KEYS})
    except KeyError as e:
        raise FormatError("bad-header", f"missing metadata key {e.args[0]!r}") from None


def pack(obj, path: str | Path, metadata: Mapping | None = None, kind: str | None = None) -> int:
    """Write a TinyModel or LoraAdapter; returns the CRC-32 checksum.

    Adapter tensors are stored as float32.
    """
    meta: dict = {}
    if isinstance(obj, tlm.TinyModel):
        meta["kind"] = kind or "base"
        meta.update(config_metadata(obj.config))
        order = list(tlm.tensor_shapes(obj.config))
        tensors = {n: obj.tensors[n] for n in order}
    elif isinstance(obj, LoraAdapter):
        meta["kind"] = "adapter"
        meta["lora.rank"] = obj.rank
        meta["lora.alpha"] = float(obj.alpha)
        meta["lora.targets"] = ",".join(obj.targets)
        tensors = {n: p.astype(np.float32) for n, p in obj.params().items()}
    else:
        meta["kind"] = kind or "base"
        tensors = dict(obj)
    meta.update(metadata or {})
    if meta["kind"] not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    _, crc = pack_tensors(tensors, meta, path)
    return crc


def unpack(path: str | Path):
    """Validate and load a file; returns ``(TinyModel | LoraAdapter, metadata)``."""
    tensors, meta = read_tensors(path)
    kind = meta.get("kind")
    if kind == "adapter":
        try:
            rank, alpha = int(meta["lora.rank"]), float(meta["lora.alpha"])
            targets = [t for t in str(meta["lora.targets"]).split(",") if t]
            entries = {
                t: LoraEntry(tensors[t + ".lora_A"].astype(np.float64), tensors[t + ".lora_B"].astype(np.float64))
                for t in targets
            }
        except KeyError as e:
            raise FormatError("bad-header", f"adapter file missing {e.args[0]!r}") from None
        return LoraAdapter(rank, alpha, entries), meta
    if kind in ("base", "merged"):
        try:
            return tlm.TinyModel(config_from_metadata(meta), tensors), meta
        except ValueError as e:
            if isinstance(e, FormatError):
                raise
            raise FormatError("bad-header", str(e)) from None
    raise FormatError("bad-header", f"unknown kind {kind!r}")


def inspect(path: str | Path) -> str:
    """Human-readable dump of metadata and tensor index."""
    data = Path(path).read_bytes()
    header = parse_header(data)
    (crc,) = struct.unpack("<I", data[-4:])
    ok = zlib.crc32(data[:-4]) & 0xFFFFFFFF == crc
    lines = [f"TLMF v{header.version}  {len(data)} bytes  crc32={crc:08x} ({'ok' if ok else 'BAD'})", "metadata:"]
    for k, v in header.metadata.items():
        lines.append(f"  {k} = {v!r}")
    lines.append(f"tensors: {len(header.index)}")
    for e in header.index:
        lines.append(f"  {e.name:<24} {e.dtype:<4} {'x'.join(map(str, e.shape)) or 'scalar':<12} @{e.offset:<8} {e.length} B")
    return "\n".join(lines)


@dataclass
class LayeredHandle:
    """Weight source that keeps only part of a packed model in memory.

    Global tensors and layers ``< n_offload_layers`` are decoded once at open
    time. Other layers are re-read from the file on each access and dropped
    afterwards; ``fetches`` counts those reads per tensor.
    """

    path: Path
    n_offload_layers: int
    config: tlm.ModelConfig
    metadata: dict
    index: dict[str, IndexEntry]
    resident: dict[str, np.ndarray] = field(default_factory=dict)
    fetches: dict[str, int] = field(default_factory=dict)
    resident_bytes: int = 0
    peak_resident_bytes: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def fetch_count(self) -> int:
        return sum(self.fetches.values())

    def _read(self, e: IndexEntry) -> np.ndarray:
        with open(self.path, "rb") as f:
            f.seek(e.offset)
            blob = f.read(e.length)
        if len(blob) != e.length:
            raise FormatError("length-mismatch", f"short read for {e.name!r}")
        t = _decode(e, blob)
        return dequantize(t) if isinstance(t, QuantTensor) else t.astype(np.float64)

    def weight(self, name: str) -> np.ndarray:
        w = self.resident.get(name)
        if w is not None:
            return w
        e = self.index[name]
        w = self._read(e)
        with self._lock:
            self.fetches[name] = self.fetches.get(name, 0) + 1
            self.peak_resident_bytes = max(self.peak_resident_bytes, self.resident_bytes + e.length)
        return w


def load_layered(path: str | Path, n_offload_layers: int) -> LayeredHandle:
    path = Path(path)
    data = path.read_bytes()
    header = parse_header(data)
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError("bad-checksum", "CRC-32 does not match file contents")
    if header.metadata.get("kind") not in ("base", "merged"):
        raise FormatError("bad-header", "layered loading needs a base or merged model file")
    cfg = config_from_metadata(header.metadata)
    if not 0 <= n_offload_layers <= cfg.n_layers:
        raise ValueError(f"n_offload_layers must be in [0, {cfg.n_layers}]")
    handle = LayeredHandle(path, n_offload_layers, cfg, header.metadata, {e.name: e for e in header.index})
    for e in header.index:
        layer = tlm.layer_of(e.name)
        if layer is None or layer < n_offload_layers:
            t = _decode(e, data[e.offset : e.offset + e.length])
            handle.resident[e.name] = dequantize(t) if isinstance(t, QuantTensor) else t.astype(np.float64)
            handle.resident_bytes += e.length
    handle.peak_resident_bytes = handle.resident_bytes
    del data
    return handle

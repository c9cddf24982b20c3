"""Model bitstream: quantize -> entropy code -> self-describing container.

Container layout (little-endian, every size field 64-bit)::

    b"MSNV" u16 version u16 flags
    u64 header_len, header (key-sorted JSON: config echo, video dims, bit depth)
    u64 tensor_count
    per tensor:
        u64 name_len, name, u64 ndim, u64 dims[ndim],
        u8 bit_depth, f64 scale, i64 zero_point,
        u8 table_mode, table, u64 payload_len, payload
    u32 CRC-32 of everything before it

Table modes: 0 dense (i64 first symbol, u64 slots, u16 counts),
1 sparse (u64 entries, (i16 symbol, u16 count) pairs), 2 raw (no table;
payload is the integers as i8 or i16).
"""

from __future__ import annotations

import json
import math
import struct
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from msnerv.codec.quant import QuantizedTensor, quantize_tensor, tensor_scale
from msnerv.codec.rangecoder import TOTAL, decode_symbols, encode_symbols, quantize_counts
from msnerv.errors import BitstreamError

MAGIC = b"MSNV"
VERSION = 1
DENSE, SPARSE, RAW = 0, 1, 2


def quantize(model, bit_depth: int = 8) -> list[QuantizedTensor]:
    """Per-tensor symmetric quantization of the decodable parameters.

    Uses the scales frozen by QAT when they match ``bit_depth``.
    """
    qat = getattr(model, "qat_state", None)
    frozen = qat["scales"] if qat and qat.get("bits") == bit_depth else None
    if frozen is None:
        warnings.warn(f"model was not QAT-finetuned at {bit_depth} bits; computing fresh scales", stacklevel=2)
    out = []
    for name, p in model.decodable_parameters():
        scale = frozen[name] if frozen is not None else tensor_scale(p, bit_depth)
        q, scale = quantize_tensor(p.detach(), bit_depth, scale)
        out.append(QuantizedTensor(name, q.to(torch.int64).numpy(), scale, bit_depth))
    return out


def histogram_entropy(values: np.ndarray) -> float:
    """Empirical Shannon entropy in bits per symbol."""
    values = np.asarray(values).ravel()
    if values.size == 0:
        return 0.0
    _, counts = np.unique(values, return_counts=True)
    p = counts / values.size
    return float(-(p * np.log2(p)).sum())


class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def pack(self, fmt: str, *vals):
        self.buf += struct.pack("<" + fmt, *vals)

    def bytes(self, b: bytes):
        self.pack("Q", len(b))
        self.buf += b


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise BitstreamError(f"truncated stream: need {n} bytes, {self.end - self.pos} left", self.pos)
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def bytes(self) -> bytes:
        (n,) = self.unpack("Q")
        return self.take(n)


@dataclass
class TensorRecord:
    name: str
    shape: tuple[int, ...]
    bit_depth: int
    scale: float
    zero_point: int
    mode: int
    table_bytes: int
    payload_bytes: int
    entropy: float

    @property
    def numel(self) -> int:
        return int(math.prod(self.shape))


@dataclass
class ModelBitstream:
    data: bytes
    header: dict
    records: list[TensorRecord] = field(default_factory=list)
    header_bytes: int = 0

    @property
    def total_bytes(self) -> int:
        return len(self.data)

    @property
    def payload_bytes(self) -> int:
        return sum(r.payload_bytes for r in self.records)

    @property
    def overhead_bytes(self) -> int:
        return self.total_bytes - self.payload_bytes

    def summary(self) -> dict:
        return {
            "total_bytes": self.total_bytes,
            "payload_bytes": self.payload_bytes,
            "overhead_bytes": self.overhead_bytes,
            "tensors": [
                {"name": r.name, "shape": list(r.shape), "bits": r.bit_depth, "mode": r.mode,
                 "table_bytes": r.table_bytes, "payload_bytes": r.payload_bytes,
                 "bits_per_param": 8 * (r.payload_bytes + r.table_bytes) / max(1, r.numel),
                 "entropy": r.entropy}
                for r in self.records
            ],
        }


def _raw_dtype(bits: int):
    return np.dtype("<i1") if bits <= 8 else np.dtype("<i2")


def _encode_tensor(t: QuantizedTensor) -> tuple[int, bytes, bytes]:
    flat = t.integers.ravel()
    raw = flat.astype(_raw_dtype(t.bit_depth)).tobytes()
    if flat.size == 0:
        return RAW, b"", raw
    symbols, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    freqs = quantize_counts(counts)
    payload = encode_symbols(inverse.tolist(), freqs)
    # dense table over [min, max]
    lo, hi = int(symbols[0]), int(symbols[-1])
    dense = np.zeros(hi - lo + 1, dtype="<u2")
    dense[symbols - lo] = freqs
    w = _Writer()
    w.pack("qQ", lo, len(dense))
    dense_table = bytes(w.buf) + dense.tobytes()
    w = _Writer()
    w.pack("Q", len(symbols))
    pairs = np.empty(len(symbols), dtype=[("s", "<i2"), ("f", "<u2")])
    pairs["s"] = symbols
    pairs["f"] = freqs
    sparse_table = bytes(w.buf) + pairs.tobytes()
    mode, table = (DENSE, dense_table) if len(dense_table) <= len(sparse_table) else (SPARSE, sparse_table)
    if len(raw) <= len(table) + len(payload):
        return RAW, b"", raw
    return mode, table, payload


def entropy_encode(tensors: list[QuantizedTensor], header: dict | None = None) -> ModelBitstream:
    """Pack quantized tensors and a header into a checksummed container."""
    w = _Writer()
    w.buf += MAGIC
    w.pack("HH", VERSION, 0)
    hdr = json.dumps(header or {}, sort_keys=True, separators=(",", ":")).encode()
    w.bytes(hdr)
    header_bytes = len(w.buf)
    w.pack("Q", len(tensors))
    records = []
    for t in tensors:
        mode, table, payload = _encode_tensor(t)
        w.bytes(t.name.encode())
        w.pack("Q", len(t.shape))
        for d in t.shape:
            w.pack("Q", d)
        w.pack("Bdq", t.bit_depth, t.scale, t.zero_point)
        w.pack("B", mode)
        w.buf += table
        w.bytes(payload)
        records.append(TensorRecord(t.name, t.shape, t.bit_depth, t.scale, t.zero_point, mode, len(table),
                                    len(payload), histogram_entropy(t.integers)))
    w.pack("I", zlib.crc32(bytes(w.buf)))
    return ModelBitstream(bytes(w.buf), header or {}, records, header_bytes)


def entropy_decode(data: bytes) -> tuple[dict, list[QuantizedTensor]]:
    """Inverse of :func:`entropy_encode`; raises ``BitstreamError`` on any damage."""
    data = bytes(data)
    if len(data) < 4 + 4 + 8 + 8 + 4:
        raise BitstreamError("stream too short", len(data))
    if data[:4] != MAGIC:
        raise BitstreamError("bad magic; not an .msnv stream", 0)
    body_end = len(data) - 4
    (crc,) = struct.unpack_from("<I", data, body_end)
    if zlib.crc32(data[:body_end]) != crc:
        raise BitstreamError("checksum mismatch (stream truncated or corrupt)", body_end)
    r = _Reader(data, body_end)
    r.take(4)
    version, _flags = r.unpack("HH")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}", 4)
    header = json.loads(r.bytes())
    (count,) = r.unpack("Q")
    tensors = []
    for _ in range(count):
        start = r.pos
        name = r.bytes().decode()
        (ndim,) = r.unpack("Q")
        shape = tuple(r.unpack("Q")[0] for _ in range(ndim))
        bits, scale, zero_point = r.unpack("Bdq")
        (mode,) = r.unpack("B")
        n = int(math.prod(shape))
        if mode == DENSE:
            lo, slots = r.unpack("qQ")
            counts = np.frombuffer(r.take(2 * slots), dtype="<u2")
            nz = np.nonzero(counts)[0]
            symbols = nz + lo
            freqs = counts[nz].astype(np.int64).tolist()
        elif mode == SPARSE:
            (k,) = r.unpack("Q")
            pairs = np.frombuffer(r.take(4 * k), dtype=[("s", "<i2"), ("f", "<u2")])
            symbols = pairs["s"].astype(np.int64)
            freqs = pairs["f"].astype(np.int64).tolist()
        elif mode == RAW:
            symbols = freqs = None
        else:
            raise BitstreamError(f"tensor {name!r}: unknown table mode {mode}", start)
        payload = r.bytes()
        if mode == RAW:
            dt = _raw_dtype(bits)
            if len(payload) != n * dt.itemsize:
                raise BitstreamError(f"tensor {name!r}: raw payload has wrong size", r.pos)
            ints = np.frombuffer(payload, dtype=dt).astype(np.int64)
        else:
            if sum(freqs) != TOTAL:
                raise BitstreamError(f"tensor {name!r}: frequency table does not sum to {TOTAL}", start)
            idx, overrun = decode_symbols(payload, freqs, n)
            if overrun:
                raise BitstreamError(f"tensor {name!r}: payload exhausted while decoding", r.pos)
            ints = np.asarray(symbols)[np.asarray(idx, dtype=np.int64)] if n else np.zeros(0, np.int64)
        tensors.append(QuantizedTensor(name, ints.reshape(shape), scale, bits, zero_point))
    if r.pos != body_end:
        raise BitstreamError("trailing bytes after last tensor", r.pos)
    return header, tensors


def bpp(stream: ModelBitstream | bytes, dims: tuple[int, int, int]) -> float:
    """Bits per pixel of the whole container for a ``(T, H, W)`` video."""
    n = stream.total_bytes if isinstance(stream, ModelBitstream) else len(stream)
    t, h, w = dims
    return 8.0 * n / (t * h * w)


def param_entropy(source, bound: float | None = None, bits: int = 8) -> tuple[float, float]:
    """Standard deviation and histogram entropy (bits/parameter) of model weights.

    ``source`` is a model (float weights are binned on a symmetric ``bits``
    lattice over ``[-bound, bound]``, ``bound`` defaulting to the largest
    magnitude), a list of ``QuantizedTensor`` or a plain array.
    """
    if isinstance(source, (list, tuple)) and source and isinstance(source[0], QuantizedTensor):
        ints = np.concatenate([t.integers.ravel() for t in source])
        vals = np.concatenate([t.dequantize(np.float64).ravel() for t in source])
        return float(vals.std()), histogram_entropy(ints)
    if hasattr(source, "decodable_parameters"):
        vals = np.concatenate([p.detach().double().numpy().ravel() for _, p in source.decodable_parameters()])
    else:
        vals = np.asarray(source, dtype=np.float64).ravel()
    if bound is None:
        bound = float(np.abs(vals).max()) if vals.size else 1.0
    if bound == 0:
        return float(vals.std()), 0.0
    qm = 2 ** (bits - 1) - 1
    ints = np.clip(np.round(vals / bound * qm), -qm, qm)
    return float(vals.std()), histogram_entropy(ints)

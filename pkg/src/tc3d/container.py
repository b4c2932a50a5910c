"""The ``.tc3d`` model container.

Layout (little-endian)::

    "TC3D" | u16 version | u32 meta length | meta (compact UTF-8 JSON)
    | u8 table count | table count x (u8 stream kind | Huffman table)
    | u32 section count | sections | 8-byte blake2b digest of everything before

    section = u16 name length | name | u8 encoding | u8 ndim | ndim x u32 shape
              | u32 payload length | payload

Payloads by encoding:

* ``DENSE``: fp32 values.
* ``CSC``: :func:`tc3d.sparse.to_bytes`.
* ``CSC_QUANT``: CSC head | u32 col_ptr | u16 k | k x fp32 centroids
  | u8 assignment bits | packed deltas then packed assignments.
* ``CSC_QUANT_HUFF``: as ``CSC_QUANT`` up to the assignment bits, then
  u32 delta bit count | u32 assignment bit count | the two Huffman payloads.

Assignment 0 marks a filler entry; assignment ``j > 0`` selects centroid
``j - 1``. Huffman tables are shared by all sections, one per stream kind.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bitio import pack_fields, unpack_fields
from .consensus import Aggregator
from .errors import CorruptStreamError
from .huffman import (histogram, huffman_build, huffman_decode, huffman_encode,
                      table_from_bytes, table_to_bytes)
from .nn import Layer, Linear, Network
from .sampler import SamplerConfig
from .sparse import (CONV_INDEX_BITS, FC_INDEX_BITS, _HEAD, CscLayer, _build, csc_decode,
                     csc_encode, csc_matvec, flatten_weight, from_bytes, to_bytes)

MAGIC = b"TC3D"
VERSION = 1
DENSE, CSC, CSC_QUANT, CSC_QUANT_HUFF = range(4)
ENCODINGS = {"dense": DENSE, "csc": CSC, "csc-quant": CSC_QUANT, "csc-quant-huff": CSC_QUANT_HUFF}
DELTA_STREAM, ASSIGN_STREAM = 0, 1
CHECKSUM_BYTES = 8


def checksum(data):
    return hashlib.blake2b(data, digest_size=CHECKSUM_BYTES).digest()


@dataclass
class Section:
    name: str
    encoding: int
    shape: tuple
    dense: np.ndarray = None     # DENSE: float32 values
    csc: CscLayer = None         # every CSC encoding
    centroids: np.ndarray = None  # quantized: float32 codebook
    assign: np.ndarray = None    # quantized: one per CSC entry, 0 = filler
    assign_bits: int = 0

    def weight(self):
        """Dense float64 tensor in the original shape."""
        if self.encoding == DENSE:
            return self.dense.astype(np.float64).reshape(self.shape)
        return csc_decode(self.csc).reshape(self.shape)

    def stream_bits(self):
        """Fixed-width ``(delta bits, value-or-assignment bits)`` of the entry streams."""
        if self.encoding == DENSE:
            return 0, 0
        width = 32 if self.encoding == CSC else self.assign_bits
        return self.csc.entries * self.csc.index_bits, self.csc.entries * width


@dataclass
class Container:
    meta: dict
    sections: list
    tables: dict = field(default_factory=dict)  # stream kind -> HuffmanTable

    @property
    def encoding(self):
        return max((s.encoding for s in self.sections), default=DENSE)

    def section(self, name):
        for s in self.sections:
            if s.name == name:
                return s
        raise KeyError(name)

    # -- serialization -----------------------------------------------------
    def to_bytes(self):
        meta = json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode()
        out = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta,
               struct.pack("<B", len(self.tables))]
        for kind in sorted(self.tables):
            out += [struct.pack("<B", kind), table_to_bytes(self.tables[kind])]
        out.append(struct.pack("<I", len(self.sections)))
        for s in self.sections:
            name = s.name.encode()
            payload = _payload(s, self.tables)
            out += [struct.pack("<H", len(name)), name,
                    struct.pack(f"<BB{len(s.shape)}I", s.encoding, len(s.shape), *s.shape),
                    struct.pack("<I", len(payload)), payload]
        body = b"".join(out)
        return body + checksum(body)

    @classmethod
    def from_bytes(cls, buf):
        buf = bytes(buf)
        if len(buf) < len(MAGIC) + 6 + CHECKSUM_BYTES:
            raise CorruptStreamError("container too short")
        body, digest = buf[:-CHECKSUM_BYTES], buf[-CHECKSUM_BYTES:]
        if checksum(body) != digest:
            raise CorruptStreamError("container checksum mismatch")
        if body[:4] != MAGIC:
            raise CorruptStreamError("not a TC3D container")
        r = _Reader(body, 4)
        version, meta_len = r.unpack("<HI")
        if version != VERSION:
            raise CorruptStreamError(f"unsupported container version {version}")
        try:
            meta = json.loads(r.take(meta_len).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptStreamError(f"bad metadata: {exc}") from None
        tables = {}
        for _ in range(r.unpack("<B")[0]):
            (kind,) = r.unpack("<B")
            tables[kind], used = table_from_bytes(body, r.pos)
            r.pos += used
        sections = []
        for _ in range(r.unpack("<I")[0]):
            name = r.take(r.unpack("<H")[0]).decode()
            encoding, ndim = r.unpack("<BB")
            shape = r.unpack(f"<{ndim}I")
            payload = r.take(r.unpack("<I")[0])
            sections.append(_parse_section(name, encoding, shape, payload, tables))
        if r.pos != len(body):
            raise CorruptStreamError("trailing bytes after the last section")
        return cls(meta, sections, tables)

    def write(self, path):
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return len(data)

    @classmethod
    def read(cls, path):
        return cls.from_bytes(Path(path).read_bytes())

    # -- model reconstruction --------------------------------------------
    def sampler(self):
        return SamplerConfig(**self.meta["sampler"])

    def aggregator(self):
        agg = Aggregator.from_config(self.meta["agg"])
        for k in agg.params:
            agg.params[k][...] = self.section(f"agg.{k}").weight()
        return agg

    def network(self, sparse_fc=False):
        """Rebuild the network; ``sparse_fc`` runs CSC-coded fc layers through
        :func:`tc3d.sparse.csc_matvec` instead of a dense weight."""
        net = Network.from_config(self.meta["net"])
        names = {s.name for s in self.sections}
        net.set_params({n: self.section(n).weight() for n in net.params() if n in names})
        if sparse_fc:
            net.layers = [_sparse_fc(layer, self) for layer in net.layers]
        return net

    def stream_report(self):
        """Fixed-width and actual bits of the quantized delta and assignment streams."""
        fixed = coded = 0
        for s in self.sections:
            if s.encoding in (CSC_QUANT, CSC_QUANT_HUFF):
                fixed += sum(s.stream_bits())
                if s.encoding == CSC_QUANT_HUFF:
                    coded += (self.tables[DELTA_STREAM].encoded_bits(histogram(s.csc.stored_deltas))
                              if s.csc.entries else 0)
                    coded += (self.tables[ASSIGN_STREAM].encoded_bits(histogram(s.assign))
                              if s.csc.entries else 0)
        table_bits = 8 * sum(len(table_to_bytes(t)) + 1 for t in self.tables.values())
        return {"fixed_bits": fixed, "huffman_bits": coded, "table_bits": table_bits}


class _Reader:
    def __init__(self, buf, pos):
        self.buf, self.pos = buf, pos

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptStreamError("container truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


# ---------------------------------------------------------------------------
# section payloads


def _csc_head(csc):
    return (_HEAD.pack(csc.index_bits, csc.shape[0], csc.m, csc.entries)
            + np.asarray(csc.col_ptr, dtype="<u4").tobytes())


def _payload(s, tables):
    if s.encoding == DENSE:
        return np.asarray(s.dense, dtype="<f4").tobytes()
    if s.encoding == CSC:
        return to_bytes(s.csc)
    head = (_csc_head(s.csc) + struct.pack("<H", s.centroids.size)
            + np.asarray(s.centroids, dtype="<f4").tobytes() + struct.pack("<B", s.assign_bits))
    deltas = s.csc.stored_deltas
    if s.encoding == CSC_QUANT:
        return head + pack_fields((deltas, s.csc.index_bits), (s.assign, s.assign_bits))
    if s.csc.entries:
        d_bytes, d_bits = huffman_encode(deltas, tables[DELTA_STREAM])
        a_bytes, a_bits = huffman_encode(s.assign, tables[ASSIGN_STREAM])
    else:
        d_bytes, d_bits, a_bytes, a_bits = b"", 0, b"", 0
    return head + struct.pack("<II", d_bits, a_bits) + d_bytes + a_bytes


def _parse_section(name, encoding, shape, payload, tables):
    n_weights = math.prod(shape)
    if encoding == DENSE:
        if len(payload) != 4 * n_weights:
            raise CorruptStreamError(f"{name}: dense payload has {len(payload)} bytes")
        return Section(name, DENSE, shape, dense=np.frombuffer(payload, "<f4").copy())
    if encoding == CSC:
        csc, used = from_bytes(payload, shape)
        if used != len(payload):
            raise CorruptStreamError(f"{name}: CSC payload size mismatch")
        _check_shape(name, csc, shape)
        return Section(name, CSC, shape, csc=csc)
    if encoding not in (CSC_QUANT, CSC_QUANT_HUFF):
        raise CorruptStreamError(f"{name}: unknown encoding {encoding}")

    r = _Reader(payload, 0)
    index_bits, n_rows, m, n = r.unpack("<BIII")
    if not 1 <= index_bits <= 30:
        raise CorruptStreamError(f"{name}: bad index width {index_bits}")
    col_ptr = np.frombuffer(r.take(4 * (m + 1)), "<u4").astype(np.int64)
    (k,) = r.unpack("<H")
    centroids = np.frombuffer(r.take(4 * k), "<f4").copy()
    (assign_bits,) = r.unpack("<B")
    if encoding == CSC_QUANT:
        rest = r.take(len(payload) - r.pos)
        stored, assign = unpack_fields(rest, (n, index_bits), (n, assign_bits))
        if len(rest) != math.ceil(n * (index_bits + assign_bits) / 8):
            raise CorruptStreamError(f"{name}: quantized payload size mismatch")
    else:
        d_bits, a_bits = r.unpack("<II")
        d_buf = r.take(math.ceil(d_bits / 8))
        a_buf = r.take(math.ceil(a_bits / 8))
        if r.pos != len(payload):
            raise CorruptStreamError(f"{name}: Huffman payload size mismatch")
        if n and (DELTA_STREAM not in tables or ASSIGN_STREAM not in tables):
            raise CorruptStreamError(f"{name}: Huffman tables missing")
        stored = huffman_decode(d_buf, d_bits, tables[DELTA_STREAM]) if n else np.zeros(0, int)
        assign = huffman_decode(a_buf, a_bits, tables[ASSIGN_STREAM]) if n else np.zeros(0, int)
        if stored.size != n or assign.size != n:
            raise CorruptStreamError(f"{name}: decoded {stored.size}/{assign.size} of {n} entries")
    if assign.size and assign.max() > k:
        raise CorruptStreamError(f"{name}: assignment beyond the codebook")
    filler = assign == 0
    if np.any(filler & (stored != 0)):
        raise CorruptStreamError(f"{name}: filler entry with a non-zero delta")
    table = np.concatenate([[0.0], centroids.astype(np.float64)]).astype(np.float32)
    values = table[assign]
    deltas = np.where(filler, 1 << index_bits, stored)
    csc = _build((n_rows, m), index_bits, col_ptr, values, deltas, shape)
    _check_shape(name, csc, shape)
    return Section(name, encoding, shape, csc=csc, centroids=centroids,
                   assign=np.asarray(assign, dtype=np.int64), assign_bits=assign_bits)


def _check_shape(name, csc, shape):
    flat = (shape[0], math.prod(shape[1:])) if len(shape) > 2 else tuple(shape)
    if tuple(csc.shape) != flat:
        raise CorruptStreamError(f"{name}: CSC shape {csc.shape} does not match {shape}")


# ---------------------------------------------------------------------------
# building containers from a network


def _meta(net, agg, cfg, extra):
    meta = {"net": net.config(), "agg": agg.config(), "sampler": asdict(cfg)}
    if extra:
        meta["extra"] = extra
    return meta


def _dense_section(name, value):
    v = np.asarray(value)
    return Section(name, DENSE, tuple(v.shape), dense=v.astype("<f4").ravel())


def _index_bits(name, net):
    layer = next(l for l in net.weight_layers() if f"{l.name}.weight" == name)
    return FC_INDEX_BITS if layer.kind == "fc" else CONV_INDEX_BITS


def build_container(net, agg, cfg, encoding=DENSE, codebooks=None, extra=None):
    """Serialize ``net`` (weights rounded to fp32) under one layer encoding.

    Sparse encodings apply to the conv3d/fc weights; biases and aggregator
    parameters are always dense. Quantized encodings need ``codebooks``
    mapping weight name to centroids, and every surviving weight must equal
    one of its layer's centroids.
    """
    weights = {f"{l.name}.weight" for l in net.weight_layers()}
    sections = []
    for name, value in net.params().items():
        if encoding == DENSE or name not in weights:
            sections.append(_dense_section(name, value))
            continue
        w = np.asarray(value).astype(np.float32)
        csc = csc_encode(flatten_weight(w), _index_bits(name, net), w.shape)
        if encoding == CSC:
            sections.append(Section(name, CSC, tuple(w.shape), csc=csc))
            continue
        centroids = np.asarray(codebooks[name], dtype=np.float32)
        sections.append(_quant_section(name, encoding, csc, centroids, w.shape))
    for name, value in agg.named_params().items():
        sections.append(_dense_section(name, value))

    tables = {}
    if encoding == CSC_QUANT_HUFF:
        quant = [s for s in sections if s.encoding == CSC_QUANT_HUFF and s.csc.entries]
        if quant:
            tables[DELTA_STREAM] = huffman_build(
                histogram(np.concatenate([s.csc.stored_deltas for s in quant])))
            tables[ASSIGN_STREAM] = huffman_build(
                histogram(np.concatenate([s.assign for s in quant])))
    return Container(_meta(net, agg, cfg, extra), sections, tables)


def _quant_section(name, encoding, csc, centroids, shape):
    if np.any(centroids == 0):
        raise ValueError(f"{name}: a zero centroid cannot be told apart from a filler")
    bits = FC_INDEX_BITS if csc.index_bits == FC_INDEX_BITS else CONV_INDEX_BITS
    if centroids.size >= 1 << bits:
        raise ValueError(f"{name}: {centroids.size} centroids do not fit {bits} bits")
    order = np.argsort(centroids, kind="stable")
    values = csc.values.astype(np.float32)
    real = values != 0
    pos = np.searchsorted(centroids[order], values[real])
    pos = np.minimum(pos, centroids.size - 1)
    idx = order[pos]
    if np.any(centroids[idx] != values[real]):
        raise ValueError(f"{name}: weights are not all codebook values")
    assign = np.zeros(csc.entries, dtype=np.int64)
    assign[real] = idx + 1
    return Section(name, encoding, tuple(shape), csc=csc, centroids=centroids,
                   assign=assign, assign_bits=bits)


class CscLinear(Layer):
    """Inference-only fully-connected layer backed by a CSC weight."""

    kind = "fc-csc"

    def __init__(self, csc, bias, name=None):
        super().__init__(name)
        self.csc = csc
        self.bias = np.asarray(bias, dtype=np.float64)

    def output_shape(self, in_shape):
        return (self.csc.shape[0],)

    def flops(self, in_shape):
        return 2 * self.csc.nnz

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return csc_matvec(self.csc, x) + self.bias
        return csc_matvec(self.csc, x.T).T + self.bias


def _sparse_fc(layer, container):
    if isinstance(layer, Linear):
        s = container.section(f"{layer.name}.weight")
        if s.encoding != DENSE:
            return CscLinear(s.csc, layer.params["bias"], name=layer.name)
    return layer

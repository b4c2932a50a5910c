"""Compressed sparse column storage with bit-limited relative row indices.

Each stored entry carries the distance from the previous entry of its column
(the first entry of a column is measured from row 0). Distances must fit in
``index_bits``; a larger gap is bridged by zero-valued filler entries, each
advancing the row cursor by a full ``2**index_bits``. A filler is recognised
by its zero value, and its stored delta is 0.

Conv3d weights are flattened to ``[out_ch, in_ch*kd*kh*kw]`` before encoding.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .bitio import bits_float32, float32_bits, pack_fields, unpack_fields
from .errors import CorruptStreamError, ShapeError

CONV_INDEX_BITS = 8
FC_INDEX_BITS = 5
PTR_BITS = 32
VALUE_BITS = 32


@dataclass(frozen=True, eq=False)
class CscLayer:
    shape: tuple                 # (rows, m)
    index_bits: int
    col_ptr: np.ndarray          # m + 1 entry offsets, fillers included
    values: np.ndarray           # one per entry; 0.0 marks a filler
    row_deltas: np.ndarray       # logical deltas; fillers carry 2**index_bits
    original_shape: tuple = None
    _rows: np.ndarray = field(default=None, repr=False)
    _cols: np.ndarray = field(default=None, repr=False)

    @property
    def m(self):
        return self.shape[1]

    @property
    def entries(self):
        """Stored entries a', fillers included."""
        return int(self.values.shape[0])

    @property
    def nnz(self):
        """Non-zero weights a."""
        return int(np.count_nonzero(self.values))

    @property
    def fillers(self):
        return self.entries - self.nnz

    @property
    def stored_deltas(self):
        """The values actually written to the delta stream (each < 2**index_bits)."""
        return np.where(self.values == 0, 0, self.row_deltas)

    def storage_count(self):
        """Numbers needed before delta packing: ``2a + m + 1``."""
        return 2 * self.nnz + self.m + 1

    def packed_bits(self, value_bits=VALUE_BITS, ptr_bits=PTR_BITS):
        return self.entries * (self.index_bits + value_bits) + (self.m + 1) * ptr_bits

    def coordinates(self):
        """Decoded ``(rows, cols)`` of every entry, fillers included."""
        return self._rows, self._cols


def flatten_weight(w):
    """2-D view used for CSC: conv ``[O, I, kd, kh, kw] -> [O, I*kd*kh*kw]``."""
    w = np.asarray(w)
    return w.reshape(w.shape[0], -1) if w.ndim > 2 else w


def csc_encode(matrix, index_bits, original_shape=None):
    """Encode a 2-D array; zeros (including -0.0) are not stored."""
    a = np.asarray(matrix)
    if a.ndim != 2:
        raise ShapeError(f"csc_encode needs a 2-D matrix, got shape {a.shape}", a.shape)
    if index_bits < 1:
        raise ValueError("index_bits must be >= 1")
    bound = 1 << index_bits
    n_rows, m = a.shape
    cols, rows = np.nonzero(a.T)  # column-major order, rows ascending in each column
    vals = a[rows, cols]

    prev = np.zeros_like(rows)
    same_col = np.zeros(rows.shape, dtype=bool)
    if rows.size:
        same_col[1:] = cols[1:] == cols[:-1]
        prev[1:] = np.where(same_col[1:], rows[:-1], 0)
    gap = rows - prev
    n_fill = gap // bound
    delta = gap % bound

    counts = n_fill + 1
    total = int(counts.sum())
    real_pos = np.cumsum(counts) - 1
    values = np.zeros(total, dtype=a.dtype if a.dtype.kind == "f" else np.float64)
    values[real_pos] = vals
    deltas = np.full(total, bound, dtype=np.int64)
    deltas[real_pos] = delta
    entry_cols = np.repeat(cols, counts)
    col_ptr = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(np.bincount(entry_cols, minlength=m), out=col_ptr[1:])
    return _build(a.shape, index_bits, col_ptr, values, deltas, original_shape)


def _build(shape, index_bits, col_ptr, values, deltas, original_shape):
    rows, cols = _decode_coordinates(shape, index_bits, col_ptr, values, deltas)
    return CscLayer(tuple(int(s) for s in shape), int(index_bits), col_ptr, values, deltas,
                    tuple(original_shape) if original_shape is not None else tuple(shape),
                    rows, cols)


def _decode_coordinates(shape, index_bits, col_ptr, values, deltas):
    n_rows, m = shape
    n = values.shape[0]
    if col_ptr.shape != (m + 1,) or col_ptr[0] != 0 or col_ptr[-1] != n:
        raise CorruptStreamError("column pointers do not match the entry count")
    counts = np.diff(col_ptr)
    if counts.size and counts.min() < 0:
        raise CorruptStreamError("column pointers are not monotone")
    bound = 1 << index_bits
    filler = values == 0
    if np.any(filler & (deltas != bound)) or np.any(~filler & ((deltas < 0) | (deltas >= bound))):
        raise CorruptStreamError("row delta outside the index width")
    cols = np.repeat(np.arange(m), counts)
    running = np.cumsum(deltas.astype(np.int64))
    # the cursor restarts at row 0 in every column
    base = np.concatenate(([0], running))[col_ptr[:-1]]
    rows = running - np.repeat(base, counts)
    if n and rows.max() >= n_rows:
        raise CorruptStreamError("decoded row index beyond the matrix height")
    real = ~filler
    if real.any():
        r, c = rows[real], cols[real]
        same = c[1:] == c[:-1]
        if np.any(same & (r[1:] <= r[:-1])):
            raise CorruptStreamError("row indices are not strictly increasing within a column")
    return rows, cols


def csc_decode(layer):
    """Dense 2-D reconstruction; fillers vanish."""
    out = np.zeros(layer.shape, dtype=np.result_type(layer.values.dtype, np.float64))
    rows, cols = layer.coordinates()
    real = layer.values != 0
    out[rows[real], cols[real]] = layer.values[real]
    return out


def csc_matvec(layer, x):
    """``decode(layer) @ x`` without densifying; ``x`` may carry a trailing batch axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != layer.m:
        raise ShapeError(f"vector length {x.shape[0]} != matrix columns {layer.m}",
                         x.shape, layer.shape)
    rows, cols = layer.coordinates()
    v = layer.values.astype(np.float64)
    if x.ndim == 1:
        return np.bincount(rows, weights=v * x[cols], minlength=layer.shape[0])[:layer.shape[0]]
    out = np.zeros((layer.shape[0],) + x.shape[1:])
    np.add.at(out, rows, v[:, None] * x[cols])
    return out


# ---------------------------------------------------------------------------
# byte layout

_HEAD = struct.Struct("<BIII")  # index_bits, rows, m, entries


def to_bytes(layer):
    """Header, column pointers, then one bitstream of deltas followed by fp32 values."""
    head = _HEAD.pack(layer.index_bits, layer.shape[0], layer.m, layer.entries)
    ptr = np.asarray(layer.col_ptr, dtype="<u4").tobytes()
    body = pack_fields((layer.stored_deltas, layer.index_bits),
                       (float32_bits(layer.values), VALUE_BITS))
    return head + ptr + body


def body_size(layer, value_bits=VALUE_BITS):
    """Bytes of the pointer array plus the packed stream (header excluded)."""
    return math.ceil(layer.packed_bits(value_bits) / 8)


def from_bytes(buf, original_shape=None):
    """Parse :func:`to_bytes` output; returns ``(layer, bytes consumed)``."""
    if len(buf) < _HEAD.size:
        raise CorruptStreamError("truncated CSC header")
    index_bits, n_rows, m, n = _HEAD.unpack_from(buf)
    if not 1 <= index_bits <= 30:
        raise CorruptStreamError(f"bad index width {index_bits}")
    off = _HEAD.size
    if len(buf) < off + 4 * (m + 1):
        raise CorruptStreamError("truncated column pointers")
    col_ptr = np.frombuffer(buf, "<u4", m + 1, off).astype(np.int64)
    off += 4 * (m + 1)
    stored, raw = unpack_fields(buf[off:], (n, index_bits), (n, VALUE_BITS))
    off += math.ceil(n * (index_bits + VALUE_BITS) / 8)
    values = bits_float32(raw)
    deltas = np.where(values == 0, 1 << index_bits, stored)
    if np.any((values == 0) & (stored != 0)):
        raise CorruptStreamError("filler entry with a non-zero delta")
    layer = _build((n_rows, m), index_bits, col_ptr, values, deltas, original_shape)
    return layer, off

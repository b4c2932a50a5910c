"""Fixed-width unsigned integer packing, LSB-first within each byte."""

import numpy as np

from .errors import CorruptStreamError


def _planes(values, bits):
    v = np.asarray(values, dtype=np.int64)
    if v.size and (v.min() < 0 or v.max() >= (1 << bits)):
        raise ValueError(f"values out of range for {bits}-bit packing")
    return ((v[:, None] >> np.arange(bits)) & 1).astype(np.uint8).ravel()


def pack_fields(*fields):
    """Pack several ``(values, bits)`` runs back to back into one padded bitstream."""
    planes = [_planes(v, b) for v, b in fields]
    flat = np.concatenate(planes) if planes else np.zeros(0, np.uint8)
    return np.packbits(flat, bitorder="little").tobytes()


def unpack_fields(buf, *layout):
    """Inverse of :func:`pack_fields`; ``layout`` is ``(count, bits)`` per run."""
    total = sum(c * b for c, b in layout)
    need = (total + 7) // 8
    if len(buf) < need:
        raise CorruptStreamError(f"bitstream needs {need} bytes, got {len(buf)}")
    flat = np.unpackbits(np.frombuffer(buf, np.uint8, need), bitorder="little", count=total)
    out, off = [], 0
    for count, bits in layout:
        chunk = flat[off:off + count * bits].reshape(count, bits).astype(np.int64)
        out.append(chunk @ (1 << np.arange(bits, dtype=np.int64)))
        off += count * bits
    return out


def pack_uint(values, bits):
    """Pack non-negative ints (each < 2**bits) into ``ceil(n*bits/8)`` bytes."""
    return pack_fields((values, bits))


def unpack_uint(buf, bits, count):
    return unpack_fields(buf, (count, bits))[0]


def packed_size(count, bits):
    return (count * bits + 7) // 8


def float32_bits(values):
    return np.asarray(values, dtype="<f4").view("<u4").astype(np.int64)


def bits_float32(ints):
    return np.asarray(ints, dtype=np.int64).astype("<u4").view("<f4")

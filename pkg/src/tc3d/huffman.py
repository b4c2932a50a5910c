"""Canonical Huffman coding over non-negative integer symbols.

Only code lengths are stored; codewords are rebuilt canonically (sorted by
length, then symbol). Codewords are written MSB-first into a byte-padded
stream, so the bit count travels alongside the bytes.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CorruptStreamError, EmptyHistogramError, UnknownSymbolError

_TABLE_WINDOW = 16  # widest code decoded through a flat lookup table


@dataclass(frozen=True)
class HuffmanTable:
    lengths: dict  # symbol -> code length in bits

    def __post_init__(self):
        if not self.lengths:
            raise EmptyHistogramError("a Huffman table needs at least one symbol")

    @property
    def codes(self):
        """symbol -> integer codeword (its ``lengths[symbol]`` low bits, MSB first)."""
        out, code, prev = {}, 0, 0
        for sym, n in sorted(self.lengths.items(), key=lambda kv: (kv[1], kv[0])):
            code <<= n - prev
            out[sym] = code
            code += 1
            prev = n
        return out

    @property
    def max_length(self):
        return max(self.lengths.values())

    def kraft_sum(self):
        return sum(2.0 ** -n for n in self.lengths.values())

    def encoded_bits(self, histogram):
        return sum(int(c) * self.lengths[s] for s, c in histogram.items() if c)

    def _arrays(self):
        size = max(self.lengths) + 1
        codes = np.zeros(size, dtype=np.int64)
        lens = np.zeros(size, dtype=np.int64)
        for sym, code in self.codes.items():
            codes[sym] = code
            lens[sym] = self.lengths[sym]
        return codes, lens


def histogram(symbols):
    """``{symbol: count}`` for an integer array."""
    values, counts = np.unique(np.asarray(symbols, dtype=np.int64), return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}


def huffman_build(hist):
    """Optimal code lengths for ``{symbol: count}``; zero counts are ignored.

    Merges always take the two lightest subtrees, ties going to the subtree
    whose smallest symbol is lower, so the result does not depend on dict order.
    """
    live = sorted((int(s), int(c)) for s, c in hist.items() if c > 0)
    if any(s < 0 for s, _ in live):
        raise ValueError("symbols must be non-negative integers")
    if not live:
        raise EmptyHistogramError("cannot build a Huffman code from an empty histogram")
    if len(live) == 1:
        return HuffmanTable({live[0][0]: 1})

    depth = {s: 0 for s, _ in live}
    heap = [(c, s, [s]) for s, c in live]
    heapq.heapify(heap)
    while len(heap) > 1:
        c1, m1, syms1 = heapq.heappop(heap)
        c2, m2, syms2 = heapq.heappop(heap)
        for s in syms1:
            depth[s] += 1
        for s in syms2:
            depth[s] += 1
        heapq.heappush(heap, (c1 + c2, min(m1, m2), syms1 + syms2))
    return HuffmanTable(depth)


def huffman_encode(symbols, table):
    """Returns ``(payload bytes, bit count)``."""
    x = np.asarray(symbols, dtype=np.int64).ravel()
    if x.size == 0:
        return b"", 0
    codes, lens = table._arrays()
    bad = (x < 0) | (x >= lens.size)
    bad[~bad] = lens[x[~bad]] == 0
    if bad.any():
        raise UnknownSymbolError(int(x[np.argmax(bad)]))
    c, n = codes[x], lens[x]
    total = int(n.sum())
    starts = np.cumsum(n) - n
    shift = np.repeat(n, n) - 1 - (np.arange(total) - np.repeat(starts, n))
    bits = (np.repeat(c, n) >> shift) & 1
    return np.packbits(bits.astype(np.uint8)).tobytes(), total


def huffman_decode(payload, nbits, table):
    """Inverse of :func:`huffman_encode`; ``nbits`` must land on a codeword boundary."""
    if nbits == 0:
        return np.zeros(0, dtype=np.int64)
    if len(payload) * 8 < nbits:
        raise CorruptStreamError(f"Huffman stream holds {len(payload) * 8} bits, need {nbits}")
    width = table.max_length
    bits = np.unpackbits(np.frombuffer(payload, np.uint8), count=nbits).astype(np.int64)
    padded = np.concatenate([bits, np.zeros(width - 1, np.int64)])
    windows = sliding_window_view(padded, width) @ (1 << np.arange(width - 1, -1, -1))
    windows = windows.tolist()

    by_len = sorted(table.codes.items(), key=lambda kv: (table.lengths[kv[0]], kv[0]))
    out = []
    pos = 0
    if width <= _TABLE_WINDOW:
        sym_at = [0] * (1 << width)
        len_at = [0] * (1 << width)
        for sym, code in by_len:
            n = table.lengths[sym]
            lo = code << (width - n)
            for w in range(lo, lo + (1 << (width - n))):
                sym_at[w], len_at[w] = sym, n
        while pos < nbits:
            w = windows[pos]
            n = len_at[w]
            if n == 0:
                raise CorruptStreamError(f"no codeword matches at bit {pos}")
            out.append(sym_at[w])
            pos += n
    else:
        # canonical search: first code and symbol run for every length
        first, count, offset, ordered = {}, {}, {}, []
        for sym, code in by_len:
            n = table.lengths[sym]
            if n not in first:
                first[n], count[n], offset[n] = code, 0, len(ordered)
            count[n] += 1
            ordered.append(sym)
        lengths = sorted(first)
        while pos < nbits:
            w = windows[pos]
            for n in lengths:
                k = (w >> (width - n)) - first[n]
                if 0 <= k < count[n]:
                    out.append(ordered[offset[n] + k])
                    pos += n
                    break
            else:
                raise CorruptStreamError(f"no codeword matches at bit {pos}")
    if pos != nbits:
        raise CorruptStreamError("Huffman stream ends inside a codeword")
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# table serialization: u32 alphabet size, then one u8 code length per symbol
# (0 = absent)

def table_to_bytes(table):
    size = max(table.lengths) + 1
    lens = np.zeros(size, dtype=np.uint8)
    for sym, n in table.lengths.items():
        if n > 255:
            raise ValueError("code length does not fit the table format")
        lens[sym] = n
    return struct.pack("<I", size) + lens.tobytes()


def table_from_bytes(buf, offset=0):
    """Returns ``(table, bytes consumed)``."""
    if len(buf) < offset + 4:
        raise CorruptStreamError("truncated Huffman table")
    (size,) = struct.unpack_from("<I", buf, offset)
    if len(buf) < offset + 4 + size:
        raise CorruptStreamError("truncated Huffman table")
    lens = np.frombuffer(buf, np.uint8, size, offset + 4)
    lengths = {int(s): int(lens[s]) for s in np.flatnonzero(lens)}
    if not lengths:
        raise CorruptStreamError("Huffman table has no symbols")
    if sum(2.0 ** -n for n in lengths.values()) > 1.0:
        raise CorruptStreamError("Huffman code lengths violate the Kraft inequality")
    return HuffmanTable(lengths), 4 + size

"""Byte-oriented range coder with static frequency tables.

32-bit range, renormalised a byte at a time below ``2**24``; carries are
propagated through a cached byte (the scheme used by LZMA's coder).
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

import numpy as np

TOTAL_BITS = 15
TOTAL = 1 << TOTAL_BITS
TOP = 1 << 24
MASK32 = 0xFFFFFFFF


def quantize_counts(counts: Sequence[int], total: int = TOTAL) -> list[int]:
    """Scale positive histogram counts to integers summing to ``total``, each >= 1."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    if n <= 0:
        raise ValueError("empty histogram")
    nz = counts > 0
    if nz.sum() > total:
        raise ValueError(f"{int(nz.sum())} symbols do not fit a table of total {total}")
    freq = np.where(nz, np.maximum(1, np.floor(counts * total / n)), 0).astype(np.int64)
    diff = total - int(freq.sum())
    order = np.argsort(-counts, kind="stable")
    i = 0
    while diff != 0:
        j = order[i % len(order)]
        if diff > 0:
            freq[j] += 1
            diff -= 1
        elif freq[j] > 1:
            freq[j] -= 1
            diff += 1
        i += 1
    return freq.tolist()


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, cum: int, freq: int, total: int = TOTAL):
        r = self.range // total
        self.low += r * cum
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(5):
            self.code = ((self.code << 8) | self._byte()) & MASK32

    def _byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
        else:
            b = 0
        self.pos += 1
        return b

    @property
    def overrun(self) -> bool:
        return self.pos > len(self.data)

    def decode(self, cumulative: list[int], total: int = TOTAL) -> int:
        """Index ``s`` with ``cumulative[s] <= v < cumulative[s + 1]``."""
        r = self.range // total
        v = min(self.code // r, total - 1)
        s = bisect_right(cumulative, v) - 1
        lo = cumulative[s]
        self.code -= r * lo
        self.range = r * (cumulative[s + 1] - lo)
        while self.range < TOP:
            self.code = ((self.code << 8) | self._byte()) & MASK32
            self.range <<= 8
        return s


def encode_symbols(indices: Sequence[int], freqs: Sequence[int]) -> bytes:
    """Code table indices ``indices`` with the static table ``freqs`` (summing to TOTAL)."""
    cum = [0]
    for f in freqs:
        cum.append(cum[-1] + f)
    if cum[-1] != TOTAL:
        raise ValueError(f"frequency table sums to {cum[-1]}, expected {TOTAL}")
    enc = RangeEncoder()
    encode = enc.encode
    for i in indices:
        encode(cum[i], freqs[i])
    return enc.finish()


def decode_symbols(data: bytes, freqs: Sequence[int], count: int) -> tuple[list[int], bool]:
    """Decode ``count`` table indices; second value flags reading past the data."""
    cum = [0]
    for f in freqs:
        cum.append(cum[-1] + f)
    dec = RangeDecoder(data)
    decode = dec.decode
    out = [decode(cum) for _ in range(count)]
    return out, dec.overrun

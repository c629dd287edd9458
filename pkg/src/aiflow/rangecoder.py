"""Byte-oriented range coder with carry counting.

The coding state is a 32-bit `low`/`range` pair. Encoding a symbol with
cumulative frequency `cum_lo`, frequency `freq`, and table total `total`
narrows the interval to [low + (range//total)*cum_lo, ...), then renormalizes
by emitting the top byte whenever range drops below 2^24. Carries are handled
LZMA-style: one byte is cached and a run of 0xFF bytes is counted so a late
carry can ripple through them; the very first emitted byte is always zero and
the flush appends five more renormalizations, so framing overhead is six
bytes. The decoder mirrors the arithmetic exactly: it discards the leading
zero byte, primes a 32-bit code word, and reads zero bytes past the end of
the stream during its final renormalizations.

This layout (32-bit state, 2^24 renormalization threshold, leading zero,
five-byte flush) is the cross-implementation contract for every bitstream
this package writes.
"""

from __future__ import annotations

from .errors import InvalidInputError

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
_HALF16 = 1 << 15
_TOTAL16 = 1 << 16


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._finished = False

    def _shift_low(self):
        if (self.low & _MASK32) < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            self.out.append((self.cache + carry) & 0xFF)
            filler = 0x00 if carry else 0xFF
            for _ in range(self.cache_size - 1):
                self.out.append(filler)
            self.cache = (self.low >> 24) & 0xFF
            self.cache_size = 0
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, cum_lo: int, freq: int, total: int):
        if self._finished:
            raise InvalidInputError("encoder already finished")
        if freq < 1 or cum_lo < 0 or cum_lo + freq > total:
            raise InvalidInputError("invalid frequency interval")
        r = self.range // total
        self.low += r * cum_lo
        self.range = r * freq
        while self.range < _TOP:
            self.range = (self.range << 8) & _MASK32
            self._shift_low()

    def encode_raw(self, value: int, num_bits: int):
        """num_bits of value, most significant first, one coin flip each."""
        for i in reversed(range(num_bits)):
            bit = (value >> i) & 1
            self.encode(bit * _HALF16, _HALF16, _TOTAL16)

    def finish(self) -> bytes:
        if not self._finished:
            for _ in range(5):
                self._shift_low()
            self._finished = True
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        self._next_byte()  # the encoder's leading zero byte
        for _ in range(4):
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32

    def _next_byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
            self.pos += 1
            return b
        return 0

    def decode_freq(self, total: int) -> int:
        self._r = self.range // total
        return min(self.code // self._r, total - 1)

    def decode_update(self, cum_lo: int, freq: int):
        self.code -= self._r * cum_lo
        self.range = self._r * freq
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32
            self.range = (self.range << 8) & _MASK32

    def decode_raw(self, num_bits: int) -> int:
        value = 0
        for _ in range(num_bits):
            v = self.decode_freq(_TOTAL16)
            bit = 1 if v >= _HALF16 else 0
            self.decode_update(bit * _HALF16, _HALF16)
            value = (value << 1) | bit
        return value

"""Backward-adaptive run-length Golomb-Rice coding of signed integers.

The coder alternates between two modes driven by an adaptive run-length
parameter: while it is zero, each symbol is Golomb-Rice coded on its own;
once it grows past one, runs of up to ``2^k`` zeros collapse into single-bit
markers.  Both the Rice parameter and the run parameter adapt after every
coded unit from the symbols themselves, so the decoder needs no side
information beyond the symbol count.

Parameters are held in unsigned fixed point with ``ADAPT_SHIFT`` fractional
bits.  The adaptation increments below are frozen constants covered by golden
bitstream tests; the contract is exact round trip plus near-entropy coding of
Laplacian-like data, not bit compatibility with any other coder.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "BitSink",
    "BitSource",
    "DecodeError",
    "zigzag",
    "unzigzag",
    "zigzag_array",
    "unzigzag_array",
    "rlgr_encode",
    "rlgr_decode",
]


class DecodeError(ValueError):
    """Raised when a bitstream is truncated or structurally invalid."""


# --- frozen coder constants ------------------------------------------------
ADAPT_SHIFT = 4  # fractional bits of the fixed-point parameters
K_MAX = 24  # cap for both parameters (integer part)
QUOT_LIMIT = 12  # unary quotients below this; longer ones escape
ESC_LEN_BITS = 6  # bit-length field of an escaped value
KR_INIT = 2 << ADAPT_SHIFT
KR_DOWN = 2  # Rice parameter decay when the quotient is 0
KR_UP_BASE = 2  # Rice parameter growth: p + KR_UP_BASE when the quotient is p >= 2
KRL_INIT = 0
KRL_UP_ZERO = 7  # run parameter growth per zero coded outside run mode
KRL_DOWN_NONZERO = 6  # run parameter decay per nonzero coded outside run mode
KRL_UP_RUN = 6  # growth per completed run
KRL_DOWN_PARTIAL = 8  # decay per interrupted run
_FP_MAX = K_MAX << ADAPT_SHIFT


class BitSink:
    """MSB-first bit accumulator backed by a bytearray."""

    def __init__(self):
        self._buf = bytearray()
        self._acc = 0
        self._nacc = 0

    def write(self, value: int, nbits: int) -> None:
        if nbits == 0:
            return
        self._acc = (self._acc << nbits) | (value & ((1 << nbits) - 1))
        self._nacc += nbits
        while self._nacc >= 8:
            self._nacc -= 8
            self._buf.append((self._acc >> self._nacc) & 0xFF)
        self._acc &= (1 << self._nacc) - 1

    @property
    def bit_count(self) -> int:
        return 8 * len(self._buf) + self._nacc

    def getvalue(self) -> bytes:
        """Zero-pad the final partial byte and return the stream."""
        out = bytes(self._buf)
        if self._nacc:
            out += bytes([(self._acc << (8 - self._nacc)) & 0xFF])
        return out


class BitSource:
    """MSB-first bit reader over immutable bytes."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0  # bit cursor

    @property
    def bits_read(self) -> int:
        return self._pos

    def read(self, nbits: int) -> int:
        if self._pos + nbits > 8 * len(self._data):
            raise DecodeError("bitstream truncated")
        value = 0
        pos = self._pos
        data = self._data
        remaining = nbits
        while remaining:
            byte = data[pos >> 3]
            avail = 8 - (pos & 7)
            take = avail if avail < remaining else remaining
            shift = avail - take
            value = (value << take) | ((byte >> shift) & ((1 << take) - 1))
            pos += take
            remaining -= take
        self._pos = pos
        return value

    def read_bit(self) -> int:
        if self._pos >= 8 * len(self._data):
            raise DecodeError("bitstream truncated")
        byte = self._data[self._pos >> 3]
        bit = (byte >> (7 - (self._pos & 7))) & 1
        self._pos += 1
        return bit


def zigzag(v: int) -> int:
    """0 -> 0, -1 -> 1, 1 -> 2, -2 -> 3, ...; bijective onto the naturals."""
    return 2 * v if v >= 0 else -2 * v - 1


def unzigzag(u: int) -> int:
    return u // 2 if u % 2 == 0 else -(u + 1) // 2


def zigzag_array(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.int64)
    return np.where(v >= 0, 2 * v, -2 * v - 1)


def unzigzag_array(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.int64)
    return np.where(u % 2 == 0, u // 2, -(u + 1) // 2)


def _gr_write(sink: BitSink, v: int, k: int) -> None:
    q = v >> k
    if q < QUOT_LIMIT:
        # q ones, a zero, then the k low bits
        sink.write(((1 << q) - 1) << 1, q + 1)
        if k:
            sink.write(v & ((1 << k) - 1), k)
    else:
        sink.write((1 << QUOT_LIMIT) - 1, QUOT_LIMIT)
        nbits = v.bit_length()
        sink.write(nbits, ESC_LEN_BITS)
        sink.write(v, nbits)


def _gr_read(source: BitSource, k: int) -> int:
    q = 0
    while q < QUOT_LIMIT and source.read_bit():
        q += 1
    if q < QUOT_LIMIT:
        return (q << k) | (source.read(k) if k else 0)
    nbits = source.read(ESC_LEN_BITS)
    return source.read(nbits) if nbits else 0


class _State:
    __slots__ = ("kr_fp", "krl_fp")

    def __init__(self):
        self.kr_fp = KR_INIT
        self.krl_fp = KRL_INIT

    def adapt_value(self, v: int) -> None:
        p = v >> (self.kr_fp >> ADAPT_SHIFT)
        if p == 0:
            self.kr_fp = max(0, self.kr_fp - KR_DOWN)
        elif p > 1:
            self.kr_fp = min(_FP_MAX, self.kr_fp + p + KR_UP_BASE)


def rlgr_encode(symbols, sink: BitSink) -> int:
    """Encode signed integers; returns the number of bits written."""
    u = zigzag_array(np.asarray(symbols, dtype=np.int64)).tolist()
    n = len(u)
    start_bits = sink.bit_count
    st = _State()
    i = 0
    while i < n:
        krl = st.krl_fp >> ADAPT_SHIFT
        if krl == 0:
            v = u[i]
            i += 1
            _gr_write(sink, v, st.kr_fp >> ADAPT_SHIFT)
            st.adapt_value(v)
            if v == 0:
                st.krl_fp = min(_FP_MAX, st.krl_fp + KRL_UP_ZERO)
            else:
                st.krl_fp = max(0, st.krl_fp - KRL_DOWN_NONZERO)
        else:
            m = 1 << krl
            run = 0
            while run < m and i + run < n and u[i + run] == 0:
                run += 1
            if run == m or i + run == n:
                # complete run, or the stream ends inside one; the decoder
                # stops at the symbol count, so a full-run marker is safe
                sink.write(0, 1)
                i += run
                st.krl_fp = min(_FP_MAX, st.krl_fp + KRL_UP_RUN)
            else:
                v = u[i + run]
                i += run + 1
                sink.write(1, 1)
                sink.write(run, krl)
                _gr_write(sink, v - 1, st.kr_fp >> ADAPT_SHIFT)
                st.adapt_value(v - 1)
                st.krl_fp = max(0, st.krl_fp - KRL_DOWN_PARTIAL)
    return sink.bit_count - start_bits


def rlgr_decode(source: BitSource, count: int) -> np.ndarray:
    """Decode exactly ``count`` signed integers written by :func:`rlgr_encode`."""
    out = np.empty(count, dtype=np.int64)
    st = _State()
    n = 0
    while n < count:
        krl = st.krl_fp >> ADAPT_SHIFT
        if krl == 0:
            v = _gr_read(source, st.kr_fp >> ADAPT_SHIFT)
            out[n] = unzigzag(v)
            n += 1
            st.adapt_value(v)
            if v == 0:
                st.krl_fp = min(_FP_MAX, st.krl_fp + KRL_UP_ZERO)
            else:
                st.krl_fp = max(0, st.krl_fp - KRL_DOWN_NONZERO)
        else:
            m = 1 << krl
            if source.read_bit() == 0:
                take = min(m, count - n)
                out[n : n + take] = 0
                n += take
                st.krl_fp = min(_FP_MAX, st.krl_fp + KRL_UP_RUN)
            else:
                run = source.read(krl)
                if n + run >= count:
                    raise DecodeError("partial run overflows the declared symbol count")
                out[n : n + run] = 0
                n += run
                v = _gr_read(source, st.kr_fp >> ADAPT_SHIFT) + 1
                out[n] = unzigzag(v)
                n += 1
                st.adapt_value(v - 1)
                st.krl_fp = max(0, st.krl_fp - KRL_DOWN_PARTIAL)
    return out

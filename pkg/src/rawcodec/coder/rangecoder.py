"""Byte-oriented range coder over integer CDFs with a fixed total of 2^16.

Carry handling follows the cache/pending-byte scheme: ``low`` holds 33 bits,
``range`` 32 bits, and renormalization shifts out one byte whenever range
drops below 2^24. The always-zero lead byte of that scheme is not emitted,
so a stream is exactly ``4 + renormalizations`` bytes long and the decoder
consumes every byte of it.

The kernels operate on small state arrays so that compiled pixel loops
elsewhere can drive the same coder as the Python wrappers below.
"""

from __future__ import annotations

import numpy as np
from numba import njit

PRECISION = 16
TOTAL = 1 << PRECISION
TOP = 1 << 24
MASK32 = (1 << 32) - 1

# encoder state slots
E_LOW, E_RANGE, E_CACHE, E_PENDING, E_POS, E_SKIP = range(6)
# decoder state slots
D_CODE, D_RANGE, D_POS, D_END = range(4)

OK = 0
ERR_TRUNCATED = 1
ERR_CORRUPT = 2
ERR_OVERFLOW = 3


class StreamError(ValueError):
    def __init__(self, message: str, offset: int = -1):
        super().__init__(f"{message} (stream offset {offset})" if offset >= 0 else message)
        self.offset = offset


@njit(cache=True)
def enc_init(state):
    state[E_LOW] = 0
    state[E_RANGE] = MASK32
    state[E_CACHE] = 0
    state[E_PENDING] = 1
    state[E_POS] = 0
    state[E_SKIP] = 1


@njit(cache=True)
def _emit(state, buf, byte):
    if state[E_SKIP]:
        state[E_SKIP] = 0
        return OK
    pos = state[E_POS]
    if pos >= buf.shape[0]:
        return ERR_OVERFLOW
    buf[pos] = byte
    state[E_POS] = pos + 1
    return OK


@njit(cache=True)
def _shift_low(state, buf):
    low = state[E_LOW]
    if low < 0xFF000000 or low > MASK32:
        carry = low >> 32
        temp = state[E_CACHE]
        while True:
            if _emit(state, buf, (temp + carry) & 0xFF) != OK:
                return ERR_OVERFLOW
            temp = 0xFF
            state[E_PENDING] -= 1
            if state[E_PENDING] == 0:
                break
        state[E_CACHE] = (low >> 24) & 0xFF
    state[E_PENDING] += 1
    state[E_LOW] = (low & 0x00FFFFFF) << 8
    return OK


@njit(cache=True)
def enc_put(state, buf, cum, freq):
    """Narrow to [cum, cum + freq) out of TOTAL."""
    r = state[E_RANGE] >> PRECISION
    state[E_LOW] += r * cum
    rng = r * freq
    while rng < TOP:
        rng <<= 8
        if _shift_low(state, buf) != OK:
            return ERR_OVERFLOW
    state[E_RANGE] = rng
    return OK


@njit(cache=True)
def enc_finish(state, buf):
    for _ in range(5):
        if _shift_low(state, buf) != OK:
            return ERR_OVERFLOW
    return OK


@njit(cache=True)
def dec_init(state, buf, start, end):
    if end - start < 4:
        state[D_POS] = end
        return ERR_TRUNCATED
    code = 0
    for i in range(4):
        code = (code << 8) | buf[start + i]
    state[D_CODE] = code
    state[D_RANGE] = MASK32
    state[D_POS] = start + 4
    state[D_END] = end
    return OK


@njit(cache=True)
def dec_target(state):
    """Cumulative-frequency target in [0, TOTAL); values >= TOTAL mean a corrupt stream."""
    return state[D_CODE] // (state[D_RANGE] >> PRECISION)


@njit(cache=True)
def dec_consume(state, buf, cum, freq):
    r = state[D_RANGE] >> PRECISION
    state[D_CODE] -= r * cum
    rng = r * freq
    code = state[D_CODE]
    pos = state[D_POS]
    while rng < TOP:
        if pos >= state[D_END]:
            state[D_POS] = pos
            return ERR_TRUNCATED
        code = ((code << 8) | buf[pos]) & MASK32
        pos += 1
        rng <<= 8
    state[D_CODE] = code
    state[D_RANGE] = rng
    state[D_POS] = pos
    if code >= rng:
        return ERR_CORRUPT
    return OK


@njit(cache=True)
def search_cdf(cdf, target):
    """Largest s with cdf[s] <= target, for a nondecreasing cdf ending at TOTAL."""
    lo = 0
    hi = cdf.shape[0] - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if cdf[mid] <= target:
            lo = mid
        else:
            hi = mid
    return lo


@njit(cache=True)
def enc_table_symbols(state, buf, cdfs, symbols):
    """Code symbols[i] under table row cdfs[i]."""
    for i in range(symbols.shape[0]):
        s = symbols[i]
        lo = cdfs[i, s]
        if enc_put(state, buf, lo, cdfs[i, s + 1] - lo) != OK:
            return ERR_OVERFLOW
    return OK


@njit(cache=True)
def dec_table_symbols(state, buf, cdfs, out):
    for i in range(out.shape[0]):
        t = dec_target(state)
        if t >= TOTAL:
            return ERR_CORRUPT
        s = search_cdf(cdfs[i], t)
        out[i] = s
        lo = cdfs[i, s]
        err = dec_consume(state, buf, lo, cdfs[i, s + 1] - lo)
        if err != OK:
            return err
    return OK


def check_cdf(cdf) -> np.ndarray:
    cdf = np.asarray(cdf, dtype=np.int64)
    if cdf.ndim != 1 or cdf.size < 2 or cdf[0] != 0 or cdf[-1] != TOTAL or (np.diff(cdf) < 1).any():
        raise ValueError("cdf must start at 0, end at 2^16 and give every symbol at least one count")
    return cdf


class RangeEncoder:
    def __init__(self, capacity: int = 1024):
        self._state = np.zeros(6, dtype=np.int64)
        self._buf = np.zeros(max(capacity, 16), dtype=np.uint8)
        enc_init(self._state)
        self._done = False

    def _reserve(self, extra: int) -> None:
        need = int(self._state[E_POS]) + extra
        if need > self._buf.size:
            grown = np.zeros(max(need, 2 * self._buf.size), dtype=np.uint8)
            grown[: self._buf.size] = self._buf
            self._buf = grown

    def encode(self, cum: int, freq: int) -> None:
        if freq < 1 or cum < 0 or cum + freq > TOTAL:
            raise ValueError(f"invalid interval [{cum}, {cum + freq}) for total {TOTAL}")
        self._reserve(8 + int(self._state[E_PENDING]))
        enc_put(self._state, self._buf, cum, freq)

    def encode_symbol(self, symbol: int, cdf) -> None:
        lo = int(cdf[symbol])
        self.encode(lo, int(cdf[symbol + 1]) - lo)

    def encode_table(self, cdfs: np.ndarray, symbols: np.ndarray) -> None:
        """Code many symbols, symbols[i] under the table cdfs[i] (TOTAL-normalized)."""
        cdfs = np.ascontiguousarray(cdfs, dtype=np.int64)
        symbols = np.ascontiguousarray(symbols, dtype=np.int64)
        if symbols.size and (symbols.min() < 0 or symbols.max() >= cdfs.shape[1] - 1):
            raise ValueError("symbol outside table alphabet")
        self._reserve(2 * symbols.size + 16 + int(self._state[E_PENDING]))
        if enc_table_symbols(self._state, self._buf, cdfs, symbols) != OK:
            raise StreamError("encoder buffer overflow")

    def finish(self) -> bytes:
        if not self._done:
            self._reserve(16 + int(self._state[E_PENDING]))
            enc_finish(self._state, self._buf)
            self._done = True
        return self._buf[: int(self._state[E_POS])].tobytes()


class RangeDecoder:
    def __init__(self, data: bytes):
        self._buf = np.frombuffer(bytes(data), dtype=np.uint8)
        self._state = np.zeros(4, dtype=np.int64)
        if dec_init(self._state, self._buf, 0, self._buf.size) != OK:
            raise StreamError("stream shorter than the 4-byte preamble", self._buf.size)

    @property
    def position(self) -> int:
        return int(self._state[D_POS])

    def _raise(self, err: int) -> None:
        if err == ERR_TRUNCATED:
            raise StreamError("truncated stream", self.position)
        raise StreamError("corrupt stream", self.position)

    def target(self) -> int:
        t = int(dec_target(self._state))
        if t >= TOTAL:
            raise StreamError("corrupt stream", self.position)
        return t

    def consume(self, cum: int, freq: int) -> None:
        err = dec_consume(self._state, self._buf, cum, freq)
        if err != OK:
            self._raise(err)

    def decode_symbol(self, cdf) -> int:
        cdf = np.asarray(cdf, dtype=np.int64)
        s = int(search_cdf(cdf, self.target()))
        self.consume(int(cdf[s]), int(cdf[s + 1] - cdf[s]))
        return s

    def decode_table(self, cdfs: np.ndarray) -> np.ndarray:
        cdfs = np.ascontiguousarray(cdfs, dtype=np.int64)
        out = np.zeros(cdfs.shape[0], dtype=np.int64)
        err = dec_table_symbols(self._state, self._buf, cdfs, out)
        if err != OK:
            self._raise(err)
        return out

    def check_exhausted(self) -> None:
        if self.position != self._buf.size:
            raise StreamError(f"{self._buf.size - self.position} unread bytes after last symbol", self.position)


def ideal_bits(cdfs: np.ndarray, symbols: np.ndarray) -> float:
    """Shannon cost of coding symbols under their quantized tables."""
    cdfs = np.asarray(cdfs, dtype=np.int64)
    idx = np.arange(len(symbols))
    freq = cdfs[idx, symbols + 1] - cdfs[idx, symbols]
    return float(-np.log2(freq / TOTAL).sum())

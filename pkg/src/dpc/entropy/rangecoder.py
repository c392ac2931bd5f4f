"""32-bit range coder with carry propagation.

Byte-oriented, in the style of the LZMA range coder: ``low`` is kept in 33
bits so that a carry can ripple into bytes already produced, and a cache
byte plus a run of pending 0xFF bytes absorbs it. Probabilities are integer
frequency tables whose total is at most 2**16.
"""

import numpy as np

PROB_BITS = 16
PROB_TOTAL = 1 << PROB_BITS
TOP = 1 << 24
MASK32 = 0xFFFFFFFF


class DecodeError(ValueError):
    """The coded payload is inconsistent with its model or length."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._first = True

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                # the very first cache byte is always 0 and is not emitted
                if self._first:
                    self._first = False
                else:
                    self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & MASK32

    def encode(self, cum_low, freq, total):
        r = self.range // total
        self.low += r * cum_low
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self):
        """Flush the remaining state (the pending cache byte and 4 bytes of ``low``)."""
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self):
        if self.pos < len(self.data):
            b = self.data[self.pos]
        else:
            b = 0
        self.pos += 1
        return b

    def decode(self, cum, total):
        """Decode one symbol given cumulative frequencies ``cum`` (length n+1)."""
        r = self.range // total
        value = min(self.code // r, total - 1)
        sym = int(np.searchsorted(cum, value, side="right")) - 1
        lo, hi = int(cum[sym]), int(cum[sym + 1])
        if hi <= lo:
            raise DecodeError(f"decoded zero-frequency symbol {sym}")
        self.code -= r * lo
        self.range = r * (hi - lo)
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range <<= 8
        return sym

    @property
    def overrun(self):
        """Bytes read beyond the end of the payload (nonzero means the input was short)."""
        return max(0, self.pos - len(self.data))


def quantize_probs(probs):
    """Integer frequencies summing to exactly 2**16, every symbol at least 1.

    Deterministic in the input floats, so encoder and decoder agree whenever
    they see bitwise-identical probabilities.
    """
    p = np.asarray(probs, dtype=np.float64)
    n = p.shape[-1]
    p = np.clip(p, 0.0, None)
    p = p / p.sum()
    freq = np.floor(p * (PROB_TOTAL - n)).astype(np.int64) + 1
    freq[int(np.argmax(freq))] += PROB_TOTAL - int(freq.sum())
    return freq


def cumulative(freq):
    cum = np.zeros(len(freq) + 1, dtype=np.int64)
    np.cumsum(freq, out=cum[1:])
    return cum


class AdaptiveModel:
    """Adaptive frequency table: start flat, add ``increment`` per coded symbol, halve near 2**16."""

    def __init__(self, n, increment=32, limit=PROB_TOTAL):
        self.freq = np.ones(n, dtype=np.int64)
        self.increment = increment
        self.limit = limit

    @property
    def total(self):
        return int(self.freq.sum())

    def cum(self):
        return cumulative(self.freq)

    def update(self, sym):
        self.freq[sym] += self.increment
        if self.freq.sum() > self.limit:
            self.freq = (self.freq + 1) // 2


def ac_encode(symbols, prob_source):
    """Code ``symbols`` where ``prob_source(i, previous)`` gives the distribution of symbol i.

    ``previous`` is the list of symbols coded so far, exactly what the decoder
    will have seen at that point.
    """
    enc = RangeEncoder()
    done = []
    for i, s in enumerate(symbols):
        freq = quantize_probs(prob_source(i, done))
        cum = cumulative(freq)
        enc.encode(int(cum[s]), int(freq[s]), PROB_TOTAL)
        done.append(int(s))
    return enc.finish()


def ac_decode(data, count, prob_source):
    dec = RangeDecoder(data)
    done = []
    for i in range(count):
        cum = cumulative(quantize_probs(prob_source(i, done)))
        done.append(dec.decode(cum, PROB_TOTAL))
    if dec.overrun > 4:
        raise DecodeError(f"payload exhausted: read {dec.pos} of {len(data)} bytes")
    return done


def encode_mask_plane(mask_counts, K):
    """Adaptively code per-location channel counts (values 0..K) in raster order."""
    counts = np.asarray(mask_counts, dtype=np.int64).reshape(-1)
    if counts.size and (counts.min() < 0 or counts.max() > K):
        bad = counts[(counts < 0) | (counts > K)][0]
        raise ValueError(f"mask count {bad} outside [0, {K}]")
    if K == 0:
        return b""
    model = AdaptiveModel(K + 1)
    enc = RangeEncoder()
    for c in counts:
        cum = model.cum()
        enc.encode(int(cum[c]), int(model.freq[c]), int(cum[-1]))
        model.update(c)
    return enc.finish()


def decode_mask_plane(data, shape, K):
    n = int(np.prod(shape))
    if K == 0:
        return np.zeros(shape, dtype=np.int64)
    model = AdaptiveModel(K + 1)
    dec = RangeDecoder(data)
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        cum = model.cum()
        out[i] = dec.decode(cum, int(cum[-1]))
        model.update(out[i])
    if dec.overrun > 4:
        raise DecodeError(f"mask plane exhausted: read {dec.pos} of {len(data)} bytes")
    return out.reshape(shape)

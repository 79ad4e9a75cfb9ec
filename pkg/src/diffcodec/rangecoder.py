"""Deterministic byte-oriented range coder.

32-bit low/range state, byte-wise (Subbotin style) renormalization and
16-bit probability precision: every alphabet is described by a cumulative
frequency row summing to exactly ``TOTAL`` = 2**16.  All arithmetic is
integer-only, so the emitted bytes are identical across runs and platforms.

The hot loops are numba-compiled.  Encoding and decoding are exposed as
incremental primitives operating on a small state vector so callers can
interleave probability-model updates (quadtree groups) with coding.
"""

import numpy as np
from numba import njit

PRECISION = 32
MASK = np.uint64(0xFFFFFFFF)
TOP = np.uint64(1 << 24)
BOT = np.uint64(1 << 16)
TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS

# Decoder error codes
OK = 0
EXHAUSTED = -1


def new_encoder_state():
    # [low, range]
    return np.array([0, int(MASK)], dtype=np.uint64)


def new_decoder_state():
    # [low, code, range, pos]
    return np.zeros(4, dtype=np.uint64)


def alloc_output(n_symbols):
    """Worst-case output buffer for ``n_symbols`` coded symbols."""
    return np.empty(8 * n_symbols + 16, dtype=np.uint8)


@njit(cache=True)
def _renorm_encode(low, rng, out, pos):
    while (low ^ (low + rng)) < TOP or rng < BOT:
        if (low ^ (low + rng)) >= TOP:
            # Underflow: clamp range down to the next 2**16 boundary.
            rng = (np.uint64(0) - low) & (BOT - np.uint64(1))
        out[pos] = np.uint8(low >> np.uint64(24))
        pos += 1
        low = (low << np.uint64(8)) & MASK
        rng = (rng << np.uint64(8)) & MASK
    return low, rng, pos


@njit(cache=True)
def enc_run(state, out, pos, sym_idx, cdf):
    """Encode sym_idx[i] with cumulative row cdf[i]; returns new byte pos."""
    low = state[0]
    rng = state[1]
    for i in range(sym_idx.shape[0]):
        s = sym_idx[i]
        c_lo = np.uint64(cdf[i, s])
        c_hi = np.uint64(cdf[i, s + 1])
        r = rng >> np.uint64(TOTAL_BITS)
        low = (low + c_lo * r) & MASK
        rng = (c_hi - c_lo) * r
        low, rng, pos = _renorm_encode(low, rng, out, pos)
    state[0] = low
    state[1] = rng
    return pos


@njit(cache=True)
def enc_finish(state, out, pos):
    low = state[0]
    for _ in range(4):
        out[pos] = np.uint8(low >> np.uint64(24))
        pos += 1
        low = (low << np.uint64(8)) & MASK
    return pos


@njit(cache=True)
def dec_init(data, state):
    if data.shape[0] < 4:
        return EXHAUSTED
    code = np.uint64(0)
    for i in range(4):
        code = (code << np.uint64(8)) | np.uint64(data[i])
    state[0] = np.uint64(0)          # low
    state[1] = code                  # code
    state[2] = MASK                  # range
    state[3] = np.uint64(4)          # pos
    return OK


@njit(cache=True)
def dec_run(data, state, cdf, out_idx):
    """Decode one symbol per cdf row into out_idx; mirrors enc_run."""
    low = state[0]
    code = state[1]
    rng = state[2]
    pos = state[3]
    n = np.uint64(data.shape[0])
    for i in range(cdf.shape[0]):
        r = rng >> np.uint64(TOTAL_BITS)
        v = (code - low) // r
        if v >= np.uint64(TOTAL):
            v = np.uint64(TOTAL - 1)
        row = cdf[i]
        # binary search: largest s with row[s] <= v
        lo = 0
        hi = row.shape[0] - 1
        while lo + 1 < hi:
            mid = (lo + hi) // 2
            if np.uint64(row[mid]) <= v:
                lo = mid
            else:
                hi = mid
        s = lo
        c_lo = np.uint64(row[s])
        c_hi = np.uint64(row[s + 1])
        low = (low + c_lo * r) & MASK
        rng = (c_hi - c_lo) * r
        while (low ^ (low + rng)) < TOP or rng < BOT:
            if (low ^ (low + rng)) >= TOP:
                rng = (np.uint64(0) - low) & (BOT - np.uint64(1))
            if pos >= n:
                state[0] = low
                state[1] = code
                state[2] = rng
                state[3] = pos
                return EXHAUSTED
            code = ((code << np.uint64(8)) | np.uint64(data[pos])) & MASK
            pos += np.uint64(1)
            low = (low << np.uint64(8)) & MASK
            rng = (rng << np.uint64(8)) & MASK
        out_idx[i] = s
    state[0] = low
    state[1] = code
    state[2] = rng
    state[3] = pos
    return OK


def encode_rows(sym_idx, cdf):
    """One-shot encode of index array against per-symbol cumulative rows."""
    state = new_encoder_state()
    out = alloc_output(sym_idx.shape[0])
    pos = enc_run(state, out, 0, sym_idx, cdf)
    pos = enc_finish(state, out, pos)
    return out[:pos].tobytes()


def decode_rows(data, cdf):
    """One-shot decode; returns (index array, ok flag)."""
    buf = np.frombuffer(data, dtype=np.uint8)
    state = new_decoder_state()
    if dec_init(buf, state) != OK:
        return None, False
    out = np.empty(cdf.shape[0], dtype=np.int64)
    if dec_run(buf, state, cdf, out) != OK:
        return None, False
    return out, True

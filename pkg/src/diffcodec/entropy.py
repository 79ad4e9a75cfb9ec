"""Lossless symbol coding for quantized latents.

Pieces:

* a 2x2-phase quadtree schedule: positions are split into four spatial
  groups coded in the fixed order [0, 3, 1, 2], so the probability model
  for a later group may condition on already-decoded earlier groups;
* discretized-Gaussian probability models with a scale floor and a pmf
  floor of 2**-16;
* exact lossless encode/decode against those models through the range
  coder, with an escape bucket for symbols outside the coding window;
* analytic bit estimation used for rate accounting.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import ndtr

from . import rangecoder as rc
from .errors import RejectedInputError, StreamExhaustedError

SYMBOL_MIN = -255
SYMBOL_MAX = 255
NUM_SYMBOLS = SYMBOL_MAX - SYMBOL_MIN + 1  # 511
SCALE_FLOOR = 1e-3
PMF_FLOOR = 2.0 ** -16
GROUP_ORDER = (0, 3, 1, 2)

# Flat model over 256 values; escapes code a 16-bit signed raw in two passes.
_FLAT256 = (np.arange(257, dtype=np.uint32) * np.uint32(256))
_RAW_MIN = -32768
_RAW_MAX = 32767


@dataclass(frozen=True)
class Bitchunk:
    data: bytes
    bit_count: int

    def __len__(self):
        return len(self.data)


@dataclass(frozen=True)
class GaussianParams:
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.scale.shape:
            raise RejectedInputError("mean/scale shape mismatch")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.scale))):
            raise RejectedInputError("non-finite Gaussian parameters")


@dataclass(frozen=True)
class QuadtreeSchedule:
    group_masks: np.ndarray  # bool, (4, h, w)
    order: tuple = GROUP_ORDER

    @property
    def shape(self):
        return self.group_masks.shape[1:]


def build_quadtree_schedule(h, w):
    """Split an h x w grid into the four 2x2 phase groups.

    Position (i, j) belongs to group 2*(i % 2) + (j % 2); groups are coded
    in the order [0, 3, 1, 2] (diagonal pairs first).
    """
    if h % 2 != 0 or w % 2 != 0:
        raise RejectedInputError(f"quadtree schedule needs even dims, got {(h, w)}")
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    gid = 2 * (ii % 2) + (jj % 2)
    masks = np.stack([gid == k for k in range(4)])
    return QuadtreeSchedule(group_masks=masks)


def build_single_group_schedule(h, w):
    """Degenerate schedule: all positions in one group (no conditioning).

    Used for hyper latents, whose factorized model has no spatial
    conditioning and whose dims may be odd.
    """
    masks = np.zeros((4, h, w), dtype=bool)
    masks[0] = True
    return QuadtreeSchedule(group_masks=masks, order=(0, 1, 2, 3))


def discretized_gaussian_pmf(symbol, mean, scale):
    """P(symbol) under the rounded Gaussian, floored at 2**-16."""
    symbol = np.asarray(symbol, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    scale = np.maximum(np.asarray(scale, dtype=np.float64), SCALE_FLOOR)
    p = ndtr((symbol - mean + 0.5) / scale) - ndtr((symbol - mean - 0.5) / scale)
    return np.maximum(p, PMF_FLOOR)


def estimate_bits(grid, params):
    """Analytic code length: sum of -log2 pmf over all symbols."""
    grid = np.asarray(grid)
    if grid.shape != params.mean.shape:
        raise RejectedInputError("grid/params shape mismatch")
    p = discretized_gaussian_pmf(grid, params.mean, params.scale)
    return float(-np.log2(p).sum())


@njit(cache=True)
def _fix_row_sums(freq):
    """Adjust integer frequency rows in place so each sums to 2**16."""
    total = 1 << 16
    for i in range(freq.shape[0]):
        s = 0
        for j in range(freq.shape[1]):
            s += freq[i, j]
        d = total - s
        while d != 0:
            am = 0
            best = freq[i, 0]
            for j in range(1, freq.shape[1]):
                if freq[i, j] > best:
                    best = freq[i, j]
                    am = j
            if d > 0:
                freq[i, am] += d
                d = 0
            else:
                take = min(-d, freq[i, am] - 1)
                if take == 0:
                    break
                freq[i, am] -= take
                d += take


def _coding_tables(mean, scale):
    """Quantized cumulative rows for a batch of positions.

    Returns (cdf rows (M, W+2), window base per position, escape index W).
    The window is centered on round(mean) and sized from the largest scale
    in the batch; in-range symbols outside the window go through the
    escape bucket, preserving exact round trips.
    """
    mean = np.asarray(mean, dtype=np.float64).ravel()
    scale = np.maximum(np.asarray(scale, dtype=np.float64).ravel(), SCALE_FLOOR)
    half = int(np.ceil(6.0 * scale.max())) + 1
    half = min(max(half, 8), (NUM_SYMBOLS - 1) // 2)
    width = 2 * half + 1
    centers = np.rint(np.clip(mean, SYMBOL_MIN, SYMBOL_MAX))
    base = np.clip(centers - half, SYMBOL_MIN, SYMBOL_MAX - width + 1)
    edges = base[:, None] - 0.5 + np.arange(width + 1)[None, :]
    cdf_cont = ndtr((edges - mean[:, None]) / scale[:, None])
    p = np.diff(cdf_cont, axis=1)
    esc = np.maximum(1.0 - p.sum(axis=1), 0.0)
    freq = np.empty((mean.shape[0], width + 1), dtype=np.int64)
    freq[:, :width] = np.maximum(1, np.floor(p * 65536.0)).astype(np.int64)
    freq[:, width] = np.maximum(1, np.floor(esc * 65536.0)).astype(np.int64)
    _fix_row_sums(freq)
    cdf = np.zeros((mean.shape[0], width + 2), dtype=np.uint32)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return cdf, base.astype(np.int64), width


def _as_grid3d(grid):
    grid = np.asarray(grid)
    if grid.ndim == 2:
        return grid[None], True
    if grid.ndim == 3:
        return grid, False
    raise RejectedInputError(f"symbol grid must be 2D or 3D, got shape {grid.shape}")


def _group_values(arr3d, mask):
    # channel-major, row-major within a group
    return arr3d[:, mask].ravel()


def _constant_provider(params):
    def provider(k, decoded):
        return params

    return provider


def encode_grid(grid, provider, schedule):
    """Entropy-encode a symbol grid group by group.

    ``provider(k, decoded_so_far)`` must return GaussianParams of full grid
    shape for quadtree group ``k``; ``decoded_so_far`` holds the symbols of
    the groups already coded (zeros elsewhere).  The decoder mirror calls
    the same provider with identical inputs.
    """
    grid3d, _ = _as_grid3d(grid)
    if grid3d.shape[1:] != schedule.shape:
        raise RejectedInputError("grid does not match schedule dims")
    if not np.issubdtype(grid3d.dtype, np.integer):
        raise RejectedInputError("symbol grid must be integer")
    if grid3d.min(initial=0) < _RAW_MIN or grid3d.max(initial=0) > _RAW_MAX:
        raise RejectedInputError("symbol outside raw-codable range")
    if grid3d.size == 0:
        return Bitchunk(b"", 0)

    state = rc.new_encoder_state()
    out = rc.alloc_output(grid3d.size + 8)
    pos = 0
    decoded = np.zeros_like(grid3d)
    for k in schedule.order:
        mask = schedule.group_masks[k]
        if not mask.any():
            continue
        vals = _group_values(grid3d, mask).astype(np.int64)
        params = provider(k, decoded)
        mean = _group_values(np.broadcast_to(params.mean, grid3d.shape), mask)
        scl = _group_values(np.broadcast_to(params.scale, grid3d.shape), mask)
        cdf, base, width = _coding_tables(mean, scl)
        idx = vals - base
        escaped = (idx < 0) | (idx >= width)
        idx[escaped] = width
        pos = rc.enc_run(state, out, pos, idx, cdf)
        if escaped.any():
            raw = (vals[escaped] - _RAW_MIN).astype(np.int64)
            flat = np.broadcast_to(_FLAT256, (raw.shape[0], 257))
            pos = rc.enc_run(state, out, pos, raw >> 8, flat)
            pos = rc.enc_run(state, out, pos, raw & 0xFF, flat)
        decoded[:, mask] = vals.reshape(grid3d.shape[0], -1)
    pos = rc.enc_finish(state, out, pos)
    return Bitchunk(out[:pos].tobytes(), 8 * pos)


def decode_grid(chunk, shape, provider, schedule, frame_index=None):
    """Exact inverse of :func:`encode_grid` for the given grid shape."""
    shape = tuple(shape)
    squeeze = len(shape) == 2
    if squeeze:
        shape = (1,) + shape
    if shape[1:] != schedule.shape:
        raise RejectedInputError("shape does not match schedule dims")
    decoded = np.zeros(shape, dtype=np.int64)
    if int(np.prod(shape)) == 0:
        return decoded[0] if squeeze else decoded
    data = np.frombuffer(chunk.data, dtype=np.uint8)
    state = rc.new_decoder_state()
    if rc.dec_init(data, state) != rc.OK:
        raise StreamExhaustedError("bitstream too short for coder init",
                                   frame_index=frame_index)
    for k in schedule.order:
        mask = schedule.group_masks[k]
        if not mask.any():
            continue
        params = provider(k, decoded)
        mean = _group_values(np.broadcast_to(params.mean, shape), mask)
        scl = _group_values(np.broadcast_to(params.scale, shape), mask)
        cdf, base, width = _coding_tables(mean, scl)
        idx = np.empty(mean.shape[0], dtype=np.int64)
        if rc.dec_run(data, state, cdf, idx) != rc.OK:
            raise StreamExhaustedError("bitstream exhausted mid-group",
                                       frame_index=frame_index)
        vals = base + idx
        escaped = idx >= width
        n_esc = int(escaped.sum())
        if n_esc:
            flat = np.broadcast_to(_FLAT256, (n_esc, 257))
            hi = np.empty(n_esc, dtype=np.int64)
            lo = np.empty(n_esc, dtype=np.int64)
            if rc.dec_run(data, state, flat, hi) != rc.OK:
                raise StreamExhaustedError("bitstream exhausted in escape",
                                           frame_index=frame_index)
            if rc.dec_run(data, state, flat, lo) != rc.OK:
                raise StreamExhaustedError("bitstream exhausted in escape",
                                           frame_index=frame_index)
            raw = (hi << 8) | lo
            vals[escaped] = raw + _RAW_MIN
        decoded[:, mask] = vals.reshape(shape[0], -1)
    return decoded[0] if squeeze else decoded


def encode_symbols(grid, params, schedule):
    """Encode a grid against fixed (non-conditioned) Gaussian params."""
    grid3d, _ = _as_grid3d(grid)
    if params.mean.shape not in (grid3d.shape, np.asarray(grid).shape):
        raise RejectedInputError("params shape must match grid shape")
    if np.any(params.scale < SCALE_FLOOR):
        raise RejectedInputError("scale below floor")
    p = GaussianParams(np.broadcast_to(np.asarray(params.mean), grid3d.shape),
                       np.broadcast_to(np.asarray(params.scale), grid3d.shape))
    return encode_grid(grid, _constant_provider(p), schedule)


def decode_symbols(chunk, params, schedule, shape=None, frame_index=None):
    """Inverse of :func:`encode_symbols`; ``params`` may be a provider."""
    if callable(params):
        if shape is None:
            raise RejectedInputError("shape required with a params provider")
        return decode_grid(chunk, shape, params, schedule, frame_index)
    if shape is None:
        shape = params.mean.shape
    shape3 = (1,) + tuple(shape) if len(shape) == 2 else tuple(shape)
    p = GaussianParams(np.broadcast_to(np.asarray(params.mean), shape3),
                       np.broadcast_to(np.asarray(params.scale), shape3))
    return decode_grid(chunk, shape, _constant_provider(p), schedule, frame_index)

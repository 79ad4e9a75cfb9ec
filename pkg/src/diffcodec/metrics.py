"""Quality metrics, Bjontegaard deltas and rate-distortion reporting."""

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.signal import fftconvolve

from .errors import RejectedInputError

PSNR_CAP = 100.0

_MSSSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
_MSSSIM_LEVELS = 5
_WIN_SIZE = 11
_WIN_SIGMA = 1.5


def _as_image(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise RejectedInputError(f"expected CxHxW image, got shape {a.shape}")
    return a


def psnr(a, b):
    """PSNR in dB for [0,1] images; capped at 100 dB for identical inputs."""
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise RejectedInputError("image shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def _gauss_win():
    x = np.arange(_WIN_SIZE) - (_WIN_SIZE - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * _WIN_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


_WIN2D = _gauss_win()


def _ssim_components(a, b):
    """Per-channel mean SSIM and contrast-structure term (valid windows)."""
    k1, k2 = 0.01, 0.03
    c1, c2 = k1 ** 2, k2 ** 2
    ssims, css = [], []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mx = fftconvolve(x, _WIN2D, mode="valid")
        my = fftconvolve(y, _WIN2D, mode="valid")
        mxx = fftconvolve(x * x, _WIN2D, mode="valid")
        myy = fftconvolve(y * y, _WIN2D, mode="valid")
        mxy = fftconvolve(x * y, _WIN2D, mode="valid")
        vx = np.maximum(mxx - mx * mx, 0.0)
        vy = np.maximum(myy - my * my, 0.0)
        cxy = mxy - mx * my
        cs = (2 * cxy + c2) / (vx + vy + c2)
        s = ((2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1)) * cs
        ssims.append(s.mean())
        css.append(cs.mean())
    return np.mean(ssims), np.mean(css)


def _downsample2(a):
    h, w = a.shape[1] // 2 * 2, a.shape[2] // 2 * 2
    a = a[:, :h, :w]
    return 0.25 * (a[:, ::2, ::2] + a[:, 1::2, ::2] + a[:, ::2, 1::2] + a[:, 1::2, 1::2])


def ms_ssim(a, b):
    """Standard 5-scale multi-scale SSIM for [0,1] images."""
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise RejectedInputError("image shape mismatch")
    min_dim = _WIN_SIZE * 2 ** (_MSSSIM_LEVELS - 1)
    if min(a.shape[1], a.shape[2]) < min_dim:
        raise RejectedInputError(
            f"images smaller than {min_dim}px cannot be scored at 5 scales")
    vals = []
    for lvl in range(_MSSSIM_LEVELS):
        s, cs = _ssim_components(a, b)
        vals.append(s if lvl == _MSSSIM_LEVELS - 1 else cs)
        if lvl < _MSSSIM_LEVELS - 1:
            a, b = _downsample2(a), _downsample2(b)
    vals = np.maximum(np.array(vals), 0.0)
    return float(np.prod(vals ** _MSSSIM_WEIGHTS))


@dataclass(frozen=True)
class RdPoint:
    bpp: float
    quality: float
    metric_name: str = "psnr"
    higher_is_better: bool = True

    def __post_init__(self):
        if self.bpp <= 0:
            raise RejectedInputError("bpp must be positive")


@dataclass
class RdCurve:
    points: list

    def __post_init__(self):
        bpps = [p.bpp for p in self.points]
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise RejectedInputError("rate points must strictly increase")

    @property
    def bpp(self):
        return np.array([p.bpp for p in self.points])

    def oriented_quality(self):
        """Quality with lower-is-better metrics negated (so larger = better)."""
        sign = 1.0 if self.points[0].higher_is_better else -1.0
        return sign * np.array([p.quality for p in self.points])

    def to_json(self):
        return json.dumps([{"bpp": p.bpp, "metric_name": p.metric_name,
                            "value": p.quality,
                            "higher_is_better": p.higher_is_better}
                           for p in self.points])

    @classmethod
    def from_json(cls, text):
        pts = [RdPoint(bpp=d["bpp"], quality=d["value"],
                       metric_name=d.get("metric_name", "psnr"),
                       higher_is_better=d.get("higher_is_better", True))
               for d in json.loads(text)]
        return cls(points=pts)


@dataclass(frozen=True)
class BdResult:
    """BD computation outcome: a value, 'na' (no overlap) or 'non_monotone'."""
    kind: str  # "ok" | "na" | "non_monotone"
    value: float | None = None

    def __str__(self):
        if self.kind == "ok":
            return f"{self.value:.2f}"
        return "N/A" if self.kind == "na" else "--"


def _bd_prepare(curve, min_points=4):
    if len(curve.points) < min_points:
        raise RejectedInputError(f"BD computation needs >= {min_points} points")
    q = curve.oriented_quality()
    if np.any(np.diff(q) <= 0):
        return None, None
    return q, np.log10(curve.bpp)


def bd_rate(anchor, test):
    """Average rate difference (%) of test vs anchor at equal quality.

    Piecewise-cubic (PCHIP) interpolation of log-rate over quality,
    integrated over the overlapping quality range.
    """
    qa, ra = _bd_prepare(anchor)
    qt, rt = _bd_prepare(test)
    if qa is None or qt is None:
        return BdResult("non_monotone")
    lo, hi = max(qa.min(), qt.min()), min(qa.max(), qt.max())
    if lo >= hi:
        return BdResult("na")
    fa = PchipInterpolator(qa, ra).antiderivative()
    ft = PchipInterpolator(qt, rt).antiderivative()
    avg = ((ft(hi) - ft(lo)) - (fa(hi) - fa(lo))) / (hi - lo)
    return BdResult("ok", float((10.0 ** avg - 1.0) * 100.0))


def bd_metric(anchor, test):
    """Average quality difference of test vs anchor at equal rate."""
    qa, ra = _bd_prepare(anchor)
    qt, rt = _bd_prepare(test)
    if qa is None or qt is None:
        return BdResult("non_monotone")
    lo, hi = max(ra.min(), rt.min()), min(ra.max(), rt.max())
    if lo >= hi:
        return BdResult("na")
    fa = PchipInterpolator(ra, qa).antiderivative()
    ft = PchipInterpolator(rt, qt).antiderivative()
    avg = ((ft(hi) - ft(lo)) - (fa(hi) - fa(lo))) / (hi - lo)
    return BdResult("ok", float(avg))


def cosine_profile(frame_buffers):
    """Mean cosine similarity, per trajectory step, of predicted noise-free
    latents between adjacent frames.

    ``frame_buffers`` is a sequence (one entry per frame) of per-step latent
    sequences (DiffusionBuffer instances or lists of tensors/arrays).
    """
    def slots(b):
        return b.slots if hasattr(b, "slots") else list(b)

    if len(frame_buffers) < 2:
        raise RejectedInputError("need at least two frames")
    steps = len(slots(frame_buffers[0]))
    sims = np.zeros(steps)
    for ds in range(steps):
        vals = []
        for prev, cur in zip(frame_buffers, frame_buffers[1:]):
            u = np.asarray(slots(prev)[ds], dtype=np.float64).ravel()
            v = np.asarray(slots(cur)[ds], dtype=np.float64).ravel()
            denom = np.linalg.norm(u) * np.linalg.norm(v)
            vals.append(float(u @ v / denom) if denom > 0 else 0.0)
        sims[ds] = np.mean(vals)
    return sims


def median_time(fn, repeats=20, warmup=2):
    """Median wall time of fn() over repeats, warmup excluded."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


# ---------------------------------------------------------------------------
# Report emitters
# ---------------------------------------------------------------------------

def _row_values(row, header):
    return [row[h] for h in header] if isinstance(row, dict) else list(row)


def rows_to_csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    w.writerows(_row_values(r, header) for r in rows)
    return buf.getvalue()


def rows_to_markdown(rows, header):
    lines = ["| " + " | ".join(str(h) for h in header) + " |",
             "| " + " | ".join("---" for _ in header) + " |"]
    for r in rows:
        lines.append("| " + " | ".join(str(c) for c in _row_values(r, header))
                     + " |")
    return "\n".join(lines) + "\n"


# Optional perceptual-metric plug-in registry: fn(frame_a, frame_b) -> float
_METRIC_PLUGINS = {}


def register_metric(name, fn, higher_is_better=True):
    _METRIC_PLUGINS[name] = (fn, higher_is_better)


def get_metric(name):
    if name == "psnr":
        return psnr, True
    if name == "ms_ssim":
        return ms_ssim, True
    if name in _METRIC_PLUGINS:
        return _METRIC_PLUGINS[name]
    raise RejectedInputError(f"unknown metric {name!r}")

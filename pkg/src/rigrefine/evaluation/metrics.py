"""Image metrics, metric vectors, sign agreement and majority-vote selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionMismatch

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# +1: higher is better, -1: lower is better
ORIENTATION = {
    "reproj_error": -1,
    "track_length": +1,
    "psnr": +1,
    "ssim": +1,
    "p2m_precision": +1,
    "p2m_mean": -1,
}
METRICS = tuple(ORIENTATION)


def psnr(rendered, reference) -> float:
    a, b = _pair(rendered, reference)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of an (H, W) image with the 1D kernel ``g``."""
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(rendered, reference) -> float:
    """Mean SSIM over all window positions fully inside the image, averaged over channels."""
    a, b = _pair(rendered, reference)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise DimensionMismatch(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def nvs_metrics(rendered, reference) -> tuple[float, float]:
    """(PSNR dB, SSIM) of a rendered image against its reference, both in [0, 1]."""
    return psnr(rendered, reference), ssim(rendered, reference)


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


@dataclass
class MetricVector:
    reproj_error: float = float("nan")
    track_length: float = float("nan")
    psnr: float = float("nan")
    ssim: float = float("nan")
    p2m_precision: float = float("nan")
    p2m_mean: float = float("nan")

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    def oriented_delta(self, original: "MetricVector") -> dict[str, float]:
        """Improvement of ``self`` over ``original`` per metric; positive means better."""
        return {m: ORIENTATION[m] * (getattr(self, m) - getattr(original, m)) for m in METRICS}


@dataclass
class SignAgreementMatrix:
    values: np.ndarray
    labels: list

    def entry(self, a: str, b: str) -> float:
        return float(self.values[self.labels.index(a), self.labels.index(b)])

    def as_dict(self) -> dict:
        return {"labels": list(self.labels), "values": self.values.tolist()}


def _sgn(x: np.ndarray) -> np.ndarray:
    # zero counts as "no regression"
    return np.where(x >= 0, 1, -1)


def sign_agreement(deltas, labels=None) -> SignAgreementMatrix:
    """Fraction of scenes on which each metric pair agrees about improvement.

    ``deltas`` is (n_scenes, n_metrics) of oriented improvements, or a list of
    per-scene dicts keyed by metric name. NaN entries (metric unavailable)
    are left out pairwise; a pair with no common scene scores NaN.
    """
    if isinstance(deltas, (list, tuple)) and deltas and isinstance(deltas[0], dict):
        labels = list(labels or deltas[0])
        deltas = [[d[m] for m in labels] for d in deltas]
    d = np.asarray(deltas, dtype=float)
    if d.ndim != 2 or d.shape[0] < 1:
        raise ValueError("deltas must be a non-empty (n_scenes, n_metrics) table")
    labels = list(labels) if labels is not None else [str(i) for i in range(d.shape[1])]
    s = _sgn(d)
    ok = np.isfinite(d)
    m = d.shape[1]
    out = np.ones((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            both = ok[:, i] & ok[:, j]
            val = float(np.mean(s[both, i] == s[both, j])) if both.any() else float("nan")
            out[i, j] = out[j, i] = val
    return SignAgreementMatrix(out, labels)


def select_poses(deltas, orientations=None) -> list[str]:
    """Per-scene majority vote: "optimized" when strictly more than half the metrics improved.

    ``deltas`` holds raw (optimized - original) differences per scene and
    metric; ``orientations`` (+1 higher-better, -1 lower-better) turns them
    into improvements. A zero difference is not an improvement, and ties go
    to "original".
    """
    d = np.asarray(deltas, dtype=float)
    if d.ndim == 1:
        d = d[None, :]
    o = np.ones(d.shape[1]) if orientations is None else np.asarray(orientations, dtype=float)
    improved = np.nan_to_num(d * o, nan=0.0) > 0
    counted = np.isfinite(d).sum(axis=1)
    return ["optimized" if 2 * improved[k].sum() > counted[k] else "original" for k in range(d.shape[0])]

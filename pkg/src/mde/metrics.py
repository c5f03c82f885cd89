"""Image-quality metrics for completions and generated samples."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    psnr_full: float
    psnr_masked_region: float
    ssim: float
    inception_score: float | None = None

    def as_row(self) -> dict:
        return asdict(self)


def psnr(a: np.ndarray, b: np.ndarray, region_mask: np.ndarray | None = None,
         cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range.

    ``region_mask`` (broadcastable to the images, nonzero = included)
    restricts the mean squared error to a subset of values.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if region_mask is not None:
        sel = np.broadcast_to(np.asarray(region_mask) > 0, a.shape)
        if not sel.any():
            raise MetricError("pSNR region is empty")
        mse = float(sq[sel].mean())
    else:
        mse = float(sq.mean())
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def _gray(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x.mean(axis=0)
    if x.ndim == 2:
        return x
    raise MetricError(f"expected a (C, H, W) or (H, W) image, got {x.shape}")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over all fully-contained 11x11 windows.

    Colour images are averaged across channels first.
    """
    x, y = _gray(a), _gray(b)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise MetricError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if np.array_equal(x, y):
        return 1.0
    g = _gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.clip((num / den).mean(), -1.0, 1.0))


def inception_score(images, classifier: Callable[[np.ndarray], np.ndarray],
                    splits: int = 10) -> tuple[float, float]:
    """``exp(E_x KL(p(y|x) || p(y)))`` averaged over ``splits`` chunks.

    ``classifier`` maps a batch of images to rows of class probabilities.
    Returns ``(mean, std)`` across splits.
    """
    images = np.asarray(images)
    n = len(images)
    if splits < 1 or n < splits:
        raise MetricError(f"{n} images cannot fill {splits} splits")
    # extended precision keeps exp(log K) from drifting off K before the final rounding
    probs = np.asarray(classifier(images), dtype=np.longdouble)
    if probs.shape[0] != n or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise MetricError("classifier must return one probability vector per image")
    scores = []
    for part in np.array_split(probs, splits):
        marginal = part.mean(axis=0, keepdims=True)
        # zero-probability classes contribute nothing; the marginal is positive elsewhere
        pos = part > 0
        marg = np.broadcast_to(marginal, part.shape)
        terms = np.where(pos, part * (np.log(np.where(pos, part, 1.0))
                                      - np.log(np.where(pos, marg, 1.0))), 0.0)
        scores.append(float(np.exp(terms.sum(axis=1).mean())))
    return float(np.mean(scores)), float(np.std(scores))


def evaluate_completion(completed: np.ndarray, truth: np.ndarray,
                        mask: np.ndarray) -> MetricReport:
    """Average metrics over a batch; the masked region is where ``mask`` hides values."""
    full, region, ss = [], [], []
    for c, t, m in zip(completed, truth, mask):
        full.append(psnr(c, t))
        hidden = m < 0.5
        region.append(psnr(c, t, hidden) if hidden.any() else PSNR_CAP_DB)
        ss.append(ssim(c, t))
    return MetricReport(float(np.mean(full)), float(np.mean(region)), float(np.mean(ss)))

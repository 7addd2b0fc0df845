"""Convergence and image-quality metrics.

Relative error, relative data fit and relative TV track a run against
the ground truth; SSIM/PSNR/MSE/max-difference grade individual images.
Note the data-fit metric uses a squared numerator over a squared
denominator, which is asymmetric on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["MetricReport", "relative_metrics", "quality_metrics", "ssim"]


def relative_metrics(f_n, f_truth, g, op, gradop=None):
    """(relative error, relative data fit, relative TV).

    Undefined quantities (zero-norm reference, or no gradient operator
    for the TV term) are reported as NaN rather than zero.
    """
    f_n = np.asarray(f_n, dtype=float)
    f_truth = np.asarray(f_truth, dtype=float)
    g = np.asarray(g, dtype=float)

    truth_norm = np.linalg.norm(f_truth)
    re = np.linalg.norm(f_n - f_truth) / truth_norm if truth_norm > 0 else math.nan

    g_norm_sq = float(g @ g)
    rd = (np.linalg.norm(op.forward(f_n) - g) ** 2 / g_norm_sq
          if g_norm_sq > 0 else math.nan)

    if gradop is None:
        rt = math.nan
    else:
        tv_truth = np.abs(gradop.apply(f_truth)).sum()
        rt = (abs(np.abs(gradop.apply(f_n)).sum() - tv_truth) / tv_truth
              if tv_truth > 0 else math.nan)
    return re, rd, rt


def _sliding_mean(a, w):
    """Mean over every w-by-w window (stride 1), via an integral image."""
    acc = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    acc[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    total = acc[w:, w:] - acc[:-w, w:] - acc[w:, :-w] + acc[:-w, :-w]
    return total / (w * w)


def ssim(img, ref, window=8, peak=1.0):
    """Mean structural similarity over uniform sliding windows."""
    img = np.asarray(img, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if img.shape != ref.shape or img.ndim != 2:
        raise ValueError("ssim expects two 2-D images of identical shape")
    w = min(window, *img.shape)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu1 = _sliding_mean(img, w)
    mu2 = _sliding_mean(ref, w)
    # clamp variances: integral-image cancellation may leave tiny negatives
    var1 = np.maximum(_sliding_mean(img * img, w) - mu1 ** 2, 0.0)
    var2 = np.maximum(_sliding_mean(ref * ref, w) - mu2 ** 2, 0.0)
    cov = _sliding_mean(img * ref, w) - mu1 * mu2
    score = ((2 * mu1 * mu2 + c1) * (2 * cov + c2)
             / ((mu1 ** 2 + mu2 ** 2 + c1) * (var1 + var2 + c2)))
    return float(score.mean())


def quality_metrics(img, ref, peak=1.0):
    """(1 - SSIM, PSNR in dB, MSE, max pixel difference).

    PSNR uses the fixed peak value (images live in [0, 1]) and is +inf
    for identical images.
    """
    img = np.asarray(img, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if img.shape != ref.shape:
        raise ValueError(f"image shapes differ: {img.shape} vs {ref.shape}")
    diff = img - ref
    mse = float(np.mean(diff * diff))
    psnr = math.inf if mse == 0.0 else 10.0 * math.log10(peak * peak / mse)
    max_diff = float(np.abs(diff).max()) if diff.size else 0.0
    return 1.0 - ssim(img, ref, peak=peak), psnr, mse, max_diff


@dataclass
class MetricReport:
    """Run-level metric record: the three relative quantities plus the
    per-image quality tuples, serialized as a single CSV row."""

    re: float
    rd: float
    rt: float
    images: dict = field(default_factory=dict)  # label -> (1-ssim, psnr, mse, max_diff)

    def add_image(self, label, img, ref, peak=1.0):
        self.images[label] = quality_metrics(img, ref, peak=peak)

    def csv_header(self):
        cols = ["re", "rd", "rt"]
        for label in self.images:
            cols += [f"{label}_one_minus_ssim", f"{label}_psnr_db",
                     f"{label}_mse", f"{label}_max_diff"]
        return ",".join(cols)

    def csv_row(self):
        vals = [self.re, self.rd, self.rt]
        for quad in self.images.values():
            vals.extend(quad)
        return ",".join(repr(float(v)) for v in vals)

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.csv_header() + "\n")
            fh.write(self.csv_row() + "\n")

"""Independent reference implementations used to freeze expected test values.

Everything here is deliberately loop-based and separate from the library's
vectorized code paths.
"""

import numpy as np

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def ssim_reference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM with a 3x3 uniform window and edge replication."""
    c, h, w = a.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            vals = np.zeros(c)
            for ch in range(c):
                wa, wb = [], []
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy = min(max(y + dy, 0), h - 1)
                        xx = min(max(x + dx, 0), w - 1)
                        wa.append(a[ch, yy, xx])
                        wb.append(b[ch, yy, xx])
                wa, wb = np.array(wa), np.array(wb)
                mu_a, mu_b = wa.mean(), wb.mean()
                var_a = (wa * wa).mean() - mu_a * mu_a
                var_b = (wb * wb).mean() - mu_b * mu_b
                cov = (wa * wb).mean() - mu_a * mu_b
                num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
                den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
                vals[ch] = num / den
            out[y, x] = vals.mean()
    return out


def smoothness_reference(depth: np.ndarray, image: np.ndarray) -> float:
    """Pooled mean of squared edge-weighted forward differences of d/mean(d)."""
    d = depth / depth.mean()
    h, w = d.shape
    terms = []
    for y in range(h):
        for x in range(w - 1):
            gi = np.abs(image[:, y, x + 1] - image[:, y, x]).mean()
            terms.append((np.exp(-gi) * (d[y, x + 1] - d[y, x])) ** 2)
    for y in range(h - 1):
        for x in range(w):
            gi = np.abs(image[:, y + 1, x] - image[:, y, x]).mean()
            terms.append((np.exp(-gi) * (d[y + 1, x] - d[y, x])) ** 2)
    return float(np.mean(terms))


def depth_metrics_reference(pred: np.ndarray, gt: np.ndarray):
    """Plain-loop depth metrics on already-valid flat arrays."""
    n = len(gt)
    abs_rel = sum(abs(p - g) / g for p, g in zip(pred, gt)) / n
    rmse = (sum((p - g) ** 2 for p, g in zip(pred, gt)) / n) ** 0.5
    deltas = []
    for i in (1, 2, 3):
        thr = 1.25**i
        deltas.append(sum(1 for p, g in zip(pred, gt) if max(p / g, g / p) < thr) / n)
    return abs_rel, rmse, tuple(deltas)

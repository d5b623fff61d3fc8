"""Slow, independent reference implementations used by `verify` and the tests.

Nothing here shares code with the fast paths it checks.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, add, div, mul, reduce, scale, sigmoid, sub

__all__ = [
    "naive_conv2d", "hog_reference", "f1_bruteforce", "simam_composite",
    "resnet50_param_count", "radius_ratio_label",
]


def naive_conv2d(x: np.ndarray, w: np.ndarray, b=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct cross-correlation by explicit loops over output positions."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if b is None else float(b[fi])
                    for ci in range(c):
                        for i in range(kh):
                            iy = oy * stride + i - pad
                            if not 0 <= iy < h:
                                continue
                            for j in range(kw):
                                ix = ox * stride + j - pad
                                if 0 <= ix < wd:
                                    acc += x[ni, ci, iy, ix] * w[fi, ci, i, j]
                    out[ni, fi, oy, ox] = acc
    return out


def hog_reference(img: np.ndarray, cell: int = 8, bins: int = 9, block: int = 2,
                  eps: float = 1e-6) -> np.ndarray:
    """Pixel-by-pixel HOG: centred differences with replicated edges, linear
    orientation voting over unsigned angles, L2 block normalisation."""
    h, w = img.shape
    cy, cx = h // cell, w // cell
    hist = [[[0.0] * bins for _ in range(cx)] for _ in range(cy)]
    width = 180.0 / bins
    for y in range(h):
        for x in range(w):
            gx = float(img[y, min(x + 1, w - 1)]) - float(img[y, max(x - 1, 0)])
            gy = float(img[min(y + 1, h - 1), x]) - float(img[max(y - 1, 0), x])
            mag = math.sqrt(gx * gx + gy * gy)
            ang = math.degrees(math.atan2(gy, gx)) % 180.0
            pos = ang / width - 0.5
            lo = math.floor(pos)
            frac = pos - lo
            cell_hist = hist[y // cell][x // cell]
            cell_hist[lo % bins] += mag * (1 - frac)
            cell_hist[(lo + 1) % bins] += mag * frac
    out = []
    for by in range(cy - block + 1):
        for bx in range(cx - block + 1):
            v = []
            for i in range(block):
                for j in range(block):
                    v.extend(hist[by + i][bx + j])
            norm = math.sqrt(sum(t * t for t in v) + eps * eps)
            out.extend(t / norm for t in v)
    return np.array(out)


def f1_bruteforce(confusion) -> float:
    """Macro-F1 from expanded (truth, prediction) label lists, counted per sample."""
    truth, pred = [], []
    for t in range(3):
        for p in range(3):
            k = int(confusion[t][p])
            truth += [t] * k
            pred += [p] * k
    scores = []
    for c in range(3):
        tp = sum(1 for t, p in zip(truth, pred) if t == c and p == c)
        predicted = sum(1 for p in pred if p == c)
        actual = sum(1 for t in truth if t == c)
        prec = tp / predicted if predicted else 0.0
        rec = tp / actual if actual else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(scores) / 3


def simam_composite(x: Tensor, lam: float) -> Tensor:
    """SimAM assembled from generic differentiable primitives."""
    m = x.shape[2] * x.shape[3]
    mu = reduce("mean", x, axes=(2, 3))
    d = mul(sub(x, mu), sub(x, mu))
    v = scale(reduce("sum", d, axes=(2, 3)), 1.0 / (m - 1))
    e = add(div(d, scale(add(v, lam), 4.0)), 0.5)
    return mul(x, sigmoid(e))


def resnet50_param_count(in_channels: int = 3, num_classes: int = 1000) -> int:
    """Closed-form count for the classic 7x7-stem bottleneck network."""
    bn = lambda c: 2 * c
    total = in_channels * 64 * 49 + bn(64)
    c_in = 64
    for mid, blocks in zip((64, 128, 256, 512), (3, 4, 6, 3)):
        out = 4 * mid
        for b in range(blocks):
            total += c_in * mid + bn(mid) + 9 * mid * mid + bn(mid) + mid * out + bn(out)
            if b == 0:
                total += c_in * out + bn(out)
            c_in = out
    return total + c_in * num_classes + num_classes


def radius_ratio_label(before: np.ndarray, after: np.ndarray, threshold: float = 0.5) -> int:
    """Classify a pair by dark-area ratio: < 0.8 better, > 1.2 worse, else no change."""
    a = int((before < threshold).sum())
    ratio = (after < threshold).sum() / max(a, 1)
    return 0 if ratio < 0.8 else (2 if ratio > 1.2 else 1)

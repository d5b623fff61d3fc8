"""Classical image features: area subsampling, intensity histogram, PCA, HOG.

Images are 2-D float arrays with values in [0, 1].
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "check_gray", "subsample", "intensity_histogram", "PCAModel", "RankDeficientError",
    "pca_fit", "pca_transform", "pca_inverse", "HogSpec", "hog", "hog_cell_histograms",
    "hog_pca", "write_feature_csv",
]


class RankDeficientError(ValueError):
    pass


def check_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 1:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if not np.isfinite(img).all() or img.min() < 0 or img.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    return img


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages source cells overlapping [i*n_in/n_out, (i+1)*n_in/n_out)."""
    r = np.zeros((n_out, n_in))
    step = n_in / n_out
    for i in range(n_out):
        lo, hi = i * step, (i + 1) * step
        for y in range(int(np.floor(lo)), min(n_in, int(np.ceil(hi)))):
            r[i, y] = min(hi, y + 1) - max(lo, y)
    return r / step


def subsample(img, out_h: int, out_w: int) -> np.ndarray:
    """Area-average downsampling, flattened row-major."""
    img = check_gray(img)
    h, w = img.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ValueError(f"cannot subsample {h}x{w} to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return img.reshape(-1).copy()
    if h % out_h == 0 and w % out_w == 0:
        fh, fw = h // out_h, w // out_w
        return img.reshape(out_h, fh, out_w, fw).mean(axis=(1, 3)).reshape(-1)
    return (_area_matrix(h, out_h) @ img @ _area_matrix(w, out_w).T).reshape(-1)


def intensity_histogram(img, bins: int) -> np.ndarray:
    """Fraction of pixels in each of ``bins`` uniform bins over [0, 1]; 1.0 lands in the last."""
    img = check_gray(img)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    idx = np.minimum((img.reshape(-1) * bins).astype(np.int64), bins - 1)
    return np.bincount(idx, minlength=bins) / img.size


@dataclass
class PCAModel:
    mean: np.ndarray         # [d]
    components: np.ndarray   # [k, d], orthonormal rows
    explained_variance: np.ndarray  # [k], non-increasing

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(X, k: int) -> PCAModel:
    """Top-k principal directions of mean-centred X via SVD.

    Each component's first non-negligible coordinate is made positive so the
    result is deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("pca_fit expects an [n, d] matrix")
    n, d = X.shape
    if n < 2:
        raise ValueError("pca_fit needs at least 2 samples")
    if not 1 <= k <= min(n - 1, d):
        raise ValueError(f"k={k} outside [1, {min(n - 1, d)}]")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    tol = max(n, d) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    if s[0] == 0 or s[k - 1] <= tol:
        raise RankDeficientError("rank deficient below k")
    comps = vt[:k].copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12 * np.abs(row).max())
        if row[nz[0]] < 0:
            row *= -1
    return PCAModel(mean, comps, s[:k] ** 2 / (n - 1))


def pca_transform(m: PCAModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.mean.size:
        raise ValueError(f"expected [n, {m.mean.size}] input, got {X.shape}")
    return (X - m.mean) @ m.components.T


def pca_inverse(m: PCAModel, Z) -> np.ndarray:
    return np.asarray(Z) @ m.components + m.mean


@dataclass(frozen=True)
class HogSpec:
    cell: int = 8
    bins: int = 9
    block: int = 2
    eps: float = 1e-6


def _gradients(img: np.ndarray):
    p = np.pad(img, 1, mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return gx, gy


def hog_cell_histograms(img, spec: HogSpec = HogSpec()) -> np.ndarray:
    """Magnitude-weighted orientation histograms, shape (cells_y, cells_x, bins)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if h % spec.cell or w % spec.cell:
        raise ValueError(f"image {h}x{w} not divisible into {spec.cell}px cells")
    gx, gy = _gradients(img)
    mag = np.hypot(gx, gy)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    width = 180.0 / spec.bins
    # linear vote between the two nearest bin centres, wrapping at 180 degrees
    pos = ang / width - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64) % spec.bins
    hi = (lo + 1) % spec.bins
    cy, cx = h // spec.cell, w // spec.cell
    cell_id = (np.arange(h)[:, None] // spec.cell) * cx + np.arange(w)[None, :] // spec.cell
    hist = np.zeros(cy * cx * spec.bins)
    np.add.at(hist, (cell_id * spec.bins + lo).reshape(-1), (mag * (1 - frac)).reshape(-1))
    np.add.at(hist, (cell_id * spec.bins + hi).reshape(-1), (mag * frac).reshape(-1))
    return hist.reshape(cy, cx, spec.bins)


def hog(img, spec: HogSpec = HogSpec()) -> np.ndarray:
    """Block-normalised HOG descriptor; blocks scanned row-major, stride one cell."""
    img = check_gray(img)
    cells = hog_cell_histograms(img, spec)
    cy, cx, _ = cells.shape
    b = spec.block
    if cy < b or cx < b:
        raise ValueError(f"image too small for {b}x{b}-cell blocks")
    out = []
    for by in range(cy - b + 1):
        for bx in range(cx - b + 1):
            v = cells[by:by + b, bx:bx + b].reshape(-1)
            out.append(v / np.sqrt(v @ v + spec.eps ** 2))
    return np.concatenate(out)


def hog_pca(images, k: int, spec: HogSpec = HogSpec()):
    """HOG per image, then PCA to k dimensions. Returns (model, [n, k] features)."""
    if len(images) < 2:
        raise ValueError("hog_pca needs at least 2 images")
    H = np.stack([hog(im, spec) for im in images])
    model = pca_fit(H, k)
    return model, pca_transform(model, H)


def write_feature_csv(path, X) -> None:
    """Feature matrix as CSV with header f0..f{d-1}; values written with repr()."""
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"f{i}" for i in range(X.shape[1])])
        for row in X:
            wr.writerow([repr(float(v)) for v in row])

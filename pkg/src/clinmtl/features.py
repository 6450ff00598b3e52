"""13-feature radiomics target computed from an image and a binary mask.

Shape, margin and texture descriptors aligned with sonographic risk
criteria; used as a training-time regression target only. All functions
are pure and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

CANONICAL_FEATURES = (
    "circularity",
    "ellipticity",
    "aspect_ratio",
    "edge_sharpness",
    "edge_intensity",
    "entropy",
    "mean",
    "kurtosis",
    "glcm_contrast",
    "glcm_energy",
    "glcm_correlation",
    "glcm_entropy",
    "elongation2d",
)

N_FEATURES = len(CANONICAL_FEATURES)
GLCM_LEVELS = 32
GLCM_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))
HIST_BINS = 32
MIN_MASK_PIXELS = 8
BACKGROUND = -1

_STRUCT8 = np.ones((3, 3), dtype=bool)


class FeatureError(Exception):
    """Raised for invalid feature-extraction inputs."""


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray  # (13,) in canonical order

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (N_FEATURES,):
            raise FeatureError(f"expected {N_FEATURES} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise FeatureError("non-finite feature value")
        object.__setattr__(self, "values", v)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(CANONICAL_FEATURES, self.values.tolist()))

    def __getitem__(self, name: str) -> float:
        return float(self.values[CANONICAL_FEATURES.index(name)])


@dataclass(frozen=True)
class StandardizationStats:
    """Per-feature mean/std of the training split; std floored at 1e-8."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64)
        s = np.maximum(np.asarray(self.std, dtype=np.float64), 1e-8)
        if m.shape != (N_FEATURES,) or s.shape != (N_FEATURES,):
            raise FeatureError("stats must be 13-vectors")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "std", s)

    @classmethod
    def fit(cls, vectors: list[FeatureVector]) -> "StandardizationStats":
        arr = np.stack([fv.values for fv in vectors])
        return cls(arr.mean(axis=0), arr.std(axis=0))


def standardize(fv: FeatureVector, stats: StandardizationStats) -> FeatureVector:
    return FeatureVector((fv.values - stats.mean) / stats.std)


def destandardize(fv: FeatureVector, stats: StandardizationStats) -> FeatureVector:
    return FeatureVector(fv.values * stats.std + stats.mean)


def quantize(image: np.ndarray, mask: np.ndarray, levels: int = GLCM_LEVELS) -> np.ndarray:
    """Min-max quantize masked intensities to {0..levels-1}; background -> -1."""
    out = np.full(image.shape, BACKGROUND, dtype=np.int64)
    vals = image[mask]
    lo, hi = vals.min(), vals.max()
    if hi - lo < 1e-12:
        out[mask] = 0
        return out
    q = np.floor((image - lo) / (hi - lo) * levels).astype(np.int64)
    out[mask] = np.clip(q[mask], 0, levels - 1)
    return out


def glcm(quantized: np.ndarray, offsets=GLCM_OFFSETS, levels: int = GLCM_LEVELS) -> np.ndarray:
    """Symmetric, normalized co-occurrence matrix pooled over offsets.

    Pairs where either pixel carries the background sentinel are excluded.
    """
    if levels < 2:
        raise FeatureError("glcm needs at least 2 levels")
    h, w = quantized.shape
    counts = np.zeros((levels, levels), dtype=np.float64)
    for dy, dx in offsets:
        y0, y1 = max(0, -dy), min(h, h - dy)
        x0, x1 = max(0, -dx), min(w, w - dx)
        a = quantized[y0:y1, x0:x1]
        b = quantized[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
        valid = (a != BACKGROUND) & (b != BACKGROUND)
        if not valid.any():
            continue
        pairs = np.bincount(a[valid] * levels + b[valid], minlength=levels * levels)
        counts += pairs.reshape(levels, levels)
    counts = counts + counts.T
    total = counts.sum()
    if total == 0:
        raise FeatureError("glcm: no valid co-occurring pairs inside the mask")
    return counts / total


def glcm_stats(p: np.ndarray) -> dict[str, float]:
    levels = p.shape[0]
    i = np.arange(levels, dtype=np.float64)
    ii, jj = np.meshgrid(i, i, indexing="ij")
    contrast = float(((ii - jj) ** 2 * p).sum())
    energy = float((p ** 2).sum())
    nz = p[p > 0]
    ent = float(-(nz * np.log2(nz)).sum())
    pi = p.sum(axis=1)
    mu_i = float((i * pi).sum())
    sig_i = float(np.sqrt(((i - mu_i) ** 2 * pi).sum()))
    pj = p.sum(axis=0)
    mu_j = float((i * pj).sum())
    sig_j = float(np.sqrt(((i - mu_j) ** 2 * pj).sum()))
    if sig_i < 1e-12 or sig_j < 1e-12:
        corr = 0.0
    else:
        corr = float(((ii * jj * p).sum() - mu_i * mu_j) / (sig_i * sig_j))
    return {"contrast": contrast, "energy": energy, "correlation": corr, "entropy": ent}


def crack_perimeter(mask: np.ndarray) -> float:
    """Count of exposed pixel edges on the foreground/background interface."""
    m = np.pad(mask.astype(bool), 1)
    p = 0
    p += int((m[1:, :] & ~m[:-1, :]).sum())
    p += int((m[:-1, :] & ~m[1:, :]).sum())
    p += int((m[:, 1:] & ~m[:, :-1]).sum())
    p += int((m[:, :-1] & ~m[:, 1:]).sum())
    return float(p)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels 8-adjacent to background (image border counts as background)."""
    m = mask.astype(bool)
    eroded = ndimage.binary_erosion(m, structure=_STRUCT8, border_value=0)
    return m & ~eroded


def _covariance_eigs(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(mask)
    coords = np.stack([ys, xs]).astype(np.float64)
    coords -= coords.mean(axis=1, keepdims=True)
    cov = coords @ coords.T / coords.shape[1]
    cov += np.eye(2) / 12.0  # unit-square pixel area correction
    eigs = np.linalg.eigvalsh(cov)
    return float(eigs[0]), float(eigs[1])


def extract_features(image: np.ndarray, mask: np.ndarray) -> FeatureVector:
    """Compute the 13 canonical radiomics values for one image/mask pair.

    ``image`` is H x W in [0, 1]; ``mask`` is H x W binary with at least
    8 foreground pixels.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if image.shape != mask.shape:
        raise FeatureError(f"image shape {image.shape} != mask shape {mask.shape}")
    area = int(mask.sum())
    if area < MIN_MASK_PIXELS:
        raise FeatureError(f"mask too small: {area} < {MIN_MASK_PIXELS} pixels")

    # shape
    perim = crack_perimeter(mask)
    circularity = 4.0 * np.pi * area / perim ** 2
    lam_min, lam_max = _covariance_eigs(mask)
    ellipticity = np.sqrt(lam_min / lam_max) if lam_max > 1e-12 else 0.0
    elongation2d = ellipticity
    ys, xs = np.nonzero(mask)
    bbox_h = ys.max() - ys.min() + 1
    bbox_w = xs.max() - xs.min() + 1
    aspect_ratio = bbox_h / bbox_w

    # margin
    boundary = boundary_pixels(mask)
    gy, gx = np.gradient(image)
    grad_mag = np.hypot(gy, gx)
    edge_sharpness = float(grad_mag[boundary].mean())
    ring = ndimage.binary_dilation(mask, structure=_STRUCT8, iterations=5) & ~mask
    inside_mean = float(image[mask].mean())
    edge_intensity = abs(inside_mean - float(image[ring].mean())) if ring.any() else 0.0

    # first-order intensity
    vals = image[mask]
    lo, hi = vals.min(), vals.max()
    if hi - lo < 1e-12:
        entropy = 0.0
    else:
        hist, _ = np.histogram(vals, bins=HIST_BINS, range=(lo, hi))
        p = hist[hist > 0] / hist.sum()
        entropy = float(-(p * np.log2(p)).sum())
    std = vals.std()
    if std < 1e-8:
        kurtosis = 0.0  # degenerate guard
    else:
        kurtosis = float(((vals - vals.mean()) ** 4).mean() / std ** 4)

    # texture
    g = glcm_stats(glcm(quantize(image, mask)))

    return FeatureVector(np.array([
        circularity,
        ellipticity,
        aspect_ratio,
        edge_sharpness,
        edge_intensity,
        entropy,
        inside_mean,
        kurtosis,
        g["contrast"],
        g["energy"],
        g["correlation"],
        g["entropy"],
        elongation2d,
    ]))


def features_csv_header() -> str:
    return "filename," + ",".join(CANONICAL_FEATURES)


def features_csv_row(filename: str, fv: FeatureVector) -> str:
    return filename + "," + ",".join(repr(v) for v in fv.values.tolist())

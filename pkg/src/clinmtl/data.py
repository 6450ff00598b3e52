"""Datasets: synthetic speckle phantoms, on-disk PGM layout, splits, weights.

Directory layout: ``images/<case>_<idx>.pgm`` (binary P5, 8-bit),
``masks/<same name>.pgm`` (0/255), ``labels.csv`` with header
``filename,tirads`` and tirads in 1..5.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

NUM_CLASSES = 5


class DataError(Exception):
    pass


@dataclass
class Sample:
    image: np.ndarray   # H x W float64 in [0, 1]
    mask: np.ndarray    # H x W bool
    label: int          # 0-based class index (risk level 1..5 minus 1)
    case_id: str

    @property
    def filename(self) -> str:
        return f"{self.case_id}_0.pgm"


# ---------------------------------------------------------------------------
# synthetic phantom generator

# point rule thresholds: taller-than-wide bbox, echogenicity offset,
# margin (perturbation amplitude + blur), internal texture variance
ECHO_THRESHOLD = -0.15
MARGIN_AMP_THRESHOLD = 0.10
MARGIN_BLUR_THRESHOLD = 0.8
TEXTURE_THRESHOLD = 0.07

_POINTS_TO_LABEL = {0: 0, 1: 1, 2: 1, 3: 2, 4: 3, 5: 3}  # >=6 -> 4 (TR5)


def _risk_points(taller: bool, echo_offset: float, margin_amp: float,
                 margin_blur: float, texture_sigma: float) -> int:
    points = 0
    if taller:
        points += 2
    if echo_offset < ECHO_THRESHOLD:
        points += 2
    if margin_amp > MARGIN_AMP_THRESHOLD and margin_blur < MARGIN_BLUR_THRESHOLD:
        points += 2
    if texture_sigma > TEXTURE_THRESHOLD:
        points += 1
    return points


def points_to_label(points: int) -> int:
    return _POINTS_TO_LABEL.get(points, 4)


def _gen_sample(size: int, seed: int, index: int) -> Sample:
    rng = np.random.default_rng([seed, index])
    s = float(size)

    base = rng.uniform(0.40, 0.55)
    speckle = ndimage.uniform_filter(rng.normal(size=(size, size)), 3)
    image = base + 0.07 * speckle + 0.03 * rng.normal(size=(size, size))

    # geometry
    taller_flag = rng.uniform() < 0.5
    major = rng.uniform(0.18, 0.27) * s
    ratio = rng.uniform(1.4, 1.9)
    ry, rx = (major, major / ratio) if taller_flag else (major / ratio, major)
    theta = rng.uniform(-0.2, 0.2)
    cy = s / 2 + rng.uniform(-s / 8, s / 8)
    cx = s / 2 + rng.uniform(-s / 8, s / 8)

    # margin
    if rng.uniform() < 0.5:
        margin_amp = rng.uniform(0.15, 0.25)
        margin_blur = rng.uniform(0.2, 0.6)
    else:
        margin_amp = rng.uniform(0.0, 0.05)
        margin_blur = rng.uniform(1.2, 2.0)
    lobes = int(rng.integers(3, 7))
    phase = rng.uniform(0, 2 * np.pi)

    # echogenicity / texture
    if rng.uniform() < 0.5:
        echo_offset = rng.uniform(-0.35, -0.20)
    else:
        echo_offset = rng.uniform(0.08, 0.20)
    texture_sigma = rng.uniform(0.10, 0.18) if rng.uniform() < 0.5 else rng.uniform(0.0, 0.04)

    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, si = np.cos(theta), np.sin(theta)
    u = c * dx + si * dy
    v = -si * dx + c * dy
    r_norm = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    phi = np.arctan2(v / ry, u / rx)
    mask = r_norm <= 1.0 + margin_amp * np.sin(lobes * phi + phase)

    layer = mask.astype(np.float64) * (echo_offset
                                       + texture_sigma * rng.normal(size=(size, size)))
    image = image + ndimage.gaussian_filter(layer, margin_blur)
    image = np.clip(image, 0.0, 1.0)
    image = np.round(image * 255.0) / 255.0  # 8-bit grid so disk round-trips exactly

    ys, xs = np.nonzero(mask)
    taller = (ys.max() - ys.min()) > (xs.max() - xs.min())
    label = points_to_label(_risk_points(taller, echo_offset, margin_amp,
                                         margin_blur, texture_sigma))
    return Sample(image=image, mask=mask, label=label, case_id=f"c{index:05d}")


def gen_synthetic(n: int, size: int, seed: int) -> list[Sample]:
    """Deterministic speckle phantoms with one nodule each, labels 0..4."""
    if size % 16:
        raise DataError(f"size must be divisible by 16, got {size}")
    if n < 10:
        raise DataError(f"need at least 10 samples, got {n}")
    return [_gen_sample(size, seed, i) for i in range(n)]


def class_counts(samples: list[Sample]) -> np.ndarray:
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for s in samples:
        counts[s.label] += 1
    return counts


def class_weights(counts) -> np.ndarray:
    """Inverse-frequency weights w_c = N / (C * n_c)."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise DataError(f"every class needs at least one sample, got {counts}")
    return counts.sum() / (len(counts) * counts)


def kfold_split(case_ids: list[str], k: int, seed: int) -> dict[str, int]:
    """Case-level partition into k folds whose sizes differ by at most one."""
    unique = sorted(set(case_ids))
    if k < 2:
        raise DataError("k must be >= 2")
    if len(unique) < k:
        raise DataError(f"need at least {k} distinct cases, got {len(unique)}")
    order = np.random.default_rng(seed).permutation(len(unique))
    return {unique[int(idx)]: pos % k for pos, idx in enumerate(order)}


# ---------------------------------------------------------------------------
# PGM I/O


def write_pgm(path: str, values: np.ndarray):
    """Binary P5, 8-bit."""
    arr = np.asarray(values, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(arr.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a binary (P5) PGM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(v) for v in fields)
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise DataError(f"{path}: expected 8-bit PGM, maxval={maxval}")
    if len(raw) - pos < w * h:
        raise DataError(f"{path}: truncated pixel data "
                        f"(expected {w * h} bytes, got {len(raw) - pos})")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


def save_dataset(samples: list[Sample], out_dir: str):
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    rows = ["filename,tirads"]
    for s in samples:
        write_pgm(os.path.join(out_dir, "images", s.filename),
                  np.round(s.image * 255.0))
        write_pgm(os.path.join(out_dir, "masks", s.filename),
                  s.mask.astype(np.uint8) * 255)
        rows.append(f"{s.filename},{s.label + 1}")
    with open(os.path.join(out_dir, "labels.csv"), "w") as f:
        f.write("\n".join(rows) + "\n")


def load_dataset(dir_path: str) -> list[Sample]:
    """Load samples sorted by case id; masks binarized at 128, images scaled to [0,1]."""
    labels_path = os.path.join(dir_path, "labels.csv")
    if not os.path.isfile(labels_path):
        raise DataError(f"missing labels file: {labels_path}")
    with open(labels_path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != "filename,tirads":
        raise DataError(f"{labels_path}: expected header 'filename,tirads'")
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 2:
            raise DataError(f"{labels_path} line {lineno}: expected 'filename,tirads'")
        fname, label_str = parts
        try:
            label = int(label_str)
        except ValueError:
            raise DataError(f"{labels_path} line {lineno}: bad label {label_str!r}") from None
        if not 1 <= label <= NUM_CLASSES:
            raise DataError(f"{labels_path} line {lineno}: label {label} outside 1..5")
        img_path = os.path.join(dir_path, "images", fname)
        mask_path = os.path.join(dir_path, "masks", fname)
        if not os.path.isfile(img_path):
            raise DataError(f"missing image for {fname}: {img_path}")
        if not os.path.isfile(mask_path):
            raise DataError(f"missing mask for {fname}: {mask_path}")
        img = read_pgm(img_path)
        mask = read_pgm(mask_path)
        if img.shape != mask.shape:
            raise DataError(
                f"{fname}: image shape {img.shape} != mask shape {mask.shape}")
        case_id = fname.rsplit("_", 1)[0] if "_" in fname else os.path.splitext(fname)[0]
        samples.append(Sample(image=img.astype(np.float64) / 255.0,
                              mask=mask >= 128, label=label - 1, case_id=case_id))
    samples.sort(key=lambda s: (s.case_id, s.filename))
    return samples

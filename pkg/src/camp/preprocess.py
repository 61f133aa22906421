"""Slice quality gate (entropy + SNR) and histogram equalization.

Per-slice order of operations is resize -> gate -> equalize.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .imaging import GraySlice, Volume, resize_bilinear

QUALITY_HEADER = ["patient_id", "modality", "slice_index", "entropy_bits", "snr_db", "selected"]


@dataclass(frozen=True)
class PreprocessConfig:
    entropy_threshold: float = 1.3
    snr_threshold: float = 5.0
    # (x, y, w, h) in pixels; the noise estimate comes from this flat region
    background_region: tuple = (0, 0, 16, 16)
    target_size: int = 256

    def __post_init__(self):
        if not (math.isfinite(self.entropy_threshold) and math.isfinite(self.snr_threshold)):
            raise DataError("preprocessing thresholds must be finite")
        if len(self.background_region) != 4:
            raise DataError("background_region must be (x, y, w, h)")
        object.__setattr__(self, "background_region", tuple(int(v) for v in self.background_region))
        if self.target_size < 1:
            raise DataError("target_size must be positive")


@dataclass(frozen=True)
class SliceQuality:
    entropy_bits: float
    snr_db: float
    selected: bool


def shannon_entropy(slc):
    """Entropy in bits of the 256-bin intensity histogram."""
    total = slc.data.size
    if total == 0:
        raise DataError("entropy of an empty slice is undefined")
    counts = np.bincount(slc.data.ravel(), minlength=256)
    p = counts[counts > 0] / total
    h = float(-np.sum(p * np.log2(p)))
    # a single symbol gives -0.0
    return h + 0.0


def snr_db(slc, background):
    """Decibel SNR: squared whole-slice mean over background-region variance.

    Returns ``inf`` for a noiseless background and ``-inf`` for an all-dark slice.
    """
    x, y, w, h = background
    if w * h < 4:
        raise DataError(f"background region {background} must cover at least 4 pixels")
    if x < 0 or y < 0 or x + w > slc.width or y + h > slc.height:
        raise DataError(f"background region {background} lies outside the "
                        f"{slc.width}x{slc.height} slice")
    pixels = slc.data.astype(np.float64)
    signal = pixels.mean() ** 2
    noise = pixels[y:y + h, x:x + w].var()
    if signal == 0.0:
        return -math.inf
    if noise == 0.0:
        return math.inf
    return float(10.0 * np.log10(signal / noise))


def assess(slc, config):
    h = shannon_entropy(slc)
    s = snr_db(slc, config.background_region)
    return SliceQuality(h, s, bool(h > config.entropy_threshold and s >= config.snr_threshold))


def select_slices(volume, config):
    if len(volume) == 0:
        raise DataError(f"volume {volume.patient_id}/{volume.modality.value} has no slices")
    qualities = [assess(s, config) for s in volume.slices]
    kept = [s for s, q in zip(volume.slices, qualities) if q.selected]
    return Volume(volume.patient_id, volume.modality, kept), qualities


def equalization_lut(slc):
    """The 256-entry lookup table used by :func:`histogram_equalize`."""
    counts = np.bincount(slc.data.ravel(), minlength=256)
    cdf = np.cumsum(counts)
    npix = cdf[-1]
    cdf_min = cdf[cdf > 0][0]
    if npix == cdf_min:
        return np.zeros(256, dtype=np.uint8)
    t = np.floor(255.0 * (cdf - cdf_min) / (npix - cdf_min) + 0.5)
    return np.clip(t, 0, 255).astype(np.uint8)


def histogram_equalize(slc):
    lut = equalization_lut(slc)
    return GraySlice(slc.width, slc.height, lut[slc.data])


def preprocess_volume(volume, config):
    """Resize, gate and equalize one volume.

    Returns the equalized selected volume, the per-slice qualities (one per
    input slice) and the indices of the retained slices.
    """
    n = config.target_size
    resized = Volume(volume.patient_id, volume.modality, [resize_bilinear(s, n, n) for s in volume.slices])
    _, qualities = select_slices(resized, config)
    keep = [i for i, q in enumerate(qualities) if q.selected]
    out = Volume(volume.patient_id, volume.modality, [histogram_equalize(resized.slices[i]) for i in keep])
    return out, qualities, keep


def _fmt_db(v):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6f}"


def write_quality_csv(rows, path):
    """``rows``: iterable of (patient_id, modality, slice_index, SliceQuality)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(QUALITY_HEADER)
        for pid, mod, idx, q in rows:
            mod = getattr(mod, "value", mod)
            w.writerow([pid, mod, idx, f"{q.entropy_bits:.6f}", _fmt_db(q.snr_db), int(q.selected)])

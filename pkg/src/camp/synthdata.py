"""Deterministic synthetic brain phantoms with a learnable binary label.

Each patient gets an elliptical "brain" (smooth intensity ramp plus mild
noise) on an exactly black background, in four modality variants, with an
elliptical tumour blob. Under the ``texture`` rule, label-1 tumours carry a
high-frequency checkerboard and label-0 tumours are smooth domes of the same
mean intensity. Under the ``intensity`` rule, label-1 tumours are simply
brighter.

Patient ``i`` draws its geometry from ``default_rng([seed, i])`` (noise from
per-modality child streams), so output does not depend on generation order,
worker count or which modalities are requested.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .imaging import DatasetManifest, GraySlice, ManifestEntry, Modality, write_manifest, write_slice

BASE_INTENSITY = {Modality.FLAIR: 120.0, Modality.T1w: 95.0, Modality.T1wCE: 105.0, Modality.T2w: 140.0}
TUMOR_DELTA = {Modality.FLAIR: 60.0, Modality.T1w: -35.0, Modality.T1wCE: 70.0, Modality.T2w: 55.0}
TEXTURE_AMPLITUDE = 40.0
NOISE_SIGMA = 6.0


@dataclass(frozen=True)
class PhantomSpec:
    n_patients: int = 8
    slices_per_patient: int = 4
    size: int = 256
    seed: int = 0
    tumor_label_rule: str = "texture"
    modalities: tuple = tuple(Modality)

    def __post_init__(self):
        if self.n_patients < 1 or self.slices_per_patient < 1:
            raise DataError("patient and slice counts must be at least 1")
        if self.size < 8 or self.size % 4:
            raise DataError(f"phantom size must be a multiple of 4 (>= 8), got {self.size}")
        if self.tumor_label_rule not in ("texture", "intensity"):
            raise DataError(f"unknown tumor_label_rule {self.tumor_label_rule!r}")
        object.__setattr__(self, "modalities", tuple(Modality.parse(m) for m in self.modalities))


def patient_labels(spec):
    """Balanced labels (counts differ by at most one), shuffled by the seed."""
    n = spec.n_patients
    labels = np.array([1] * (n // 2) + [0] * (n - n // 2))
    return np.random.default_rng([spec.seed, 2**31]).permutation(labels).tolist()


def patient_id(index):
    return f"P{index:04d}"


def phantom_patient(spec, index, label):
    """Return ``{modality: [uint8 (size, size) arrays]}`` for one patient."""
    rng = np.random.default_rng([spec.seed, index])
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5

    cx, cy = s / 2 + rng.uniform(-0.02, 0.02, size=2) * s
    # largest semi-axis that keeps the top-left margin x margin corner black
    margin = 16 if s >= 64 else s // 8
    reach = min(0.45 * s, 0.97 * np.sqrt(2.0) * (0.48 * s - margin))
    ax, ay = rng.uniform(0.9, 1.0) * reach, rng.uniform(0.82, 0.95) * reach
    ramp_angle = rng.uniform(0, 2 * np.pi)
    off_r = rng.uniform(0.0, 0.45) * min(ax, ay)
    off_t = rng.uniform(0, 2 * np.pi)
    tx, ty = cx + off_r * np.cos(off_t), cy + off_r * np.sin(off_t)
    tr = rng.uniform(0.33, 0.42) * min(ax, ay)
    period = int(rng.integers(1, 3))
    phase = int(rng.integers(0, 2))

    mid = (spec.slices_per_patient - 1) / 2
    out = {m: [] for m in spec.modalities}
    # per-modality noise streams keep each modality independent of which others are generated
    noise_rng = {m: np.random.default_rng([spec.seed, index, 1 + list(Modality).index(m)])
                 for m in spec.modalities}
    for z in range(spec.slices_per_patient):
        shrink = 1.0 - 0.12 * abs(z - mid) / max(mid, 1.0)
        brain = ((xx - cx) / (ax * shrink)) ** 2 + ((yy - cy) / (ay * shrink)) ** 2 <= 1.0
        tumor_r = max(tr * shrink, 2.5)
        rr = np.sqrt((xx - tx) ** 2 + (yy - ty) ** 2) / tumor_r
        tumor = (rr <= 1.0) & brain
        dome = np.clip(1.0 - rr ** 2, 0.0, 1.0)
        ramp = 0.5 + 0.5 * (((xx - cx) * np.cos(ramp_angle) + (yy - cy) * np.sin(ramp_angle)) / max(ax, ay))
        checker = ((np.floor(xx / period) + np.floor(yy / period) + phase) % 2) * 2.0 - 1.0
        for m in spec.modalities:
            img = BASE_INTENSITY[m] * (0.55 + 0.9 * ramp)
            img = img + noise_rng[m].normal(0.0, NOISE_SIGMA, size=img.shape)
            delta = TUMOR_DELTA[m]
            if spec.tumor_label_rule == "texture":
                blob = delta * (0.3 + 0.7 * dome)
                if label == 1:
                    blob = blob + TEXTURE_AMPLITUDE * checker
            else:
                blob = (delta if label == 1 else 0.3 * delta) * (0.3 + 0.7 * dome)
            img = np.where(tumor, img + blob, img)
            img = np.where(brain, np.clip(img, 1.0, 255.0), 0.0)
            out[m].append(np.floor(img + 0.5).astype(np.uint8))
    return out


def generate_phantoms(spec, out_dir):
    """Write a phantom dataset under ``out_dir`` and return its manifest.

    Layout: ``<out_dir>/<patient>/<modality>_<z>.pgm`` plus ``manifest.csv``.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"{out_dir}: cannot create: {exc.strerror}") from None
    entries = []
    for i, label in enumerate(patient_labels(spec)):
        pid = patient_id(i)
        pdir = out_dir / pid
        pdir.mkdir(exist_ok=True)
        for m, slices in phantom_patient(spec, i, label).items():
            for z, arr in enumerate(slices):
                path = pdir / f"{m.value}_{z:03d}.pgm"
                write_slice(GraySlice.from_array(arr), path)
                entries.append(ManifestEntry(pid, m, path, label))
    manifest = DatasetManifest(tuple(entries))
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def phantom_arrays(spec, modality=Modality.FLAIR):
    """In-memory dataset for one modality: ``(images uint8 [N,S,S], labels, patient_ids)``."""
    modality = Modality.parse(modality)
    spec = PhantomSpec(spec.n_patients, spec.slices_per_patient, spec.size, spec.seed,
                       spec.tumor_label_rule, (modality,))
    images, labels, pids = [], [], []
    for i, label in enumerate(patient_labels(spec)):
        for arr in phantom_patient(spec, i, label)[modality]:
            images.append(arr)
            labels.append(label)
            pids.append(patient_id(i))
    return np.stack(images), np.array(labels), pids

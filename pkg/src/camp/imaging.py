"""Grayscale slice I/O, volumes, dataset manifests and bilinear resizing.

This is the only module that reads or writes image files. Slices are stored
as binary portable graymaps (P5, maxval 255); manifests are CSV files with
the header ``patient_id,modality,slice_path,label``.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, PGMFormatError

MANIFEST_HEADER = ["patient_id", "modality", "slice_path", "label"]


class Modality(str, enum.Enum):
    FLAIR = "FLAIR"
    T1w = "T1w"
    T1wCE = "T1wCE"
    T2w = "T2w"

    @classmethod
    def parse(cls, value):
        try:
            return cls(value)
        except ValueError:
            raise DataError(f"unknown modality {value!r}; expected one of "
                            f"{', '.join(m.value for m in cls)}") from None


@dataclass(frozen=True, eq=False)
class GraySlice:
    """An 8-bit grayscale image, row-major, immutable.

    ``data`` is a read-only ``(height, width)`` uint8 array. Construct from any
    array-like; values outside [0, 255] or a size mismatch raise ``DataError``.
    """

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.size != self.width * self.height:
            raise DataError(f"slice data has {raw.size} values, expected "
                            f"{self.width}x{self.height}={self.width * self.height}")
        if raw.size and (raw.min() < 0 or raw.max() > 255):
            raise DataError("slice intensities must lie in [0, 255]")
        arr = np.array(raw, dtype=np.uint8).reshape(self.height, self.width)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise DataError(f"expected a 2-D array, got shape {arr.shape}")
        return cls(arr.shape[1], arr.shape[0], arr)

    def __eq__(self, other):
        if not isinstance(other, GraySlice):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class Volume:
    patient_id: str
    modality: Modality
    slices: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality.parse(self.modality))
        object.__setattr__(self, "slices", tuple(self.slices))
        sizes = {(s.width, s.height) for s in self.slices}
        if len(sizes) > 1:
            raise DataError(f"volume {self.patient_id}/{self.modality.value} mixes slice sizes {sorted(sizes)}")

    def __len__(self):
        return len(self.slices)


@dataclass(frozen=True)
class ManifestEntry:
    patient_id: str
    modality: Modality
    slice_path: Path
    label: int | None = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        seen = set()
        labels = {}
        for e in entries:
            key = (e.patient_id, e.modality, str(e.slice_path))
            if key in seen:
                raise DataError(f"duplicate manifest entry {key}")
            seen.add(key)
            if e.label is None:
                continue
            if labels.setdefault(e.patient_id, e.label) != e.label:
                raise DataError(f"conflicting labels for patient {e.patient_id!r}")

    def __len__(self):
        return len(self.entries)

    def patients(self):
        """Patient ids in order of first appearance."""
        return list(dict.fromkeys(e.patient_id for e in self.entries))

    def labels(self):
        """Map patient id -> label for every labelled patient."""
        return {e.patient_id: e.label for e in self.entries if e.label is not None}

    def select(self, modality=None, patients=None):
        wanted = None if patients is None else set(patients)
        mod = None if modality is None else Modality.parse(modality)
        return DatasetManifest(tuple(
            e for e in self.entries
            if (mod is None or e.modality == mod) and (wanted is None or e.patient_id in wanted)))

    def as_set(self):
        return {(e.patient_id, e.modality, str(e.slice_path), e.label) for e in self.entries}

    def volumes(self):
        """Group entries into ``Volume`` objects, reading every slice."""
        groups = {}
        for e in self.entries:
            groups.setdefault((e.patient_id, e.modality), []).append(e.slice_path)
        return [Volume(pid, mod, [read_slice(p) for p in paths]) for (pid, mod), paths in groups.items()]


# --------------------------------------------------------------------------
# P5 graymap I/O
# --------------------------------------------------------------------------

def _read_token(buf, pos, path):
    """Return (token, position after token), skipping whitespace and comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PGMFormatError(path, start, "truncated header")
    return buf[start:pos], pos


def read_slice(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    if buf[:2] != b"P5":
        raise PGMFormatError(path, 0, f"unsupported magic {buf[:2]!r} (only binary P5 is accepted)")
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        offset = pos
        tok, pos = _read_token(buf, pos, path)
        try:
            value = int(tok)
        except ValueError:
            raise PGMFormatError(path, offset, f"malformed {name} {tok!r}") from None
        if value < 1:
            raise PGMFormatError(path, offset, f"{name} must be positive, got {value}")
        fields.append(value)
    width, height, maxval = fields
    if maxval != 255:
        raise PGMFormatError(path, pos, f"maxval {maxval} unsupported (need 255)")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PGMFormatError(path, pos, "missing whitespace after maxval")
    pos += 1
    need = width * height
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise PGMFormatError(path, pos + len(payload),
                             f"truncated payload: expected {need} bytes, found {len(payload)}")
    return GraySlice(width, height, np.frombuffer(payload, dtype=np.uint8))


def write_slice(slc, path):
    if not isinstance(slc, GraySlice):
        slc = GraySlice.from_array(slc)
    header = f"P5\n{slc.width} {slc.height}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(slc.data.tobytes())
    except OSError as exc:
        raise DataError(f"{path}: cannot write: {exc.strerror}") from None


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

def load_manifest(path):
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    base = path.parent
    entries = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            pid, mod, spath, label = (c.strip() for c in row)
            if label == "":
                lab = None
            elif label in ("0", "1"):
                lab = int(label)
            else:
                raise DataError(f"{path}:{lineno}: label must be 0, 1 or empty, got {label!r}")
            try:
                modality = Modality.parse(mod)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            sp = Path(spath)
            if not sp.is_absolute():
                sp = base / sp
            entries.append(ManifestEntry(pid, modality, sp, lab))
    try:
        return DatasetManifest(tuple(entries))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_manifest(manifest, path, relative_to=None):
    """Write ``manifest`` as CSV; paths are made relative to ``relative_to`` when possible."""
    path = Path(path)
    root = Path(relative_to) if relative_to is not None else path.parent
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            sp = Path(e.slice_path)
            try:
                sp = sp.relative_to(root)
            except ValueError:
                pass
            w.writerow([e.patient_id, e.modality.value, sp.as_posix(), "" if e.label is None else e.label])


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------

def _axis_weights(n_in, n_out):
    # half-pixel centres: source coordinate of output sample i
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(slc, out_w, out_h):
    """Bilinear resize with half-pixel-centred sampling and edge clamping."""
    if out_w < 1 or out_h < 1:
        raise DataError(f"output size must be at least 1x1, got {out_w}x{out_h}")
    if slc.width == 0 or slc.height == 0:
        raise DataError("cannot resize an empty slice")
    if (out_w, out_h) == (slc.width, slc.height):
        return slc
    img = slc.data.astype(np.float64)
    y0, y1, fy = _axis_weights(slc.height, out_h)
    x0, x1, fx = _axis_weights(slc.width, out_w)
    rows = img[y0] * (1.0 - fy)[:, None] + img[y1] * fy[:, None]
    out = rows[:, x0] * (1.0 - fx)[None, :] + rows[:, x1] * fx[None, :]
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return GraySlice(out_w, out_h, out)


def to_unit(slices):
    """Stack slices into a float32 ``(N, H, W)`` array scaled to [0, 1]."""
    return np.stack([s.data for s in slices]).astype(np.float32) / np.float32(255.0)

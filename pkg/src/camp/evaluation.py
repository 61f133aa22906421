"""Classification metrics, ROC/AUC, patient aggregation and activation maps.

Metrics with a zero denominator return ``None`` instead of 0 or NaN so that
an undefined value can never be silently averaged into a report.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .imaging import GraySlice, write_slice

METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "precision", "f1", "auc")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative count, got {v!r}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise DataError(f"length mismatch: {s.size} scores vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    if not np.all(np.isfinite(s)):
        raise DataError("scores must be finite")
    return s, y.astype(np.int64)


def confusion(scores, labels, threshold=0.5):
    """Count outcomes; a case is predicted positive iff ``score >= threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    s, y = _scores_labels(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return ConfusionMatrix(tp=int(np.sum(pred & pos)), fp=int(np.sum(pred & ~pos)),
                           tn=int(np.sum(~pred & ~pos)), fn=int(np.sum(~pred & pos)))


def _ratio(num, den):
    return None if den == 0 else num / den


def accuracy(cm):
    return _ratio(cm.tp + cm.tn, cm.total)


def sensitivity(cm):
    return _ratio(cm.tp, cm.tp + cm.fn)


def specificity(cm):
    return _ratio(cm.tn, cm.tn + cm.fp)


def precision(cm):
    return _ratio(cm.tp, cm.tp + cm.fp)


def f1(cm):
    p, r = precision(cm), sensitivity(cm)
    if p is None or r is None or p + r == 0:
        return None
    return 2 * p * r / (p + r)


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray


def roc_auc(scores, labels):
    """ROC points over every distinct score plus the trapezoidal AUC.

    Thresholds run from ``+inf`` (nothing positive) down through each
    distinct score. Tied scores move along a diagonal segment, so the
    trapezoid area equals the Mann-Whitney statistic with ties counted as
    one half. Returns ``(RocCurve, None)`` when one class is missing.
    """
    s, y = _scores_labels(scores, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], s.size - 1] if s.size else np.array([], dtype=int)
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    thresholds = np.r_[np.inf, s[distinct]]
    tps = np.r_[0, tps].astype(np.float64)
    fps = np.r_[0, fps].astype(np.float64)
    if n_pos == 0 or n_neg == 0:
        return RocCurve(thresholds, np.full(thresholds.shape, np.nan), np.full(thresholds.shape, np.nan)), None
    tpr, fpr = tps / n_pos, fps / n_neg
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, fpr, tpr), auc


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    precision: float | None
    f1: float | None
    auc: float | None
    confusion: ConfusionMatrix
    threshold: float = 0.5

    def as_dict(self):
        return {k: getattr(self, k) for k in METRIC_NAMES}


def metrics_report(scores, labels, threshold=0.5):
    cm = confusion(scores, labels, threshold)
    _, auc = roc_auc(scores, labels)
    return MetricsReport(accuracy(cm), sensitivity(cm), specificity(cm), precision(cm), f1(cm), auc, cm, threshold)


def aggregate_patient(scores, patient_ids, rule="mean"):
    """Collapse slice scores to one score per patient (first-seen order)."""
    if rule not in ("mean", "max"):
        raise ValueError(f"aggregation rule must be 'mean' or 'max', got {rule!r}")
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(patient_ids) != s.size:
        raise DataError(f"length mismatch: {s.size} scores vs {len(patient_ids)} patient ids")
    groups = {}
    for pid, v in zip(patient_ids, s):
        groups.setdefault(pid, []).append(v)
    reduce = np.mean if rule == "mean" else np.max
    return {pid: float(reduce(vals)) for pid, vals in groups.items()}


def aggregate_labels(labels, patient_ids):
    """One label per patient; slices of a patient must agree."""
    out = {}
    for pid, y in zip(patient_ids, labels):
        y = int(y)
        if out.setdefault(pid, y) != y:
            raise DataError(f"patient {pid} has conflicting slice labels")
    return out


# --------------------------------------------------------------------------
# activation maps
# --------------------------------------------------------------------------

def scale_to_uint8(channel):
    """Min-max scale one 2-D map to 0..255; constant maps become all zeros."""
    a = np.asarray(channel, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise DataError("activation map contains non-finite values")
    if hi == lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.floor((a - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def conv_layers(model):
    """Names of layers whose output is a spatial ``[H, W, C]`` map."""
    return [spec.name for spec in model.layers if spec.kind != "input" and len(spec.out_shape) == 3]


def export_activation_maps(model, image, layers, out_dir):
    """Write each channel of the selected layer outputs as ``<layer>_<channel>.pgm``.

    ``image`` is one ``[H, W]`` slice (uint8 or [0, 1] floats). Runs the model
    in inference mode and returns the written paths.
    """
    x = np.asarray(image)
    if x.ndim != 2:
        raise DataError(f"expected a single [H, W] slice, got shape {x.shape}")
    x = (x.astype(np.float32) / np.float32(255.0)) if x.dtype == np.uint8 else x.astype(np.float32)
    layers = [layers] if isinstance(layers, str) else list(layers)
    valid = conv_layers(model)
    for name in layers:
        if name not in valid:
            raise DataError(f"unknown convolutional layer {name!r}; choose from {', '.join(conv_layers(model))}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mode = model.mode
    model.eval()
    try:
        outs = model.run(x[None, :, :, None], until=max(layers, key=valid.index))
    finally:
        if mode == "train":
            model.train()
    paths = []
    for name in layers:
        act = outs[name].data[0]
        for ch in range(act.shape[-1]):
            path = out_dir / f"{name}_{ch}.pgm"
            write_slice(GraySlice.from_array(scale_to_uint8(act[..., ch])), path)
            paths.append(path)
    return paths


# --------------------------------------------------------------------------
# report writers
# --------------------------------------------------------------------------

def _fmt(v):
    return "undefined" if v is None else f"{v:.6f}"


def format_report(report, title="slice-level"):
    cm = report.confusion
    lines = [f"[{title}] threshold {report.threshold:g}",
             f"  TP {cm.tp}  FP {cm.fp}  TN {cm.tn}  FN {cm.fn}  (n = {cm.total})"]
    lines += [f"  {name:<12}{_fmt(getattr(report, name))}" for name in METRIC_NAMES]
    return "\n".join(lines) + "\n"


def write_metrics_csv(report, path, level=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name in METRIC_NAMES:
            v = getattr(report, name)
            w.writerow([name if level is None else f"{level}_{name}", "" if v is None else repr(float(v))])


def write_roc_csv(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])

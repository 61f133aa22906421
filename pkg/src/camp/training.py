"""Phase-I autoencoder training, phase-II classifier training, Adam and
patient-level k-fold cross-validation.

Everything is deterministic given ``TrainConfig.seed``: initialization, batch
order, input corruption and dropout masks each draw from their own child
stream of ``SeedSequence(seed)``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses
from .errors import DataError, NumericalError
from .losses import SparsityConfig
from .models import ENCODER_LAYERS, REGULARIZED_LAYER, build_camp1, build_camp2, transfer_encoder_weights
from .tensor import Tape

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "split", "loss", "rmse", "accuracy", "sum_kl", "beta2"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    noise_sigma: float = 0.05
    folds: int = 10
    loss: str = "dice"
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    freeze_transferred: bool = False
    leaky_alpha: float = 0.01
    dropout_rate: float = 0.25

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.folds < 1:
            raise ValueError("epochs, batch_size and folds must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.loss not in ("dice", "mse"):
            raise ValueError(f"loss must be 'dice' or 'mse', got {self.loss!r}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class TrainingLog:
    """Per-epoch rows (the CSV log) plus per-step regularizer traces."""

    rows: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    def add(self, epoch, split, loss=None, rmse=None, accuracy=None, sum_kl=None, beta2=None):
        self.rows.append({"epoch": epoch, "split": split, "loss": loss, "rmse": rmse,
                          "accuracy": accuracy, "sum_kl": sum_kl, "beta2": beta2})

    def last(self, split, key):
        for row in reversed(self.rows):
            if row["split"] == split and row[key] is not None:
                return row[key]
        return None

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            for row in self.rows:
                w.writerow(["" if row[k] is None else (repr(float(row[k])) if k != "epoch" and k != "split" else row[k])
                            for k in LOG_HEADER])


def _streams(seed):
    """Independent (shuffle, noise, dropout) generators; weights use ``seed`` itself."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))


def add_gaussian_noise(batch, sigma, rng):
    """Corrupt ``batch`` (values in [0, 1]) with N(0, sigma) noise, clamped to [0, 1]."""
    batch = np.asarray(batch)
    if sigma == 0:
        return batch.copy()
    noisy = batch + rng.normal(0.0, sigma, size=batch.shape).astype(batch.dtype)
    return np.clip(noisy, 0.0, 1.0)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, names=None):
    """One bias-corrected Adam update, in place.

    ``params``/``grads`` are parallel lists of arrays; ``state`` is a dict that
    holds the step count and moment estimates between calls.
    """
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise NumericalError(f"non-finite gradient in parameter {name}")
    t = state.get("t", 0) + 1
    state["t"] = t
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        key = names[i] if names else i
        m = m_all.setdefault(key, np.zeros_like(p))
        v = v_all.setdefault(key, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {}

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps, names=[p.name for p in self.params])


# --------------------------------------------------------------------------
# phase I
# --------------------------------------------------------------------------

def _as_images(images):
    x = np.asarray(images)
    if x.ndim == 4 and x.shape[-1] == 1:
        x = x[..., 0]
    if x.ndim != 3 or len(x) == 0:
        raise DataError(f"expected a non-empty [N, H, W] image stack, got shape {x.shape}")
    if x.shape[1] != x.shape[2]:
        raise DataError(f"slices must be square, got {x.shape[1]}x{x.shape[2]}")
    if x.dtype == np.uint8:
        x = x.astype(np.float32) / np.float32(255.0)
    return x.astype(np.float32, copy=False)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _finite(value, what):
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {what}")
    return value


def reconstruction_rmse(model, images, batch_size=8):
    x = _as_images(images)
    return losses.rmse(x, model.predict(x, batch_size)[..., 0])


def train_autoencoder(images, config, val_images=None, model=None):
    """Train CAMP-I as a denoising autoencoder.

    Inputs are corrupted with Gaussian noise; targets are the clean images.
    Returns ``(model, TrainingLog)``; the log's train RMSE is accumulated over
    every pixel seen during the epoch.
    """
    x = _as_images(images)
    xv = None if val_images is None else _as_images(val_images)
    shuffle_rng, noise_rng, _ = _streams(config.seed)
    if model is None:
        model = build_camp1(seed=config.seed, size=x.shape[1], alpha=config.leaky_alpha)
    opt = Adam(model.trainable(), lr=config.learning_rate)
    objective = losses.dice_loss if config.loss == "dice" else losses.mse_loss
    history = TrainingLog()
    for epoch in range(1, config.epochs + 1):
        model.train()
        loss_sum, sq_sum, count = 0.0, 0.0, 0
        for idx in _batches(len(x), config.batch_size, shuffle_rng):
            clean = x[idx]
            noisy = add_gaussian_noise(clean, config.noise_sigma, noise_rng)
            model.zero_grad()
            with Tape() as tape:
                out = model.forward(noisy)
                loss = objective(out, clean[..., None])
            value = _finite(float(loss.data), f"autoencoder loss at epoch {epoch}")
            tape.backward(loss)
            opt.step()
            diff = out.data[..., 0].astype(np.float64) - clean
            loss_sum += value * len(idx)
            sq_sum += float(np.sum(diff * diff))
            count += len(idx)
        model.eval()
        rmse = float(np.sqrt(sq_sum / (count * x.shape[1] * x.shape[2])))
        history.add(epoch, "train", loss=loss_sum / count, rmse=rmse)
        if xv is not None:
            history.add(epoch, "val", rmse=reconstruction_rmse(model, xv, config.batch_size))
        log.info("autoencoder epoch %d: loss %.5f rmse %.5f", epoch, loss_sum / count, rmse)
    return model, history


# --------------------------------------------------------------------------
# phase II
# --------------------------------------------------------------------------

def _labels(labels, n):
    y = np.asarray(labels)
    if y.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {y.shape}")
    if y.dtype == object or not np.isin(y, (0, 1)).all():
        raise DataError("every slice needs a label of 0 or 1")
    return y.astype(np.float32)


def classifier_scores(model, images, batch_size=32):
    return model.predict(_as_images(images), batch_size)[:, 0].astype(np.float64)


def train_classifier(images, labels, camp1, config, val=None):
    """Train CAMP-II on labelled slices starting from CAMP-I's encoder.

    Minimizes binary cross-entropy plus the adaptive sparse penalty on the
    sigmoid Dense(64) activations. ``val`` is an optional ``(images, labels)``
    pair evaluated in inference mode after each epoch.
    """
    x = _as_images(images)
    y = _labels(labels, len(x))
    if camp1.arch != "camp1":
        raise DataError(f"expected a CAMP-I model for transfer, got {camp1.name}")
    if camp1.size != x.shape[1]:
        raise DataError(f"CAMP-I was built for {camp1.size}px inputs, slices are {x.shape[1]}px")
    shuffle_rng, _, drop_rng = _streams(config.seed)
    model = build_camp2(seed=config.seed, size=x.shape[1], alpha=config.leaky_alpha,
                        dropout=config.dropout_rate)
    transfer_encoder_weights(camp1, model)
    frozen = ENCODER_LAYERS if config.freeze_transferred else ()
    for p in model.parameters.values():
        if p.name.split(".")[0] in frozen:
            p.value.requires_grad = False
    opt = Adam(model.trainable(exclude=frozen), lr=config.learning_rate)
    history = TrainingLog()
    for epoch in range(1, config.epochs + 1):
        model.train()
        loss_sum = kl_sum = beta_sum = 0.0
        correct = steps = 0
        for idx in _batches(len(x), config.batch_size, shuffle_rng):
            model.zero_grad()
            with Tape() as tape:
                outs = model.run(x[idx], rng=drop_rng)
                pred = outs["dense2_act"]
                r, info = losses.sparse_penalty(outs[REGULARIZED_LAYER], config.sparsity)
                loss = losses.combined_loss(losses.bce(pred, y[idx]), r)
            value = _finite(float(loss.data), f"classifier loss at epoch {epoch}")
            tape.backward(loss)
            opt.step()
            history.steps.append({"epoch": epoch, "sum_kl": info.sum_kl, "beta2": info.beta2, "r": info.r})
            loss_sum += value * len(idx)
            kl_sum += info.sum_kl
            beta_sum += info.beta2
            correct += int(np.sum((pred.data[:, 0] >= 0.5) == (y[idx] == 1)))
            steps += 1
        model.eval()
        history.add(epoch, "train", loss=loss_sum / len(x), accuracy=correct / len(x),
                    sum_kl=kl_sum / steps, beta2=beta_sum / steps)
        if val is not None:
            vx, vy = _as_images(val[0]), _labels(val[1], len(val[0]))
            s = classifier_scores(model, vx)
            vloss = float(losses.bce(s, vy).data)
            history.add(epoch, "val", loss=vloss, accuracy=float(np.mean((s >= 0.5) == (vy == 1))))
        log.info("classifier epoch %d: loss %.5f acc %.3f beta2 %.3f", epoch, loss_sum / len(x),
                 correct / len(x), beta_sum / steps)
    for p in model.parameters.values():
        p.value.requires_grad = p.trainable
    return model, history


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    train: tuple
    val: tuple

    def __len__(self):
        return len(self.val)

    def __iter__(self):
        return iter(zip(self.train, self.val))


def kfold_split(patients, k, seed=0):
    """Patient-level folds: shuffle ids with ``seed`` and deal them round-robin."""
    ids = patients.patients() if hasattr(patients, "patients") else list(dict.fromkeys(patients))
    if k < 1 or k > len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} patients")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    val = [tuple(order[i::k]) for i in range(k)]
    train = [tuple(p for p in order if p not in set(v)) for v in val]
    return FoldPlan(tuple(train), tuple(val))


@dataclass
class CVResult:
    plan: FoldPlan
    val_scores: np.ndarray
    val_labels: np.ndarray
    val_patients: list
    train_accuracy: list
    val_accuracy: list
    logs: list


def cross_validate(images, labels, patient_ids, config, ae_config=None, camp1=None):
    """Patient-level k-fold CV of the two-phase pipeline.

    Each fold trains its own CAMP-I on the fold's training slices (with
    ``ae_config``) unless a fixed ``camp1`` is given, then CAMP-II with
    ``config``. Returns pooled held-out scores and per-fold accuracies.
    """
    x = _as_images(images)
    y = _labels(labels, len(x))
    pids = np.asarray(patient_ids)
    plan = kfold_split(list(pids), config.folds, config.seed)
    scores, ys, vp, tr_acc, va_acc, logs = [], [], [], [], [], []
    for fold, (train_ids, val_ids) in enumerate(plan):
        tr = np.isin(pids, train_ids)
        va = np.isin(pids, val_ids)
        if set(pids[tr]) & set(pids[va]):
            raise AssertionError(f"fold {fold}: patient leakage between train and validation")
        ae = camp1
        if ae is None:
            ae, _ = train_autoencoder(x[tr], ae_config or config)
        clf, hist = train_classifier(x[tr], y[tr], ae, config)
        s_tr = classifier_scores(clf, x[tr])
        s_va = classifier_scores(clf, x[va])
        tr_acc.append(float(np.mean((s_tr >= 0.5) == (y[tr] == 1))))
        va_acc.append(float(np.mean((s_va >= 0.5) == (y[va] == 1))))
        scores.append(s_va)
        ys.append(y[va])
        vp.extend(pids[va].tolist())
        logs.append(hist)
        log.info("fold %d: train acc %.3f, val acc %.3f", fold, tr_acc[-1], va_acc[-1])
    return CVResult(plan, np.concatenate(scores), np.concatenate(ys).astype(int), vp, tr_acc, va_acc, logs)


def with_overrides(config, **kwargs):
    return replace(config, **{k: v for k, v in kwargs.items() if v is not None})

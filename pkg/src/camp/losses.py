"""Objective terms: Dice, RMSE/MSE, binary cross-entropy, Bernoulli KL and
the adaptive sparse regularizer.

Functions that return a :class:`~camp.tensor.Tensor` are differentiable and
record on the active tape; the others are plain numeric metrics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, as_tensor, record

DICE_SMOOTH = 1e-7


# --------------------------------------------------------------------------
# reconstruction terms
# --------------------------------------------------------------------------

def _pair(a, b):
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice_coefficient(generated, target):
    g, t = _pair(generated, target)
    g = g.astype(np.float64)
    t = t.astype(np.float64)
    return float(2.0 * np.sum(g * t) / (np.sum(g * g) + np.sum(t * t) + DICE_SMOOTH))


def dice_loss(generated, target):
    """``1 - dice_coefficient``, differentiable with respect to ``generated``."""
    generated = as_tensor(generated)
    g, t = _pair(generated, target)
    t = t.astype(g.dtype)
    num = 2.0 * np.sum(g * t, dtype=np.float64)
    den = np.sum(g * g, dtype=np.float64) + np.sum(t * t, dtype=np.float64) + DICE_SMOOTH
    out = Tensor(np.asarray(1.0 - num / den, dtype=g.dtype))

    def backward(grad):
        # d(num/den)/dg = (2t*den - num*2g) / den^2
        d = (2.0 * t * den - num * 2.0 * g) / (den * den)
        return (-(grad * d).astype(g.dtype),)

    return record("dice_loss", (generated,), out, backward)


def rmse(original, generated):
    o, g = _pair(original, generated)
    return float(np.sqrt(np.mean((o.astype(np.float64) - g.astype(np.float64)) ** 2)))


def mse_loss(generated, target):
    generated = as_tensor(generated)
    g, t = _pair(generated, target)
    diff = g - t.astype(g.dtype)
    out = Tensor(np.asarray(np.mean(diff * diff, dtype=np.float64), dtype=g.dtype))

    def backward(grad):
        return ((grad * 2.0 / diff.size) * diff,)

    return record("mse_loss", (generated,), out, backward)


# --------------------------------------------------------------------------
# classification
# --------------------------------------------------------------------------

def bce(prediction, labels, eps=1e-7):
    """Mean binary cross-entropy; predictions are clamped to ``[eps, 1-eps]``."""
    prediction = as_tensor(prediction)
    p = prediction.data
    y = np.asarray(labels, dtype=p.dtype).reshape(p.shape)
    inside = (p > eps) & (p < 1.0 - eps)
    pc = np.clip(p.astype(np.float64), eps, 1.0 - eps)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    out = Tensor(np.asarray(loss, dtype=p.dtype))

    def backward(grad):
        d = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / p.size
        return ((grad * d * inside).astype(p.dtype),)

    return record("bce", (prediction,), out, backward)


# --------------------------------------------------------------------------
# sparsity
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SparsityConfig:
    p: float = 0.2
    beta_min: float = 1.0
    beta_max: float = 5.0
    epsilon: float = 1e-7

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"target sparsity p must lie in (0, 1), got {self.p}")
        if self.beta_min > self.beta_max:
            raise ValueError("beta_min must not exceed beta_max")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class RegularizerOutput:
    p_hat: np.ndarray
    sum_kl: float
    beta2: float
    r: float
    # spread of the whole activation matrix; diagnostic only
    activation_std: float


def kl_bernoulli(p, p_hat, eps=1e-7):
    """KL(Bernoulli(p) || Bernoulli(p_hat)) in nats, elementwise.

    Both rates are clamped to ``[eps, 1-eps]``. Near ``p_hat == p`` the terms
    are written with ``log1p`` of the rate difference so tiny divergences
    keep full precision (and equal rates give exactly zero); further away
    the plain log-ratio form avoids the cancellation inside ``1 + d/p``.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    q = np.clip(np.asarray(p_hat, dtype=np.float64), eps, 1.0 - eps)
    p, q = np.broadcast_arrays(p, q)
    d = q - p
    near = np.abs(d) < 0.5 * np.minimum(p, 1.0 - p)
    with np.errstate(divide="ignore", invalid="ignore"):
        close = p * -np.log1p(d / p) + (1.0 - p) * -np.log1p(-d / (1.0 - p))
        far = p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))
    # rounding can leave -1e-17
    kl = np.maximum(np.where(near, close, far), 0.0)
    return float(kl) if kl.ndim == 0 else kl


def _kl_grad_q(p, q):
    return -p / q + (1.0 - p) / (1.0 - q)


def _regularize(acts, cfg):
    a = np.asarray(acts, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"activations must be a non-empty [batch, units] matrix, got shape {a.shape}")
    eps = cfg.epsilon
    ac = np.clip(a, eps, 1.0 - eps)
    p_hat = ac.mean(axis=0)
    kl = kl_bernoulli(cfg.p, p_hat, eps)
    sum_kl = float(np.sum(kl))
    span = cfg.beta_max - cfg.beta_min
    raw = cfg.beta_min + span * sum_kl
    beta2 = min(max(raw, cfg.beta_min), cfg.beta_max)
    return a, ac, p_hat, sum_kl, raw, beta2


def adaptive_sparse_regularizer(activations, config=None):
    """Adaptive KL sparsity penalty over a ``[batch, units]`` activation matrix.

    ``p_hat`` is the per-unit batch mean, ``sum_kl`` sums the Bernoulli KL
    divergence from the target rate over units, the strength
    ``beta2 = beta_min + (beta_max - beta_min) * sum_kl`` is clamped into
    ``[beta_min, beta_max]``, and the penalty is ``r = beta2 * sum_kl``.
    """
    cfg = config or SparsityConfig()
    a, _, p_hat, sum_kl, _, beta2 = _regularize(
        activations.data if isinstance(activations, Tensor) else activations, cfg)
    return RegularizerOutput(p_hat=p_hat, sum_kl=sum_kl, beta2=beta2,
                             r=beta2 * sum_kl, activation_std=float(a.std()))


def sparse_penalty(activations, config=None):
    """Differentiable form of :func:`adaptive_sparse_regularizer`.

    Returns ``(r_tensor, RegularizerOutput)``. The gradient flows through
    ``beta2`` as well as through ``sum_kl``; clamped activations and a clamped
    ``beta2`` contribute no gradient.
    """
    cfg = config or SparsityConfig()
    activations = as_tensor(activations)
    a, ac, p_hat, sum_kl, raw, beta2 = _regularize(activations.data, cfg)
    info = RegularizerOutput(p_hat=p_hat, sum_kl=sum_kl, beta2=beta2,
                             r=beta2 * sum_kl, activation_std=float(a.std()))
    out = Tensor(np.asarray(info.r, dtype=activations.dtype))

    def backward(grad):
        dbeta = (cfg.beta_max - cfg.beta_min) if cfg.beta_min < raw < cfg.beta_max else 0.0
        dr_ds = beta2 + sum_kl * dbeta
        q = np.clip(p_hat, cfg.epsilon, 1.0 - cfg.epsilon)
        ds_dq = _kl_grad_q(cfg.p, q)
        live = (a > cfg.epsilon) & (a < 1.0 - cfg.epsilon)
        g = float(grad) * dr_ds * ds_dq[None, :] / a.shape[0] * live
        return (g.astype(activations.dtype),)

    return record("adaptive_sparse_regularizer", (activations,), out, backward), info


def combined_loss(l_recon, r):
    """``L = L_recon + R``; accepts floats or tensors."""
    if isinstance(l_recon, Tensor) or isinstance(r, Tensor):
        return add(l_recon, r)
    return float(l_recon) + float(r)

"""Finite-difference gradient suite over every differentiable op and both models.

Each check builds small 64-bit inputs, projects the op's output onto a fixed
random direction (so every output element contributes) and compares tape
gradients with central differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels, losses
from . import tensor as T
from .models import REGULARIZED_LAYER, build_camp1, build_camp2

TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradResult:
    name: str
    max_rel_error: float
    probed: int = 0
    skipped: int = 0

    @property
    def passed(self):
        return bool(self.max_rel_error < TOLERANCE)


def _away_from_zero(rng, shape, margin=0.05):
    """Uniform values in [-1, 1] that keep clear of the kinks at 0."""
    v = rng.uniform(margin, 1.0, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    """Values whose pairwise gaps dwarf the finite-difference step (no pooling ties)."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.01 + rng.uniform(0, 1e-3, size=shape)) - n * 0.005


def _op_checks(rng):
    t = lambda a: T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)

    def projected(make):
        # a fixed random direction so every output element reaches the loss
        d = rng.normal(size=make().shape)
        return lambda: T.weighted_sum(make(), d)

    checks = []
    x = t(rng.normal(size=(2, 5, 6, 3)))
    k = t(rng.normal(size=(3, 3, 3, 4)))
    b = t(rng.normal(size=4))
    for stride in (1, 2):
        for pad in ("same", "valid"):
            checks.append((f"conv2d[s={stride},{pad}]",
                           projected(lambda s=stride, p=pad: T.conv2d(x, k, b, s, p)), [x, k, b]))
    # c_out < c_in takes the flipped-kernel input-gradient path
    k2 = t(rng.normal(size=(3, 3, 3, 2)))
    b2 = t(rng.normal(size=2))
    checks.append(("conv2d[narrow]", projected(lambda: T.conv2d(x, k2, b2)), [x, k2, b2]))

    xt = t(rng.normal(size=(2, 3, 4, 3)))
    kt = t(rng.normal(size=(3, 3, 3, 2)))
    bt = t(rng.normal(size=2))
    checks.append(("conv2d_transpose", projected(lambda: T.conv2d_transpose(xt, kt, bt, 2)), [xt, kt, bt]))

    xp = t(_distinct(rng, (2, 4, 6, 3)))
    checks.append(("maxpool2d", projected(lambda: T.maxpool2d(xp)), [xp]))

    xd = t(rng.normal(size=(4, 7)))
    wd = t(rng.normal(size=(7, 3)))
    bd = t(rng.normal(size=3))
    checks.append(("dense", projected(lambda: T.dense(xd, wd, bd)), [xd, wd, bd]))

    xb = t(rng.normal(size=(3, 4, 4, 2)))
    g = t(rng.uniform(0.5, 1.5, size=2))
    be = t(rng.normal(size=2))
    checks.append(("batchnorm2d[train]", projected(
        lambda: T.batchnorm2d(xb, g, be, np.zeros(2), np.ones(2), training=True)), [xb, g, be]))
    checks.append(("batchnorm2d[infer]", projected(
        lambda: T.batchnorm2d(xb, g, be, np.full(2, 0.1), np.full(2, 0.7), training=False)), [xb, g, be]))

    xa = t(_away_from_zero(rng, (3, 5)))
    checks.append(("leaky_relu", projected(lambda: T.leaky_relu(xa, 0.01)), [xa]))
    xs = t(rng.normal(scale=3.0, size=(3, 5)))
    checks.append(("sigmoid", projected(lambda: T.sigmoid(xs)), [xs]))

    xr = t(rng.normal(size=(2, 3, 4)))
    mask_seed = int(rng.integers(2**31))
    checks.append(("dropout", projected(
        lambda: T.dropout(xr, 0.3, True, np.random.default_rng(mask_seed))), [xr]))
    checks.append(("flatten", projected(lambda: T.flatten(xr)), [xr]))

    gen = t(rng.uniform(0.05, 0.95, size=(2, 4, 4, 1)))
    tgt = rng.uniform(0, 1, size=(2, 4, 4, 1))
    checks.append(("dice_loss", lambda: losses.dice_loss(gen, tgt), [gen]))
    checks.append(("mse_loss", lambda: losses.mse_loss(gen, tgt), [gen]))
    pr = t(rng.uniform(0.05, 0.95, size=(6, 1)))
    lab = rng.integers(0, 2, size=6)
    checks.append(("bce", lambda: losses.bce(pr, lab), [pr]))

    # sum_kl well inside (0, 1) so beta2 is unclamped and its gradient path is live
    acts = t(np.clip(0.2 + rng.normal(scale=0.08, size=(8, 6)), 0.02, 0.98))
    checks.append(("sparse_penalty", lambda: losses.sparse_penalty(acts, losses.SparsityConfig())[0], [acts]))
    return checks


def _regime(model, outs):
    """LeakyReLU input signs and pooling argmaxes of one forward pass."""
    parts, prev = [], None
    for spec in model.layers:
        out = outs[spec.name].data
        if spec.kind == "activation" and spec.hyper["fn"] == "leaky_relu":
            parts.append((prev > 0).ravel())
        elif spec.kind == "maxpool":
            parts.append(_kernels.maxpool2x2_forward(prev)[1].ravel())
        prev = out
    return np.concatenate([p.astype(np.int8) for p in parts])


def _model_checks(rng, size):
    checks = []
    x = rng.uniform(0, 1, size=(2, size, size, 1))

    ae = build_camp1(seed=int(rng.integers(2**31)), size=size, dtype=np.float64).train()
    tgt = rng.uniform(0, 1, size=(2, size, size, 1))
    last = {}

    def ae_loss():
        last["ae"] = ae.run(x)
        return losses.dice_loss(last["ae"]["conv3_act"], tgt)

    checks.append(("camp1+dice", ae_loss, [p.value for p in ae.trainable()],
                   lambda: _regime(ae, last["ae"])))

    clf = build_camp2(seed=int(rng.integers(2**31)), size=size, dtype=np.float64).train()
    labels = np.array([0, 1])
    drop_seed = int(rng.integers(2**31))
    state = {n: p.data.copy() for n, p in clf.parameters.items() if not p.trainable}

    def clf_loss():
        # restore BN running stats so every evaluation sees identical state
        for n, v in state.items():
            clf.parameters[n].data[...] = v
        outs = last["clf"] = clf.run(x, rng=np.random.default_rng(drop_seed))
        r, _ = losses.sparse_penalty(outs[REGULARIZED_LAYER])
        return losses.combined_loss(losses.bce(outs["dense2_act"], labels), r)

    checks.append(("camp2+bce+sparse", clf_loss, [p.value for p in clf.trainable()],
                   lambda: _regime(clf, last["clf"])))
    return checks


def gradient_suite(seed=0, size=32, max_entries=12, include_models=True):
    """Run every check and return a list of :class:`GradResult`.

    Op checks probe every coordinate; model checks probe ``max_entries``
    random coordinates per parameter tensor.
    """
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, tensors in _op_checks(rng):
        rep = T.gradcheck_report(fn, tensors)
        results.append(GradResult(name, rep.max_rel_error, rep.probed, rep.skipped))
    if include_models:
        for name, fn, tensors, regime in _model_checks(rng, size):
            rep = T.gradcheck_report(fn, tensors, h=1e-4, max_entries=max_entries,
                                     rng=np.random.default_rng(seed + 1), signature=regime)
            results.append(GradResult(name, rep.max_rel_error, rep.probed, rep.skipped))
    return results


def format_table(results):
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  max_rel_error  probed  skipped  status"]
    lines += [f"{r.name:<{width}}  {r.max_rel_error:13.3e}  {r.probed:6d}  {r.skipped:7d}  "
              f"{'PASS' if r.passed else 'FAIL'}" for r in results]
    return "\n".join(lines)

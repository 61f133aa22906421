"""Central-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericalError
from .tape import Tape


def relative_error(analytic, numeric):
    a = np.abs(analytic)
    n = np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-8)


@dataclass
class GradcheckReport:
    max_rel_error: float
    probed: int
    skipped: int


def gradcheck(loss_fn, tensors, h=1e-5, max_entries=None, rng=None, signature=None, shrink_steps=2):
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild a scalar loss from the current contents of
    ``tensors`` each time it is called. At most ``max_entries`` coordinates
    per tensor are probed (chosen with ``rng``); all of them by default.
    Returns the maximum relative error ``|a-n| / max(|a|, |n|, 1e-8)``.

    ``signature``, if given, is called right after each ``loss_fn()`` and
    returns an array describing the piecewise-linear regime (activation
    signs, pooling argmaxes). When a step changes it, the difference
    straddles a kink and says nothing about the derivative, so the step is
    shrunk tenfold up to ``shrink_steps`` times and then the coordinate is
    skipped. Use :func:`gradcheck_report` to see how many were skipped.
    """
    return gradcheck_report(loss_fn, tensors, h, max_entries, rng, signature, shrink_steps).max_rel_error


def gradcheck_report(loss_fn, tensors, h=1e-5, max_entries=None, rng=None, signature=None, shrink_steps=2):
    tensors = list(tensors)
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradcheck requires 64-bit tensors")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    base_sig = None if signature is None else np.asarray(signature())
    if loss.size != 1:
        raise ValueError("loss_fn must return a scalar")
    if not np.isfinite(loss.data).all():
        raise NumericalError("non-finite loss in gradcheck")
    tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def evaluate():
        value = float(loss_fn().data)
        same = base_sig is None or np.array_equal(np.asarray(signature()), base_sig)
        return value, same

    rng = np.random.default_rng(0) if rng is None else rng
    worst, probed, skipped = 0.0, 0, 0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        if max_entries is None or max_entries >= flat.size:
            probe = np.arange(flat.size)
        else:
            probe = rng.choice(flat.size, size=max_entries, replace=False)
        for i in probe:
            orig = flat[i]
            step = h
            for _ in range(shrink_steps + 1):
                flat[i] = orig + step
                up, same_up = evaluate()
                flat[i] = orig - step
                down, same_down = evaluate()
                flat[i] = orig
                if same_up and same_down:
                    break
                step /= 10.0
            else:
                skipped += 1
                continue
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalError(f"non-finite loss while perturbing entry {i}")
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, float(relative_error(ga.reshape(-1)[i], numeric)))
            probed += 1
    return GradcheckReport(worst, probed, skipped)

"""Finite-difference validation of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, make_rng, no_grad


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_elements: int | None = None, seed: int = 0) -> float:
    """Worst relative error between autodiff and central differences.

    ``f(*inputs)`` must return a single-element tensor. For every input that
    requires a gradient, each probed element is perturbed by +/- ``eps`` and
    the numeric derivative compared against the analytic one. The error of one
    input is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
    (a norm-wise relative error, which stays meaningful when individual
    entries are near zero). The worst value across inputs is returned.

    ``max_elements`` caps the number of probed entries per input; they are
    drawn without replacement from a generator seeded by ``seed``.
    """
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise ValueError("grad_check inputs must be finite")
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()

    rng = make_rng(seed)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(idx.size)
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                numeric[j] = (fp - fm) / (2.0 * eps)
        a = analytic.reshape(-1)[idx]
        denom = max(np.max(np.abs(a)), np.max(np.abs(numeric)))
        if denom == 0.0:
            continue
        worst = max(worst, float(np.max(np.abs(a - numeric)) / denom))
    for t in inputs:
        t.grad = None
    return worst

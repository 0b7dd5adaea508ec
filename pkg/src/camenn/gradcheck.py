"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from . import autograd
from .autograd import Tensor, backward


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                       entries=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. selected entries of x.

    ``f`` re-reads ``x.data`` on every call. Returns an array shaped like x
    with unchecked entries left at 0.
    """
    num = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = num.reshape(-1)
    if entries is None:
        entries = range(flat.size)
    with autograd.no_grad():
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
    return num


def check_gradients(f: Callable[[], Tensor], params: Mapping[str, Tensor],
                    h: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-7,
                    max_entries: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> dict:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    Checks every parameter tensor; within a tensor, at most ``max_entries``
    randomly chosen entries (all entries when None). Raises AssertionError
    naming the first failing parameter/entry. Returns per-parameter worst
    absolute deviations.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    backward(loss)
    if rng is None:
        rng = np.random.default_rng(0)
    report = {}
    for name, p in params.items():
        assert p.grad is not None, f"no gradient reached parameter {name!r}"
        size = p.data.size
        if max_entries is not None and size > max_entries:
            entries = sorted(rng.choice(size, size=max_entries, replace=False).tolist())
        else:
            entries = range(size)
        num = numerical_gradient(f, p, h=h, entries=entries)
        ana = p.grad
        worst = 0.0
        for i in entries:
            a = ana.reshape(-1)[i]
            n = num.reshape(-1)[i]
            err = abs(a - n)
            tol = rtol * max(abs(a), abs(n)) + atol
            assert err <= tol, (
                f"gradient mismatch in {name!r} entry {i}: "
                f"analytic={a:.10g} numeric={n:.10g} |diff|={err:.3g} tol={tol:.3g}")
            worst = max(worst, err)
        report[name] = worst
    return report

"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def _eval(f: Callable[[], Tensor]) -> float:
    with no_grad():
        out = f()
    v = out.data
    if v.size != 1:
        raise GradCheckError(f"graph builder returned shape {v.shape}, expected a scalar")
    val = float(v.reshape(-1)[0])
    if not np.isfinite(val):
        raise GradCheckError("non-finite value during finite differencing")
    return val


def numeric_grad(f: Callable[[], Tensor], t: Tensor, step: float = 1e-5,
                 indices: np.ndarray | None = None) -> np.ndarray:
    flat = t.data.reshape(-1)
    out = np.full(flat.size, np.nan)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + step
        fp = _eval(f)
        flat[i] = orig - step
        fm = _eval(f)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(t.shape)


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor] | dict[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic and central-difference gradients of ``f`` w.r.t. ``inputs``.

    The error for one input is ``max|analytic - numeric| / max(|numeric|_inf,
    |analytic|_inf)`` over the checked entries, i.e. relative to the gradient's
    own scale. ``max_entries`` subsamples large inputs deterministically.
    """
    named = dict(inputs) if isinstance(inputs, dict) else {f"input{i}": t for i, t in enumerate(inputs)}
    for t in named.values():
        if not np.all(np.isfinite(t.data)):
            raise GradCheckError("non-finite input")
        t.requires_grad = True
        t.grad = None
    out = f()
    if out.data.size != 1:
        raise GradCheckError(f"graph builder returned shape {out.shape}, expected a scalar")
    if not np.isfinite(out.data).all():
        raise GradCheckError("non-finite loss")
    out.backward()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, t in named.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        idx = None
        if max_entries is not None and t.size > max_entries:
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        numeric = numeric_grad(f, t, step, idx)
        a = analytic.reshape(-1)
        n = numeric.reshape(-1)
        if idx is not None:
            a, n = a[idx], n[idx]
        scale = max(np.abs(n).max(initial=0.0), np.abs(a).max(initial=0.0))
        err = float(np.abs(a - n).max(initial=0.0) / scale) if scale > 0 else 0.0
        report.errors[name] = err
    return report

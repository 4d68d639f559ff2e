"""Central finite-difference verification of reverse-mode gradients.

The check runs in float64 shadow precision: at step 1e-3, fp32 evaluation
noise alone (~1e-7 relative per op) would swamp a 1e-3 gradient tolerance,
so certifying the analytic gradient requires the difference quotient to be
computed in double precision. The function under test is still the same
code path; only the array dtype changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gram.errors import InvalidCheckError
from gram.numerics import tensor as T
from gram.numerics.rng import RngStream
from gram.numerics.tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: tuple = ()  # (param name, flat index, analytic, numeric)
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_err(a: float, n: float) -> float:
    denom = max(abs(a), abs(n))
    if denom < 1e-9:
        return 0.0
    return abs(a - n) / denom


def finite_diff_check(f, params: dict, *, step: float = 1e-3, tolerance: float = 1e-3,
                      n_samples: int = 200, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of scalar f(params) against central
    differences on a random subsample of parameter entries.

    Parameters must already be float64 tensors (shadow precision); the same
    objects are perturbed in place, so f may close over structures that hold
    them. f must be pure and deterministic: it is evaluated repeatedly and
    any internal randomness must be frozen.
    """
    for k, t in params.items():
        if t.data.dtype != np.float64:
            raise InvalidCheckError(
                f"param {k!r} is {t.data.dtype}; cast to float64 first (fp32 noise at "
                f"step {step} cannot certify a {tolerance} tolerance)")
        t.grad = None

    base = f(params)
    if base.data.size != 1:
        raise InvalidCheckError("finite_diff_check expects a scalar-valued function")
    repeat = f(params)
    if base.data != repeat.data:
        raise InvalidCheckError("function is not deterministic; cannot run finite differences")

    T.backward(base)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in params.items()}

    names = sorted(params)
    sizes = np.array([params[k].data.size for k in names])
    total = int(sizes.sum())
    rng = RngStream(seed, ("gradcheck",))
    n = min(n_samples, total)
    flat_picks = np.sort(rng.permutation(total)[:n])
    bounds = np.cumsum(sizes)

    report = GradCheckReport(max_rel_error=0.0, n_checked=n, tolerance=tolerance)
    with T.no_grad():
        for flat in flat_picks:
            pi = int(np.searchsorted(bounds, flat, side="right"))
            name = names[pi]
            idx = int(flat - (bounds[pi - 1] if pi else 0))
            t = params[name]
            flat_view = t.data.reshape(-1)
            orig = flat_view[idx]
            flat_view[idx] = orig + step
            f_plus = float(f(params).data)
            flat_view[idx] = orig - step
            f_minus = float(f(params).data)
            flat_view[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[idx])
            err = _rel_err(a, numeric)
            report.per_param.setdefault(name, 0.0)
            report.per_param[name] = max(report.per_param[name], err)
            if not report.worst or err > report.max_rel_error:
                report.worst = (name, idx, a, numeric)
            report.max_rel_error = max(report.max_rel_error, err)
    return report

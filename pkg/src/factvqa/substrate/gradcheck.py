"""Central finite-difference verification of analytic gradients.

The relative error per coordinate is |analytic - numeric| divided by
max(1, |analytic|, |numeric|): scale-aware for large gradients, absolute
near zero, so finite-difference noise (~1e-9 at step 1e-5 in float64)
never drowns a near-zero coordinate while a genuinely wrong gradient
still shows up at its own magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .params import ParameterStore
from .tensor import Tensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_param: str
    n_coords: int
    tolerance: float

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "worst_param": self.worst_param,
            "n_coords": self.n_coords,
            "tolerance": self.tolerance,
        }


def grad_check(f: Callable[[], Tensor], store: ParameterStore,
               step: float = 1e-5, tolerance: float = 1e-5,
               names: list[str] | None = None) -> GradCheckReport:
    """Compare backward() gradients of a deterministic scalar ``f`` against
    central finite differences over every coordinate of every trainable
    parameter. Frozen parameters are excluded from the report.
    """
    if names is None:
        names = store.trainable_names()
    else:
        names = [n for n in names if not store.frozen[n]]

    store.zero_grads()
    loss = f()
    loss.backward()
    analytic = {n: store.grads[n].copy() for n in names}

    max_err = 0.0
    worst = ""
    n_coords = 0
    for name in names:
        value = store.values[name]
        flat = value.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for i in range(flat.shape[0]):
            keep = flat[i]
            flat[i] = keep + step
            f_plus = float(f().data)
            flat[i] = keep - step
            f_minus = float(f().data)
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = grad_flat[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            n_coords += 1
            if err > max_err:
                max_err = err
                worst = f"{name}[{i}]"
    store.zero_grads()
    return GradCheckReport(
        passed=bool(max_err < tolerance),
        max_rel_error=float(max_err),
        worst_param=worst,
        n_coords=n_coords,
        tolerance=tolerance,
    )

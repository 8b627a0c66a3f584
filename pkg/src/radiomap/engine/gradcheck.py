"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_input: int
    worst_index: tuple
    tolerance: float

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_error:.3e} "
                f"(input {self.worst_input}, index {self.worst_index}, tol {self.tolerance:g})")


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f()
        x[i] = orig - step
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor is ``1e-6`` times the largest gradient magnitude of the whole
    check (``scale``), so components that are zero up to roundoff do not
    dominate the report.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if scale is None:
        scale = max(float(np.max(np.abs(n), initial=0.0)), float(np.max(np.abs(a), initial=0.0)))
    floor = max(1e-6 * scale, 1e-12)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def compare(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray], tol: float) -> GradCheckReport:
    scale = max([float(np.max(np.abs(x), initial=0.0)) for x in list(analytic) + list(numeric)] + [0.0])
    worst = (0.0, -1, ())
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        if np.asarray(a).shape != np.asarray(n).shape:
            raise ValueError(f"gradient shape mismatch for input {k}")
        if np.asarray(a).size == 0:
            continue
        err = relative_errors(a, n, scale)
        j = int(np.argmax(err))
        if err.flat[j] > worst[0] or worst[1] < 0:
            worst = (float(err.flat[j]), k, np.unravel_index(j, err.shape))
    return GradCheckReport(worst[0] <= tol, worst[0], worst[1], tuple(int(i) for i in worst[2]), tol)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-5,
               tol: float = 1e-4, wrt: Sequence[int] | None = None) -> GradCheckReport:
    """Check engine gradients of ``fn`` against central differences.

    ``fn`` receives one :class:`Tensor` per array in ``inputs`` and must return
    a scalar tensor.  If it returns a non-scalar, it is reduced with a fixed
    random projection so every output element contributes.  Failures are
    reported, never raised.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    proj = {}

    def scalar(out: Tensor) -> Tensor:
        from .ops import weighted_sum
        if out.size == 1 and out.ndim <= 1:
            return out
        if "w" not in proj:
            proj["w"] = np.random.default_rng(1234).standard_normal(out.shape)
        return weighted_sum(out, proj["w"])

    leaves = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    loss = scalar(fn(*leaves))
    loss.backward()
    analytic = [leaves[i].grad for i in wrt]

    def value():
        return float(scalar(fn(*[Tensor(a) for a in arrays])).data)

    numeric = [numeric_grad(value, arrays[i], step) for i in wrt]
    return compare(analytic, numeric, tol)

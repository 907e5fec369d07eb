"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Tensor, get_default_dtype, set_default_dtype


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: list = field(default_factory=list)
    tol: float = 1e-3

    @property
    def worst(self) -> float:
        return max(self.max_rel_error) if self.max_rel_error else 0.0

    @property
    def passed(self) -> bool:
        return bool(self.worst < self.tol)

    def __str__(self) -> str:
        errs = ", ".join(f"{e:.2e}" for e in self.max_rel_error)
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err [{errs}] (tol {self.tol:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)


def _projected(out: Tensor, weights: Optional[np.ndarray]) -> float:
    if weights is None:
        return float(out.data.astype(np.float64).sum())
    return float((out.data.astype(np.float64) * weights).sum())


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], *, seed: int = 0,
               tol: float = 1e-3, h: Optional[float] = None,
               wrt: Optional[Sequence[int]] = None, oracle_dtype=np.float64,
               name: str = "op") -> GradCheckReport:
    """Compare backprop gradients of ``fn`` against central differences.

    The analytic gradient comes from the active precision (32-bit by default).
    The difference quotients are evaluated in ``oracle_dtype``; with 32-bit
    evaluation the rounding of every output element touched by a perturbation
    swamps the quotient for small-gradient entries.  Pass ``oracle_dtype=None``
    to difference in the active precision instead.

    Non-scalar outputs are reduced with a fixed seeded random projection so every
    output element contributes.  ``wrt`` selects which inputs are checked; the
    others are constants.  Mismatches are reported, never raised.
    """
    dtype = get_default_dtype()
    if h is None:
        h = 1e-3 if dtype == np.float32 else 1e-6
    arrays = [np.array(a, dtype=dtype) for a in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)

    tensors = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    weights = None
    if out.size != 1:
        weights = np.random.default_rng(seed).uniform(0.5, 1.5, size=out.shape)
    seed_grad = np.ones_like(out.data) if weights is None else weights.astype(dtype)
    out.backward(seed_grad)

    fd_dtype = np.dtype(oracle_dtype or dtype).type
    fd_arrays = [a.astype(fd_dtype) for a in arrays]
    report = GradCheckReport(name=name, tol=tol)
    set_default_dtype(fd_dtype)
    try:
        for i in wrt:
            analytic = tensors[i].grad
            if analytic is None:
                analytic = np.zeros_like(arrays[i])
            numeric = np.zeros(arrays[i].shape, dtype=np.float64)
            flat = fd_arrays[i].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + fd_dtype(h)
                x_plus = float(flat[j])
                f_plus = _projected(fn(*[Tensor(a, dtype=fd_dtype) for a in fd_arrays]), weights)
                flat[j] = orig - fd_dtype(h)
                x_minus = float(flat[j])
                f_minus = _projected(fn(*[Tensor(a, dtype=fd_dtype) for a in fd_arrays]), weights)
                flat[j] = orig
                # divide by the representable step, not 2h
                numeric.reshape(-1)[j] = (f_plus - f_minus) / (x_plus - x_minus)
            err = relative_error(analytic.astype(np.float64), numeric)
            report.max_rel_error.append(float(err.max()) if err.size else 0.0)
    finally:
        set_default_dtype(dtype)
    return report

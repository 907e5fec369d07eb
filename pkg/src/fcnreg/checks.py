"""Finite-difference verification suite for every differentiable operation.

Inputs are drawn so that no perturbation crosses a kink: ReLU inputs stay
away from zero, warp coordinates keep their fractional parts inside
(0.2, 0.8) and never leave the grid, and TV differences are bounded away
from zero.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .losses import ncc, registration_loss, tv_l1
from .tensor import (
    BatchNormState,
    GradCheckReport,
    avgpool3d,
    batchnorm,
    conv3d,
    grad_check,
    relu,
    transposed_conv3d,
)
from .warp import upsample_field, warp_tensor


def _distinct(rng: np.random.Generator, shape, lo: float, hi: float) -> np.ndarray:
    """Values in [lo, hi] that are pairwise at least (hi - lo) / size apart."""
    n = int(np.prod(shape))
    return (lo + (hi - lo) * rng.permutation(n) / max(n - 1, 1)).reshape(shape)


def knot_free_field(rng: np.random.Generator, dims, batch: int = 1) -> np.ndarray:
    """Field whose sample points sit strictly between grid knots and inside the grid.

    Every displacement has magnitude in [0.2, 0.8]; it points back into the
    grid on the last slice of its axis.  Values are distinct, which also keeps
    forward differences away from zero.
    """
    mag = _distinct(rng, (batch, 3, *dims), 0.2, 0.8)
    sign = np.where(rng.random(mag.shape) < 0.5, -1.0, 1.0)
    for axis, n in enumerate(dims):
        first = [slice(None)] * 5
        last = [slice(None)] * 5
        first[1] = last[1] = axis
        first[2 + axis] = 0
        last[2 + axis] = n - 1
        sign[tuple(first)] = 1.0
        sign[tuple(last)] = -1.0
    return mag * sign


def _case_conv(rng):
    stride = int(rng.integers(1, 3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.normal(size=(2, cin, 4, 3, 4))
    w = rng.normal(size=(cout, cin, 3, 3, 3))
    b = rng.normal(size=cout)
    return (lambda x, w, b: conv3d(x, w, b, stride=stride, padding=1)), [x, w, b]


def _case_tconv(rng):
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.normal(size=(2, cin, 2, 3, 2))
    w = rng.normal(size=(cin, cout, 3, 3, 3))
    b = rng.normal(size=cout)
    return (lambda x, w, b: transposed_conv3d(x, w, b, stride=2, padding=1,
                                              output_padding=1)), [x, w, b]


def _case_pool(rng):
    x = rng.normal(size=(2, 2, 5, 4, 4))
    return (lambda x: avgpool3d(x, 3, 2, 1)), [x]


def _case_bn(rng):
    x = rng.normal(size=(3, 3, 2, 3, 2))
    gamma = rng.uniform(0.5, 1.5, size=3)
    beta = rng.normal(size=3)
    state = BatchNormState.create(3)
    return (lambda x, g, b: batchnorm(x, g, b, state, mode="train", update_stats=False)), \
        [x, gamma, beta]


def _case_relu(rng):
    mag = rng.uniform(0.05, 2.0, size=(2, 2, 3, 3, 3))
    x = mag * np.where(rng.random(mag.shape) < 0.5, -1.0, 1.0)
    return relu, [x]


def _case_warp(rng):
    dims = (4, 3, 4)
    moving = rng.normal(size=(2, 2, *dims))
    field = knot_free_field(rng, dims, batch=2)
    return warp_tensor, [moving, field]


def _case_ncc(rng):
    a = rng.normal(size=(2, 1, 3, 3, 3))
    b = 0.5 * a + rng.normal(size=a.shape)
    return ncc, [a, b]


def _case_tv(rng):
    known = _distinct(rng, (2, 3, 3, 4, 3), -2.0, 2.0)
    normalize = bool(rng.integers(2))
    return (lambda f: tv_l1(f, normalize=normalize)), [known]


def _case_upsample(rng):
    f = rng.normal(size=(1, 3, 2, 3, 2))
    factor = int(rng.choice([2, 4]))
    return (lambda f: upsample_field(f, factor)), [f]


def _case_loss(rng):
    dims = (4, 4, 3)
    fixed = rng.normal(size=(1, 1, *dims))
    moving = rng.normal(size=(1, 1, *dims))
    field = knot_free_field(rng, dims)
    lam = float(rng.uniform(0.01, 0.2))
    return (lambda f, m, d: registration_loss(f, m, d, lam=lam)), [fixed, moving, field]


SUITE: dict = {
    "conv3d": _case_conv,
    "transposed_conv3d": _case_tconv,
    "avgpool3d": _case_pool,
    "batchnorm": _case_bn,
    "relu": _case_relu,
    "warp_trilinear": _case_warp,
    "ncc": _case_ncc,
    "tv_l1": _case_tv,
    "upsample_field": _case_upsample,
    "registration_loss": _case_loss,
}


def run_suite(seed: int = 0, cases: int = 5, tol: float = 1e-3,
              ops: Optional[Iterable[str]] = None,
              progress: Optional[Callable[[GradCheckReport], None]] = None) -> list:
    """One report per op; its error list holds one entry per (case, input)."""
    reports = []
    for name in (ops or SUITE):
        build = SUITE[name]
        merged = GradCheckReport(name=name, tol=tol)
        for case in range(cases):
            rng = np.random.default_rng([seed, case, len(name)])
            fn, inputs = build(rng)
            merged.max_rel_error += grad_check(fn, inputs, seed=seed + case, tol=tol,
                                               name=name).max_rel_error
        reports.append(merged)
        if progress is not None:
            progress(merged)
    return reports

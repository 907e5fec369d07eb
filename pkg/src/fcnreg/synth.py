"""Synthetic textures and ground-truth deformations for verification runs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import DisplacementField, Volume
from .warp import warp_nearest, warp_trilinear

DEFAULT_OCTAVES = ((4.0, 1.0), (2.0, 0.5), (1.0, 0.25))


@dataclass
class SynthParams:
    """Gaussian-bump deformation settings plus the base texture recipe.

    ``octaves`` lists (smoothing sigma, weight) pairs of the noise layers
    summed into the base texture.
    """

    num_blobs: int = 6
    max_amplitude: float = 3.0
    sigma_range: tuple = (3.0, 6.0)
    seed: int = 0
    octaves: tuple = DEFAULT_OCTAVES

    def __post_init__(self):
        if self.max_amplitude < 0:
            raise ValueError("max_amplitude must be >= 0")
        if self.num_blobs < 0:
            raise ValueError("num_blobs must be >= 0")
        lo, hi = self.sigma_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"invalid sigma range {self.sigma_range}")


def _check_dims(dims) -> tuple:
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or any(n < 4 or n % 4 for n in dims):
        raise ValueError(f"dims must be three positive multiples of 4, got {dims}")
    return dims


def make_base_texture(dims, seed: int = 0, octaves=DEFAULT_OCTAVES) -> Volume:
    """Sum of smoothed noise layers, min-max scaled to [0, 1]."""
    rng = np.random.default_rng(seed)
    acc = np.zeros(tuple(dims), dtype=np.float64)
    for sigma, weight in octaves:
        layer = gaussian_filter(rng.standard_normal(tuple(dims)), sigma, mode="reflect")
        std = layer.std()
        if std > 0:
            acc += weight * layer / std
    lo, hi = acc.min(), acc.max()
    if hi > lo:
        acc = (acc - lo) / (hi - lo)
    else:
        acc[:] = 0.5
    return Volume(acc)


def synth_field(dims, params: SynthParams) -> DisplacementField:
    """Sum of Gaussian bumps, rescaled so the largest displacement norm is ``max_amplitude``."""
    dims = _check_dims(dims)
    rng = np.random.default_rng(params.seed)
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    field = np.zeros((3, *dims))
    for _ in range(params.num_blobs):
        centre = rng.uniform(0, np.array(dims) - 1)
        amp = rng.uniform(-1.0, 1.0, size=3)
        sigma = rng.uniform(*params.sigma_range)
        r2 = sum((g - c) ** 2 for g, c in zip(grid, centre))
        bump = np.exp(-r2 / (2 * sigma ** 2))
        field += amp[:, None, None, None] * bump
    peak = np.sqrt((field ** 2).sum(axis=0)).max()
    if peak > 0:
        field *= params.max_amplitude / peak
    return DisplacementField(field)


def make_synthetic_pair(base: Volume, params: SynthParams):
    """``(fixed, moving, truth)`` with ``moving = base`` and ``fixed = warp(base, truth)``.

    Under the engine's convention ``fixed(v) = moving(v + truth(v))``, so the
    field that registers moving onto fixed is exactly ``truth``.
    """
    _check_dims(base.dims)
    truth = synth_field(base.dims, params)
    fixed = warp_trilinear(base, truth)
    return fixed, Volume(base.data.copy()), truth


def threshold_labels(vol: Volume, level: float = 0.5) -> Volume:
    """Binary label map (1 where intensity exceeds ``level``)."""
    return Volume((vol.data > level).astype(np.float32))


@dataclass
class SyntheticCase:
    base: Volume
    fixed: Volume
    moving: Volume
    truth: DisplacementField
    fixed_labels: Optional[Volume] = None
    moving_labels: Optional[Volume] = None


def make_corpus(count: int, dims, params: Optional[SynthParams] = None,
                labels: bool = False) -> list:
    """``count`` independent cases; each draws its own texture and deformation.

    Child seeds come from ``numpy.random.SeedSequence(params.seed)`` so the
    corpus is a pure function of ``(count, dims, params)``.
    """
    params = params or SynthParams()
    dims = _check_dims(dims)
    cases = []
    for child in np.random.SeedSequence(params.seed).spawn(count):
        tex_seed, field_seed = (int(s) for s in child.generate_state(2))
        base = make_base_texture(dims, tex_seed, params.octaves)
        p = SynthParams(params.num_blobs, params.max_amplitude, params.sigma_range, field_seed,
                        params.octaves)
        fixed, moving, truth = make_synthetic_pair(base, p)
        case = SyntheticCase(base, fixed, moving, truth)
        if labels:
            case.moving_labels = threshold_labels(moving)
            case.fixed_labels = warp_nearest(case.moving_labels, truth)
        cases.append(case)
    return cases

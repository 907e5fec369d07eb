"""Unsupervised training, feedforward inference and direct field optimisation."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .losses import (
    DEFAULT_LAMBDA,
    LEVEL_NAMES,
    LossReport,
    LossWeights,
    multires_loss,
    registration_loss_report,
)
from .network import ArchitectureConfig, Network, build_network
from .tensor import Tensor
from .volume import DisplacementField, Volume

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    """The loss became NaN or infinite."""

    def __init__(self, iteration: int, report: Optional[LossReport]):
        levels = ""
        if report is not None:
            levels = ", ".join(f"{lv.level}: ncc={lv.ncc:.4g} tv={lv.tv:.4g} loss={lv.loss:.4g}"
                               for lv in report.levels)
        super().__init__(f"non-finite loss at iteration {iteration} ({levels})")
        self.iteration = iteration
        self.report = report


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    iterations: int = 2000
    batch_size: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_interval: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


# "paper" keeps the published recipe; "desk" is sized for a single CPU core
PRESETS = {
    "desk": TrainConfig(iterations=2000, batch_size=8),
    "paper": TrainConfig(iterations=10000, batch_size=64),
}


def preset(name: str, **overrides) -> TrainConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(base, **overrides)


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)``.

    Inputs are left untouched.  Parameters without a gradient are carried over.
    """
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        if g is None:
            new_params[name], new_m[name], new_v[name] = p, m, v
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_params, AdamState(new_m, new_v, t)


def gd_step(params: dict, grads: dict, lr: float) -> dict:
    return {name: (p - lr * grads[name]).astype(p.dtype) if grads.get(name) is not None else p
            for name, p in params.items()}


# -- pair sampling ----------------------------------------------------------

def sample_pair_indices(n: int, rng: np.random.Generator, include_self: bool = False) -> tuple:
    if n < 2:
        raise ValueError(f"need at least 2 images to form pairs, got {n}")
    i = int(rng.integers(n))
    if include_self:
        return i, int(rng.integers(n))
    j = int(rng.integers(n - 1))
    return i, j + (j >= i)


def sample_pair(dataset: Sequence[Volume], rng: np.random.Generator, include_self: bool = False):
    """Uniform ordered (fixed, moving) pair; self-pairs excluded unless requested."""
    i, j = sample_pair_indices(len(dataset), rng, include_self)
    return dataset[i], dataset[j]


def _stack(volumes) -> np.ndarray:
    return np.stack([v.data if isinstance(v, Volume) else np.asarray(v, np.float32)
                     for v in volumes])[:, None].astype(np.float32)


# -- training ---------------------------------------------------------------

def network_loss(net: Network, fixed: np.ndarray, moving: np.ndarray, weights: LossWeights,
                 mode: str = "train", update_stats: bool = True):
    """Forward a batch and score it: multires uses all heads, others the full-res field."""
    fields = net.forward(fixed, moving, mode=mode, update_stats=update_stats)
    if net.variant == "multires":
        return multires_loss(fixed, moving, fields, weights)
    return registration_loss_report(fixed, moving, fields[-1], weights.lam, weights.tv_mean)


def train_network(dataset: Sequence[Volume], arch: ArchitectureConfig,
                  config: Optional[TrainConfig] = None,
                  pairs: Optional[Sequence[tuple]] = None,
                  callback: Optional[Callable[[int, LossReport], None]] = None):
    """Fit a network by minimising the registration loss on sampled pairs.

    Without ``pairs`` every ordered pair of distinct images is a candidate;
    with ``pairs`` (index tuples into ``dataset``) batches draw uniformly from
    that list.  Returns ``(network, reports)`` with one report per iteration.
    """
    config = config or TrainConfig()
    for v in dataset:
        if tuple(v.dims) != arch.dims:
            raise ValueError(f"dataset volume dims {v.dims} do not match architecture {arch.dims}")
    if pairs is not None and len(pairs) == 0:
        raise ValueError("pairs must not be empty")
    net = build_network(arch, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    reports = []
    for it in range(config.iterations):
        if pairs is None:
            idx = [sample_pair_indices(len(dataset), rng) for _ in range(config.batch_size)]
        else:
            idx = [pairs[int(k)] for k in rng.integers(len(pairs), size=config.batch_size)]
        fixed = _stack([dataset[i] for i, _ in idx])
        moving = _stack([dataset[j] for _, j in idx])

        net.zero_grad()
        loss, report = network_loss(net, fixed, moving, config.weights)
        if not np.isfinite(report.total):
            raise TrainingDivergedError(it, report)
        loss.backward()
        current = {k: t.data for k, t in net.params.items()}
        grads = {k: t.grad for k, t in net.params.items()}
        updated, state = adam_step(current, grads, state, config.learning_rate,
                                   config.beta1, config.beta2, config.eps)
        for k, t in net.params.items():
            t.data = updated[k]
        reports.append(report)
        if callback is not None:
            callback(it, report)
        if config.log_interval and it % config.log_interval == 0:
            log.info("iter %d total %.5f", it, report.total)
    net.zero_grad()
    return net, reports


LOG_COLUMNS = ["iteration"] + [f"{lv}_{q}" for lv in LEVEL_NAMES for q in ("ncc", "tv", "loss")] \
    + ["total"]


def training_log_csv(reports: Sequence[LossReport]) -> str:
    """One row per iteration; levels a variant does not train are left blank."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for it, rep in enumerate(reports):
        row = [it]
        for name in LEVEL_NAMES:
            lv = rep.level(name)
            row += ["", "", ""] if lv is None else [repr(lv.ncc), repr(lv.tv), repr(lv.loss)]
        row.append(repr(rep.total))
        writer.writerow(row)
    return buf.getvalue()


# -- inference --------------------------------------------------------------

def register_infer(net: Network, fixed: Volume, moving: Volume) -> DisplacementField:
    """Feedforward registration: eval-mode forward, finest field, no state change."""
    fixed_dims = fixed.dims if isinstance(fixed, Volume) else np.shape(fixed)[-3:]
    moving_dims = moving.dims if isinstance(moving, Volume) else np.shape(moving)[-3:]
    if tuple(fixed_dims) != tuple(moving_dims):
        raise ValueError(f"fixed dims {tuple(fixed_dims)} and moving dims "
                         f"{tuple(moving_dims)} differ")
    fields = net.forward(fixed, moving, mode="eval")
    return DisplacementField(fields[-1].data[0])


# -- direct optimisation ----------------------------------------------------

@dataclass
class DirectConfig:
    """Direct field optimisation settings; defaults are the calibrated desk preset."""

    lam: float = DEFAULT_LAMBDA
    learning_rate: float = 0.02
    iterations: int = 300
    optimizer: str = "adam"
    tv_mean: bool = True


DIRECT_PRESETS = {"desk": DirectConfig()}


def register_direct(fixed: Volume, moving: Volume, lam: Optional[float] = None,
                    lr: Optional[float] = None, iterations: Optional[int] = None,
                    config: Optional[DirectConfig] = None):
    """Optimise a full-resolution field directly, starting from zero.

    Returns ``(field, losses)`` where ``losses[i]`` is the objective of the
    ``i``-th iterate (``losses[0]`` is the zero field, the last entry the field
    after the final update).  The returned field is the iterate with the lowest
    objective: Adam rescales the fixed-magnitude TV subgradient to full steps,
    so late iterates jitter by about ``lr`` around the optimum, and on an
    already aligned pair the zero field itself is the best answer.
    """
    config = config or DirectConfig()
    lam = config.lam if lam is None else lam
    lr = config.learning_rate if lr is None else lr
    iterations = config.iterations if iterations is None else iterations
    if fixed.dims != moving.dims:
        raise ValueError(f"fixed dims {fixed.dims} and moving dims {moving.dims} differ")
    if config.optimizer not in ("adam", "gd"):
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    f = fixed.data[None, None]
    m = moving.data[None, None]
    params = {"field": np.zeros((1, 3, *fixed.dims), dtype=np.float32)}
    state = AdamState()
    losses = []
    best_value, best_field = np.inf, params["field"]
    for it in range(iterations + 1):
        t = Tensor(params["field"], requires_grad=it < iterations)
        loss, _ = registration_loss_report(f, m, t, lam, config.tv_mean)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(it, None)
        losses.append(value)
        if value < best_value:
            best_value, best_field = value, params["field"]
        if it == iterations:
            break
        loss.backward()
        grads = {"field": t.grad}
        if config.optimizer == "adam":
            params, state = adam_step(params, grads, state, lr)
        else:
            params = gd_step(params, grads, lr)
    return DisplacementField(best_field[0]), losses

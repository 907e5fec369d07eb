"""Adam, pair sampling, network training, inference and direct optimisation."""
import math
import threading

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.stats import chisquare

from fcnreg import training
from fcnreg.evaluation import endpoint_error, ncc_value
from fcnreg.losses import LossReport, LossWeights
from fcnreg.network import ArchitectureConfig, build_network, serialize
from fcnreg.synth import SynthParams, make_base_texture, make_corpus, make_synthetic_pair
from fcnreg.training import (
    AdamState,
    DirectConfig,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    preset,
    register_direct,
    register_infer,
    sample_pair_indices,
    train_network,
    training_log_csv,
)
from fcnreg.volume import DisplacementField, Volume
from fcnreg.warp import warp_trilinear

DIMS = (8, 8, 8)


def hand_adam(p, steps, lr=0.1, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam on f(p) = p^2, written out term by term."""
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = 2.0 * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(p)
    return trace


# -- Adam -----------------------------------------------------------------------

def test_adam_three_step_trace():
    params = {"p": np.array([1.0])}
    state = AdamState()
    got = []
    for _ in range(3):
        params, state = adam_step(params, {"p": 2.0 * params["p"]}, state, lr=0.1)
        got.append(float(params["p"][0]))
    assert_allclose(got, hand_adam(1.0, 3), atol=1e-6)
    assert_allclose(got[0], 0.9, atol=1e-6)  # first step is lr * sign(g)
    assert state.t == 3


def test_adam_first_step_is_sign_step():
    g = np.array([3.0, -0.02, 1e-3, -50.0])
    new, _ = adam_step({"p": np.zeros(4)}, {"p": g}, AdamState(), lr=0.01)
    assert_allclose(new["p"], -0.01 * np.sign(g), rtol=1e-3)


def test_adam_zero_gradient_is_a_no_op():
    p = {"w": np.array([0.5, -1.0])}
    new, state = adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=1.0)
    assert_array_equal(new["w"], p["w"])
    assert_array_equal(state.m["w"], 0)
    assert_array_equal(state.v["w"], 0)


def test_adam_is_pure():
    p = {"w": np.array([0.5, -1.0])}
    g = {"w": np.array([0.1, 0.2])}
    s0 = AdamState()
    a, sa = adam_step(p, g, s0)
    b, sb = adam_step(p, g, s0)
    assert_array_equal(a["w"], b["w"])
    assert_array_equal(sa.v["w"], sb.v["w"])
    assert_array_equal(p["w"], [0.5, -1.0])
    assert s0.t == 0 and not s0.m


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(FloatingPointError):
        adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, AdamState())


# -- pair sampling --------------------------------------------------------------

def test_pair_sampling_uniform_over_ordered_distinct_pairs():
    rng = np.random.default_rng(0)
    draws = [sample_pair_indices(3, rng) for _ in range(6000)]
    assert all(i != j for i, j in draws)
    pairs = [(i, j) for i in range(3) for j in range(3) if i != j]
    counts = [sum(1 for d in draws if d == p) for p in pairs]
    assert chisquare(counts).pvalue > 0.01


def test_pair_sampling_reproducible_and_self_flag():
    a = [sample_pair_indices(5, np.random.default_rng(3)) for _ in range(3)]
    b = [sample_pair_indices(5, np.random.default_rng(3)) for _ in range(3)]
    assert a == b
    rng = np.random.default_rng(1)
    assert any(i == j for i, j in (sample_pair_indices(2, rng, True) for _ in range(50)))
    with pytest.raises(ValueError):
        sample_pair_indices(1, rng)


def test_presets():
    assert (preset("desk").iterations, preset("desk").batch_size) == (2000, 8)
    assert (preset("paper").iterations, preset("paper").batch_size) == (10000, 64)
    assert preset("paper").learning_rate == 1e-3
    assert preset("desk", iterations=5, batch_size=None).iterations == 5
    with pytest.raises(ValueError):
        preset("laptop")


# -- training -------------------------------------------------------------------

def _dataset(n=4, seed=0):
    return [make_base_texture(DIMS, seed + i) for i in range(n)]


def test_training_is_deterministic():
    data = _dataset()
    cfg = TrainConfig(iterations=4, batch_size=2, seed=7)
    net_a, rep_a = train_network(data, ArchitectureConfig("multires", DIMS), cfg)
    net_b, rep_b = train_network(data, ArchitectureConfig("multires", DIMS), cfg)
    assert serialize(net_a) == serialize(net_b)
    assert training_log_csv(rep_a) == training_log_csv(rep_b)


def test_training_does_not_mutate_dataset():
    data = _dataset()
    copies = [v.data.copy() for v in data]
    train_network(data, ArchitectureConfig("coarse_interp", DIMS),
                  TrainConfig(iterations=3, batch_size=2))
    for v, c in zip(data, copies):
        assert_array_equal(v.data, c)


def test_identity_pairs_stay_near_optimum():
    # Adam's first steps are lr * sign(g) on every head weight, so the field
    # kicks away from zero before settling; judge after a 10 step transient
    dims = (16, 16, 16)
    img = make_base_texture(dims, 1)
    data = [img, Volume(img.data.copy())]
    _, reports = train_network(data, ArchitectureConfig("multires", dims),
                               TrainConfig(iterations=30, batch_size=2),
                               pairs=[(0, 1), (1, 0)])
    assert_allclose(reports[0].total, -1.9, atol=1e-6)
    assert max(r.total for r in reports[10:]) <= -1.9 + 0.05


def test_training_reduces_loss_on_synthetic_pairs():
    cases = make_corpus(6, DIMS, SynthParams(max_amplitude=1.5, sigma_range=(2, 3), seed=1))
    data, pairs = [], []
    for c in cases:
        pairs.append((len(data), len(data) + 1))
        data += [c.fixed, c.moving]
    _, reports = train_network(data, ArchitectureConfig("multires", DIMS),
                               TrainConfig(iterations=60, batch_size=4, learning_rate=1e-3),
                               pairs=pairs)
    first = np.mean([r.total for r in reports[:5]])
    last = np.mean([r.total for r in reports[-10:]])
    assert last < first


def test_divergence_reports_iteration(monkeypatch):
    def broken(*args, **kwargs):
        return None, LossReport([], float("nan"))

    monkeypatch.setattr(training, "network_loss", broken)
    with pytest.raises(TrainingDivergedError, match="iteration 0"):
        train_network(_dataset(), ArchitectureConfig("multires", DIMS),
                      TrainConfig(iterations=2, batch_size=1))


def test_training_log_columns():
    _, reports = train_network(_dataset(), ArchitectureConfig("no_pool", DIMS),
                               TrainConfig(iterations=2, batch_size=1))
    lines = training_log_csv(reports).splitlines()
    assert lines[0].split(",")[:4] == ["iteration", "coarse_ncc", "coarse_tv", "coarse_loss"]
    row = lines[1].split(",")
    assert row[1:7] == [""] * 6 and row[7] != ""


# -- inference ------------------------------------------------------------------

def test_untrained_inference_is_zero_and_repeatable():
    net = build_network(ArchitectureConfig("multires", DIMS))
    f, m = _dataset(2)
    a = register_infer(net, f, m)
    assert_array_equal(a.data, 0)
    assert_array_equal(register_infer(net, f, m).data, a.data)


def test_inference_is_thread_safe():
    net = build_network(ArchitectureConfig("multires", DIMS), seed=1)
    rng = np.random.default_rng(0)
    for name, kind, *_ in net.plan:
        if kind == "reg":
            w = net.params[f"{name}.weight"]
            w.data = (0.01 * rng.normal(size=w.shape)).astype(np.float32)
    f, m = _dataset(2)
    expected = register_infer(net, f, m).data
    results = [None] * 4

    def work(i):
        results[i] = register_infer(net, f, m).data

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for r in results:
        assert_array_equal(r, expected)


def test_inference_rejects_mismatched_dims():
    net = build_network(ArchitectureConfig("multires", DIMS))
    with pytest.raises(ValueError, match="8, 8, 8.*8, 8, 4"):
        register_infer(net, Volume(np.zeros(DIMS)), Volume(np.zeros((8, 8, 4))))


# -- direct optimisation --------------------------------------------------------

def test_direct_zero_iterations_returns_zero_field():
    f, m = _dataset(2)
    field, losses = register_direct(f, m, iterations=0)
    assert_array_equal(field.data, 0)
    assert len(losses) == 1


def test_direct_self_pair_stays_put():
    img = make_base_texture((16, 16, 16), 3)
    field, losses = register_direct(img, Volume(img.data.copy()), iterations=60)
    assert_allclose(losses[0], -1.0, atol=1e-6)
    assert field.magnitude().mean() < 0.1
    assert max(losses[10:]) <= losses[0] + 0.05


def test_direct_recovers_synthetic_field():
    base = make_base_texture((32, 48, 48), 5)
    fixed, moving, truth = make_synthetic_pair(base, SynthParams(seed=9))
    field, losses = register_direct(fixed, moving)
    assert min(losses) < losses[0]
    zero = DisplacementField.zeros(truth.dims)
    assert endpoint_error(field, truth) <= 0.6 * endpoint_error(zero, truth)
    assert ncc_value(fixed, warp_trilinear(moving, field)) > ncc_value(fixed, moving)


def test_direct_gd_option_and_validation():
    f, m = _dataset(2)
    field, _ = register_direct(f, m, config=DirectConfig(optimizer="gd", learning_rate=100.0,
                                                         iterations=3))
    assert field.dims == DIMS
    with pytest.raises(ValueError):
        register_direct(f, m, config=DirectConfig(optimizer="lbfgs"))
    with pytest.raises(ValueError):
        register_direct(f, Volume(np.zeros((8, 8, 4))))


def test_loss_weights_reach_training():
    # all weight on the fine head: the report total equals the fine level loss
    _, reports = train_network(_dataset(), ArchitectureConfig("multires", DIMS),
                               TrainConfig(iterations=1, batch_size=1,
                                           weights=LossWeights(0, 0, 1)))
    assert_allclose(reports[0].total, reports[0].level("fine").loss, atol=1e-6)

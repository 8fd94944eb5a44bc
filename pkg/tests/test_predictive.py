import numpy as np
import pytest
from scipy.special import softmax
from scipy.stats import ks_2samp

from divehmm.ctmc_kernel import SharedMovementParams, kernel_set
from divehmm.data_model import CelestialLabel, Dataset, TagRecord
from divehmm.predictive import (FixedModel, PredictiveDistribution, SimulationStart,
                                counterfactual_assessment, generate_synthetic_tag, hitting_times,
                                ks_uniform, predictive_hitting_distribution, randomized_pit,
                                simulate_hitting_times, simulate_trajectory, template_starts)
from divehmm.sampler import PosteriorSample
from divehmm.synthetic import TRUTH_SHARED, truth_population
from divehmm.transition_model import assemble_coefficients

import oracles

DEEP, SHALLOW = 11, 1  # default grid: bin 11 midpoint 900 m, bin 1 midpoint 15 m


def test_hitting_times_hand_cases(grid):
    h = hitting_times([2, 5, 10, DEEP, 10, 4, SHALLOW, 3, DEEP], grid)
    assert (h.h1, h.h2, h.h1_censored, h.h2_censored) == (4, 9, False, False)
    assert h.gap == 5
    h = hitting_times([2, 3, 4], grid)
    assert (h.h1, h.h2, h.h1_censored, h.h2_censored) == (3, 3, True, True)
    h = hitting_times([DEEP, 6, 6, DEEP, 5], grid)  # never shallower than 200 m
    assert (h.h1, h.h1_censored, h.h2, h.h2_censored) == (1, False, 5, True)
    assert h.gap is None
    # bin 10 (600-800 m, midpoint 700) is not deep
    assert hitting_times([10, 10], grid).h1_censored


def test_start_validation(grid):
    with pytest.raises(ValueError):
        SimulationStart((1,) * 11)
    with pytest.raises(ValueError):
        SimulationStart((1,) * 12, state=5)
    with pytest.raises(ValueError):
        SimulationStart((1,) * 12, state=(0.5, 0.5, 0.5, 0.0, 0.0))
    with pytest.raises(ValueError):
        SimulationStart((99,) * 12).check_grid(grid)
    s = SimulationStart((1,) * 12, celestial=(0, 1))
    np.testing.assert_array_equal(s.schedule(4), [0, 1, 1, 1])


def test_templates():
    starts = template_starts(state=4, celestial=CelestialLabel.MOONLIT)
    assert [s.name for s in starts] == ["post_deep", "recovering", "shallow"]
    assert all(s.state == 4 and s.celestial == CelestialLabel.MOONLIT for s in starts)


def _single_kernel_model(grid, speed=1.31, pi=0.5):
    k = kernel_set(SharedMovementParams(speed, speed * 1.5, 0.8, 0.8), grid, 300.0)
    P = k[2] if pi == 0.5 else k[0]
    return FixedModel(np.repeat(P[None], 5, axis=0), np.zeros((5, 9, 5))), P


def test_simulated_h1_matches_absorption_law(grid):
    model, P = _single_kernel_model(grid)
    start = SimulationStart((1,) * 12)
    dist = predictive_hitting_distribution(start, [model], 20000, horizon=3000, grid=grid, seed=1)
    assert dist.censor_rate("h1") == 0.0
    pmf = oracles.absorption_pmf(P, grid.midpoints > 800, 0, 60)
    emp = np.bincount(dist.h1, minlength=61)[1:61] / dist.h1.size
    assert np.abs(emp - pmf).max() < 0.01


def test_h2_not_before_h1(grid):
    fixed, pop = truth_population()
    B = assemble_coefficients(pop.mean, fixed)
    kernels = kernel_set(TRUTH_SHARED, grid, 300.0)
    for start in template_starts():
        h1, h2 = simulate_hitting_times(start, kernels, np.broadcast_to(B, (500, 5, 9, 5)), grid, 576,
                                        np.random.default_rng(0))
        both = (h1 > 0) & (h2 > 0)
        assert np.all(h2[both] > h1[both])
        assert np.all(h1[h2 > 0] > 0)


def test_trajectory_follows_transition_model(grid):
    # covariate-free coefficients: type sequence is a fixed Markov chain
    rng = np.random.default_rng(2)
    ic = rng.standard_normal((5, 4))
    B = assemble_coefficients(ic, np.zeros((5, 8, 4)))
    kernels = kernel_set(TRUTH_SHARED, grid, 300.0)
    traj = simulate_trajectory(SimulationStart((1,) * 12), kernels, B, grid, 100_000, rng)
    s = traj.states
    counts = np.zeros((5, 5))
    np.add.at(counts, (s[:-1], s[1:]), 1)
    G = np.array([softmax(np.append(ic[k], 0.0)) for k in range(5)])
    np.testing.assert_allclose(counts / counts.sum(axis=1, keepdims=True), G, atol=0.02)
    # the bin after step t+1 is drawn from the kernel of the type at step t
    b = traj.bins - 1
    sel = (s[:-1] == 1) & (b[:-1] == 5)
    freq = np.bincount(b[1:][sel], minlength=grid.n_bins) / sel.sum()
    assert 0.5 * np.abs(freq - kernels[1, 5]).sum() < 0.05


def test_predictive_is_deterministic_and_order_invariant(grid):
    model, _ = _single_kernel_model(grid)
    other = FixedModel(kernel_set(TRUTH_SHARED, grid, 300.0), model.B)
    start = SimulationStart((1,) * 12)
    a = predictive_hitting_distribution(start, [model, other], 2000, 200, grid, seed=5)
    b = predictive_hitting_distribution(start, [model, other], 2000, 200, grid, seed=5)
    np.testing.assert_array_equal(a.h1, b.h1)
    np.testing.assert_array_equal(a.h2, b.h2)
    # reversed draws give the same pooled law
    r = predictive_hitting_distribution(start, [other, model], 2000, 200, grid, seed=5)
    assert ks_2samp(a.values("h1"), r.values("h1")).pvalue > 0.001


def test_distribution_summary_and_censoring():
    d = PredictiveDistribution(np.array([1, 2, 0, 4]), np.array([3, 0, 0, 8]), horizon=10, delta=60.0)
    np.testing.assert_array_equal(d.values("h1"), [1, 2, np.inf, 4])
    np.testing.assert_array_equal(d.values("gap"), [2, np.inf, np.inf, 4])
    assert d.censor_rate("h1") == 0.25
    assert d.tail("h1", 2) == 0.25 and d.cdf("h1", 2) == 0.5
    s = d.summary("h1")
    assert s["mean_min"] == pytest.approx((1 + 2 + 10 + 4) / 4)
    g = d.summary("gap")  # over paths that reached h1; caps at 10 - h1
    assert g["mean_min"] == pytest.approx((2 + 8 + 4) / 3)
    with pytest.raises(ValueError):
        d.values("h3")


def test_randomized_pit():
    sim = np.array([1.0, 2.0, 2.0, 3.0, np.inf])
    assert randomized_pit(sim, 2.0, False, 0.0) == pytest.approx(0.2)
    assert randomized_pit(sim, 2.0, False, 1.0) == pytest.approx(0.6)
    assert randomized_pit(sim, 3.0, True, 0.0) == pytest.approx(0.8)
    assert randomized_pit(sim, 3.0, True, 1.0) == pytest.approx(1.0)
    d, crit = ks_uniform(np.linspace(0.01, 0.99, 50))
    assert d < crit


def _exposed_dataset(grid, n_tags, seed, B, T=700, j=300):
    rng = np.random.default_rng(seed)
    kernels = kernel_set(TRUTH_SHARED, grid, 300.0)
    tags = [generate_synthetic_tag(kernels, B, grid, T, np.zeros(T, dtype=int), rng, f"s{i:02d}",
                                   exposure_index=j) for i in range(n_tags)]
    return Dataset(grid, tuple(tags)), kernels


def test_counterfactual_assessment_shapes(grid):
    fixed, pop = truth_population()
    B = assemble_coefficients(pop.mean, fixed)
    ds, kernels = _exposed_dataset(grid, 6, 0, B)
    res = counterfactual_assessment(ds, [FixedModel(kernels, B)], 200, seed=1)
    assert len(res.records) == 6 and res.summary["n_exposed"] == 6
    for r in res.records:
        assert 0.0 <= r.tail_p_h1 <= 1.0 and 0.0 <= r.pit_h1 <= 1.0
        assert r.h1_obs_steps >= 1
    again = counterfactual_assessment(ds, [FixedModel(kernels, B)], 200, seed=1)
    assert again.rows() == res.rows()


def test_counterfactual_requires_exposure(grid):
    ds = Dataset(grid, (TagRecord("a", 300.0 * np.arange(30), np.ones(30, int), np.zeros(30, int)),))
    with pytest.raises(ValueError):
        counterfactual_assessment(ds, [None], 10)


def test_posterior_draws_use_own_tag(grid):
    fixed, pop = truth_population()
    ds, _ = _exposed_dataset(grid, 2, 3, assemble_coefficients(pop.mean, fixed))
    sample = PosteriorSample(0, 0, np.log([0.45, 1.31]), np.array([0.83, 0.96]),
                             np.repeat(pop.mean[None], 2, 0), fixed, pop.mean, pop.cov, 0.0, ("s00", "s01"))
    res = counterfactual_assessment(ds, [sample], 50, seed=0)
    assert [r.tag_id for r in res.records] == ["s00", "s01"]
    bad = PosteriorSample(0, 0, sample.log_lambda, sample.pi, sample.intercepts, fixed, pop.mean,
                          pop.cov, 0.0, ("x", "y"))
    with pytest.raises(ValueError):
        counterfactual_assessment(ds, [bad], 50)


def test_synthetic_tag_layout(grid):
    fixed, pop = truth_population()
    rec, states = generate_synthetic_tag(TRUTH_SHARED, assemble_coefficients(pop.mean, fixed), grid, 50,
                                         np.full(50, 1), np.random.default_rng(0), return_states=True)
    assert len(rec) == 50 and states.shape == (50,)
    np.testing.assert_array_equal(np.diff(rec.times), 300.0)
    with pytest.raises(ValueError):
        generate_synthetic_tag(TRUTH_SHARED, np.zeros((5, 9, 5)), grid, 5, [0, 0], np.random.default_rng(0))

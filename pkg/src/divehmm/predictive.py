"""Forward simulation of dives, deep-dive hitting times, and counterfactual assessment.

Hitting times are counted in steps after the start: ``h1`` is the first
step whose bin midpoint exceeds the deep threshold; ``h2`` is the step at
which the path is deep again after first returning shallower than the
shallow threshold. A pattern not completed within the simulated horizon is
censored at the horizon.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import stats

from . import _numba
from .covariates import WINDOW
from .ctmc_kernel import N_STATES, KernelCache, SharedMovementParams, kernel_set
from .data_model import (DEFAULT_DEEP, DEFAULT_DELTA, DEFAULT_SHALLOW, CelestialLabel, Dataset, DepthGrid,
                         TagRecord, default_grid, segment_record)
from .likelihood import filtered_state

DEFAULT_HORIZON = 576
STATISTICS = ("h1", "h2", "gap")
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass(frozen=True)
class SimulationStart:
    """Twelve most recent bins (last one current), starting movement type, celestial regime.

    ``state`` is a 0-based type index or a length-K probability vector;
    ``celestial`` is one label for the whole run or a per-step schedule whose
    last label persists.
    """

    history: tuple[int, ...]
    state: int | tuple[float, ...] = 2
    celestial: int | tuple[int, ...] = CelestialLabel.DAY
    name: str = ""

    def __post_init__(self):
        hist = tuple(int(b) for b in self.history)
        if len(hist) != WINDOW:
            raise ValueError(f"history must hold exactly {WINDOW} bins, got {len(hist)}")
        if min(hist) < 1:
            raise ValueError("history bins are 1-based")
        object.__setattr__(self, "history", hist)
        if isinstance(self.state, (int, np.integer)):
            if not 0 <= self.state < N_STATES:
                raise ValueError(f"state must lie in 0..{N_STATES - 1}")
        else:
            p = np.asarray(self.state, dtype=float)
            if p.shape != (N_STATES,) or p.min() < 0 or not np.isclose(p.sum(), 1.0):
                raise ValueError("state distribution must be a probability vector over the types")
            object.__setattr__(self, "state", tuple(p.tolist()))
        cel = self.celestial
        if not isinstance(cel, (int, np.integer)):
            cel = tuple(int(c) for c in cel)
            if not cel:
                raise ValueError("celestial schedule is empty")
            object.__setattr__(self, "celestial", cel)

    def state_probs(self) -> np.ndarray:
        if isinstance(self.state, (int, np.integer)):
            p = np.zeros(N_STATES)
            p[self.state] = 1.0
            return p
        return np.asarray(self.state)

    def schedule(self, steps: int) -> np.ndarray:
        """Celestial code for each simulated step."""
        if isinstance(self.celestial, (int, np.integer)):
            return np.full(steps, int(self.celestial), dtype=np.int64)
        cel = np.asarray(self.celestial, dtype=np.int64)[:steps]
        if cel.size < steps:
            cel = np.concatenate([cel, np.full(steps - cel.size, cel[-1], dtype=np.int64)])
        return cel

    def check_grid(self, grid: DepthGrid):
        if max(self.history) > grid.n_bins:
            raise ValueError(f"history bin exceeds M={grid.n_bins}")


@dataclass(frozen=True)
class HittingTimes:
    """Steps to first deep bin and to the deep, shallow, deep-again pattern.

    Censored components hold the number of steps observed.
    """

    h1: int
    h2: int
    h1_censored: bool
    h2_censored: bool

    @property
    def gap(self) -> int | None:
        """``h2 - h1`` when both are observed."""
        if self.h1_censored or self.h2_censored:
            return None
        return self.h2 - self.h1


@dataclass(frozen=True)
class Trajectory:
    bins: np.ndarray
    states: np.ndarray


@dataclass(frozen=True)
class FixedModel:
    """Explicit kernels ``(K, M, M)`` and coefficients ``(K, p, K)``; stands in for a posterior draw."""

    kernels: np.ndarray
    B: np.ndarray


def hitting_times(bins, grid: DepthGrid, deep_threshold: float = DEFAULT_DEEP,
                  shallow_threshold: float = DEFAULT_SHALLOW) -> HittingTimes:
    """Scan a path of 1-based bins (step 1 first) for the deep-dive pattern."""
    bins = np.asarray(bins, dtype=np.int64)
    if bins.size == 0:
        raise ValueError("empty trajectory")
    mids = grid.midpoints[bins - 1]
    n = bins.size
    deep = np.flatnonzero(mids > deep_threshold)
    if deep.size == 0:
        return HittingTimes(n, n, True, True)
    h1 = int(deep[0]) + 1
    shallow = np.flatnonzero(mids[h1:] < shallow_threshold)
    if shallow.size:
        s = h1 + int(shallow[0])
        again = np.flatnonzero(mids[s + 1:] > deep_threshold)
        if again.size:
            return HittingTimes(h1, s + 2 + int(again[0]), False, False)
    return HittingTimes(h1, n, False, True)


def kernel_cdf(kernels: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(kernels, axis=-1)
    cdf[..., -1] = 1.0
    return np.ascontiguousarray(cdf)


def simulate_trajectory(start: SimulationStart, kernels: np.ndarray, B: np.ndarray, grid: DepthGrid,
                        horizon: int, rng: np.random.Generator,
                        deep_threshold: float = DEFAULT_DEEP) -> Trajectory:
    """Run the model forward ``horizon`` steps from ``start``.

    Each step draws the next bin from the current type's kernel row, builds
    covariates from the updated 13-bin window and that step's celestial
    label, then draws the next type.

    Parameters
    ----------
    kernels : (K, M, M) ndarray
        Per-type depth kernels, e.g. from :func:`divehmm.ctmc_kernel.kernel_set`.
    B : (K, p, K) ndarray
        The animal's transition coefficients.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    start.check_grid(grid)
    s0 = int(rng.choice(N_STATES, p=start.state_probs()))
    u = rng.random((horizon, 2))
    bins = np.empty(horizon, dtype=np.int64)
    states = np.empty(horizon, dtype=np.int64)
    _numba.simulate_path(kernel_cdf(kernels), np.ascontiguousarray(B, dtype=float), grid.midpoints,
                         np.asarray(start.history, dtype=np.int64) - 1, s0, start.schedule(horizon), u,
                         float(deep_threshold), bins, states)
    return Trajectory(bins + 1, states)


def simulate_hitting_times(start: SimulationStart, kernels: np.ndarray, Bs: np.ndarray, grid: DepthGrid,
                           horizon: int, rng: np.random.Generator, states0=None,
                           deep_threshold: float = DEFAULT_DEEP,
                           shallow_threshold: float = DEFAULT_SHALLOW, chunk: int = 512):
    """Hitting times of ``len(Bs)`` independent paths sharing kernels and start.

    Returns ``(h1, h2)`` step arrays where 0 marks censoring.
    """
    Bs = np.ascontiguousarray(Bs, dtype=float)
    n = Bs.shape[0]
    if states0 is None:
        states0 = rng.choice(N_STATES, size=n, p=start.state_probs())
    states0 = np.asarray(states0, dtype=np.int64)
    cdf = kernel_cdf(kernels)
    hist = np.asarray(start.history, dtype=np.int64) - 1
    sched = start.schedule(horizon)
    h1 = np.zeros(n, dtype=np.int64)
    h2 = np.zeros(n, dtype=np.int64)
    for a in range(0, n, chunk):
        b = min(n, a + chunk)
        u = rng.random((b - a, horizon, 2))
        _numba.simulate_hits(cdf, Bs[a:b], grid.midpoints, hist, states0[a:b], sched, u,
                             float(deep_threshold), float(shallow_threshold), h1[a:b], h2[a:b])
    return h1, h2


@dataclass
class PredictiveDistribution:
    """Pooled simulated hitting times. Censored entries are stored as 0 in the raw arrays."""

    h1: np.ndarray
    h2: np.ndarray
    horizon: int
    delta: float = DEFAULT_DELTA

    def values(self, stat: str) -> np.ndarray:
        """Float steps with censored values as ``inf``; ``gap`` is ``h2 - h1``."""
        h1 = np.where(self.h1 > 0, self.h1, np.inf)
        h2 = np.where(self.h2 > 0, self.h2, np.inf)
        if stat == "h1":
            return h1
        if stat == "h2":
            return h2
        if stat == "gap":
            with np.errstate(invalid="ignore"):
                return np.where(np.isfinite(h1), h2 - h1, np.inf)
        raise ValueError(f"unknown statistic {stat!r}")

    def cdf(self, stat: str, x: float) -> float:
        """``P(H <= x)``."""
        return float(np.mean(self.values(stat) <= x))

    def tail(self, stat: str, x: float) -> float:
        """``P(H < x)``, the predictive tail probability at an observed value."""
        return float(np.mean(self.values(stat) < x))

    def censor_rate(self, stat: str) -> float:
        return float(np.mean(~np.isfinite(self.values(stat))))

    def summary(self, stat: str) -> dict:
        """Mean, sd and quantiles in minutes.

        Censored paths count at the horizon (for ``gap``: the horizon minus
        ``h1``, over paths where ``h1`` was reached), so the mean and upper
        quantiles are lower bounds when the censor rate is positive.
        """
        v = self.values(stat)
        if stat == "gap":
            keep = self.h1 > 0
            v, cap = v[keep], self.horizon - self.h1[keep]
        else:
            cap = self.horizon
        if v.size == 0:
            nan = float("nan")
            return {"mean_min": nan, "sd_min": nan, **{f"q{int(round(q * 100)):02d}_min": nan for q in QUANTILES},
                    "censor_rate": 1.0}
        v = np.where(np.isfinite(v), v, cap) * self.delta / 60.0
        out = {"mean_min": float(v.mean()), "sd_min": float(v.std(ddof=1)) if v.size > 1 else 0.0}
        for q, x in zip(QUANTILES, np.quantile(v, QUANTILES)):
            out[f"q{int(round(q * 100)):02d}_min"] = float(x)
        out["censor_rate"] = self.censor_rate(stat)
        return out


def _sample_stream(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def _draw_model(sample, n: int, rng: np.random.Generator, grid: DepthGrid, delta: float,
                cache: KernelCache, animal: int | None):
    """Kernels and per-path coefficient arrays for one posterior draw.

    Without ``animal`` each path gets intercepts drawn from the population
    distribution, i.e. a new animal.
    """
    if isinstance(sample, FixedModel):
        return sample.kernels, np.broadcast_to(sample.B, (n,) + sample.B.shape)
    kernels = cache.kernel_set(sample.shared())
    if animal is not None:
        B = sample.animal(animal)
        return kernels, np.broadcast_to(B, (n,) + B.shape)
    K, d = sample.mean.shape
    L = np.linalg.cholesky(sample.cov)
    z = rng.standard_normal((n, K, d))
    intercepts = sample.mean + np.einsum("kij,nkj->nki", L, z)
    Bs = np.zeros((n, K, sample.fixed.shape[1] + 1, K))
    Bs[:, :, 0, :-1] = intercepts
    Bs[:, :, 1:, :-1] = sample.fixed
    return kernels, Bs


def predictive_hitting_distribution(start: SimulationStart, samples, n_sims: int,
                                    horizon: int = DEFAULT_HORIZON, grid: DepthGrid | None = None,
                                    deep_threshold: float = DEFAULT_DEEP,
                                    shallow_threshold: float = DEFAULT_SHALLOW,
                                    delta: float = DEFAULT_DELTA, seed: int = 0,
                                    animal: int | None = None,
                                    cache: KernelCache | None = None) -> PredictiveDistribution:
    """Composition sampling: ``n_sims`` paths per posterior draw, pooled with equal weight.

    Parameters
    ----------
    samples : sequence of PosteriorSample or FixedModel
    animal : int, optional
        Use this animal's intercepts; by default every path draws fresh
        intercepts from the population distribution.
    seed : int
        Draw ``s`` uses the stream ``(seed, s)``.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no posterior samples")
    if n_sims < 1 or horizon < 1:
        raise ValueError("n_sims and horizon must be positive")
    if grid is None:
        grid = default_grid()
    start.check_grid(grid)
    if cache is None:
        cache = KernelCache(grid, delta)
    h1s, h2s = [], []
    for s, sample in enumerate(samples):
        rng = _sample_stream(seed, s)
        kernels, Bs = _draw_model(sample, n_sims, rng, grid, delta, cache, animal)
        h1, h2 = simulate_hitting_times(start, kernels, Bs, grid, horizon, rng,
                                        deep_threshold=deep_threshold, shallow_threshold=shallow_threshold)
        h1s.append(h1)
        h2s.append(h2)
    return PredictiveDistribution(np.concatenate(h1s), np.concatenate(h2s), horizon, delta)


def template_starts(state: int | tuple[float, ...] = 2, celestial: int = CelestialLabel.DAY) -> list[SimulationStart]:
    """The three shipped 12-bin start sequences: post-deep, recovering, shallow."""
    text = resources.files("divehmm").joinpath("data/templates.json").read_text()
    return [SimulationStart(tuple(t["history"]), state, celestial, t["name"])
            for t in json.loads(text)["templates"]]


# --- counterfactual assessment ---------------------------------------------

@dataclass(frozen=True)
class TailProbability:
    """Observed statistics of one exposed animal and their predictive tail probabilities.

    ``tail_p_*`` are plain ``P(H < h_obs)``; ``pit_*`` are randomized PIT
    values. A censored observation makes the plain tail probability a lower
    bound. ``gap`` entries are NaN when ``h1`` was not observed.
    """

    tag_id: str
    h1_obs_steps: int
    h2_obs_steps: int
    h1_censored: bool
    h2_censored: bool
    tail_p_h1: float
    tail_p_gap: float
    pit_h1: float
    pit_gap: float


@dataclass
class Assessment:
    records: list[TailProbability]
    summary: dict

    def rows(self) -> list[dict]:
        return [dict(r.__dict__) for r in self.records]


def randomized_pit(sim: np.ndarray, obs: float, censored: bool, u: float) -> float:
    """Uniform draw between ``P(H < obs)`` and ``P(H <= obs)``; ``U(P(H <= c), 1)`` if censored at ``c``."""
    lo = float(np.mean(sim <= obs)) if censored else float(np.mean(sim < obs))
    hi = 1.0 if censored else float(np.mean(sim <= obs))
    return float(lo + u * (hi - lo))


def ks_uniform(values) -> tuple[float, float]:
    """KS distance of ``values`` to U(0, 1) and the 1% critical value for that sample size."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan"), float("nan")
    return float(stats.kstest(v, "uniform").statistic), float(stats.kstwo.ppf(0.99, v.size))


def _exposure_context(tag: TagRecord, horizon: int):
    """Pre-exposure segment ending at j*, and the observed bins and labels after it."""
    j = tag.exposure_index
    start = 0
    for seg in segment_record(tag):
        if start <= j < start + len(seg):
            jj = j - start
            if jj < WINDOW:
                raise ValueError(f"tag {tag.tag_id}: fewer than {WINDOW} observations before exposure")
            pre = seg.slice(0, jj + 1)
            future = seg.bins[jj + 1:jj + 1 + horizon]
            labels = tag.celestial[j + 1:j + 1 + horizon]
            if labels.size == 0:
                labels = tag.celestial[j:j + 1]
            return pre, jj, future, labels
        start += len(seg)
    raise AssertionError("exposure index outside every segment")


def counterfactual_assessment(dataset: Dataset, samples, n_sims: int, horizon: int = DEFAULT_HORIZON,
                              seed: int = 0, cache: KernelCache | None = None) -> Assessment:
    """Tail probabilities of each exposed animal's observed hitting times under the baseline fit.

    For each posterior draw the movement type at the last pre-exposure
    observation is drawn from its one-step predictive given pre-exposure
    bins only, then ``n_sims`` futures are simulated with the animal's own
    coefficients and recorded celestial labels (the last one persists).
    """
    exposed = dataset.exposed()
    if not exposed:
        raise ValueError("no exposed tags in the dataset")
    samples = list(samples)
    if not samples:
        raise ValueError("no posterior samples")
    grid = dataset.grid
    if cache is None:
        cache = KernelCache(grid, dataset.delta)
    records = []
    for t_index, tag in enumerate(dataset.tags):
        if tag.exposure_index is None:
            continue
        pre, jj, future, labels = _exposure_context(tag, horizon)
        if future.size == 0:
            raise ValueError(f"tag {tag.tag_id}: no observations after exposure")
        obs = hitting_times(future, grid, dataset.deep_threshold, dataset.shallow_threshold)
        start_hist = tuple(pre.bins[jj - WINDOW + 1:jj + 1].tolist())
        h1s, h2s = [], []
        for s, sample in enumerate(samples):
            rng = _sample_stream(seed, t_index, s)
            if isinstance(sample, FixedModel):
                kernels, B = sample.kernels, sample.B
            else:
                if tag.tag_id not in sample.tag_ids:
                    raise ValueError(f"tag {tag.tag_id} is not in the posterior sample")
                kernels = cache.kernel_set(sample.shared())
                B = sample.animal(sample.tag_ids.index(tag.tag_id))
            probs = filtered_state(pre, kernels, B, grid, jj, dataset.deep_threshold)
            start = SimulationStart(start_hist, tuple(probs.tolist()), tuple(labels.tolist()))
            Bs = np.broadcast_to(B, (n_sims,) + B.shape)
            h1, h2 = simulate_hitting_times(start, kernels, Bs, grid, horizon, rng,
                                            deep_threshold=dataset.deep_threshold,
                                            shallow_threshold=dataset.shallow_threshold)
            h1s.append(h1)
            h2s.append(h2)
        dist = PredictiveDistribution(np.concatenate(h1s), np.concatenate(h2s), horizon, dataset.delta)
        u = _sample_stream(seed, t_index, len(samples)).random(2)
        sim_h1 = dist.values("h1")
        sim_gap = dist.values("gap")
        tail_h1 = dist.tail("h1", obs.h1)
        pit_h1 = randomized_pit(sim_h1, obs.h1, obs.h1_censored, u[0])
        if obs.h1_censored:
            tail_gap = pit_gap = math.nan
        else:
            g = obs.h2 - obs.h1
            tail_gap = dist.tail("gap", g)
            pit_gap = randomized_pit(sim_gap, g, obs.h2_censored, u[1])
        records.append(TailProbability(tag.tag_id, obs.h1, obs.h2, obs.h1_censored, obs.h2_censored,
                                       tail_h1, tail_gap, pit_h1, pit_gap))
    summary = {"n_exposed": len(records)}
    for name in ("h1", "gap"):
        ks_plain, crit = ks_uniform([getattr(r, f"tail_p_{name}") for r in records])
        ks_rand, _ = ks_uniform([getattr(r, f"pit_{name}") for r in records])
        summary[f"ks_{name}"] = ks_plain
        summary[f"ks_pit_{name}"] = ks_rand
        summary[f"ks_critical_{name}"] = crit
    return Assessment(records, summary)


# --- synthetic records ------------------------------------------------------

def generate_synthetic_tag(model, B: np.ndarray, grid: DepthGrid, T: int, celestial,
                           rng: np.random.Generator, tag_id: str = "sim", delta: float = DEFAULT_DELTA,
                           deep_threshold: float = DEFAULT_DEEP, warmup: int = 288,
                           exposure_index: int | None = None, return_states: bool = False):
    """Simulate a ``T``-observation record.

    ``model`` is a :class:`~divehmm.ctmc_kernel.SharedMovementParams` or an
    explicit ``(K, M, M)`` kernel stack.

    The model first runs ``warmup`` steps from a surface start in the random
    walk type (those steps are discarded), so the record begins in a typical
    configuration. ``celestial`` holds one label per recorded observation;
    the warm-up uses the first.
    """
    kernels = kernel_set(model, grid, delta) if isinstance(model, SharedMovementParams) else model
    celestial = np.asarray(celestial, dtype=np.int64)
    if T == 0:
        empty = TagRecord(tag_id, np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), delta)
        return (empty, np.zeros(0, dtype=np.int64)) if return_states else empty
    if celestial.shape != (T,):
        raise ValueError("need one celestial label per observation")
    sched = np.concatenate([np.full(warmup, celestial[0]), celestial])
    start = SimulationStart((1,) * WINDOW, 2, tuple(sched.tolist()))
    traj = simulate_trajectory(start, kernels, B, grid, warmup + T, rng, deep_threshold)
    rec = TagRecord(tag_id, np.arange(T) * float(delta), traj.bins[warmup:], celestial, delta, exposure_index)
    return (rec, traj.states[warmup:]) if return_states else rec

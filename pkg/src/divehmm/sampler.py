"""Hierarchical posterior sampling.

Conjugate Gibbs steps update the population mean and covariance of the
random intercepts; adaptive random-walk Metropolis handles the speeds,
direction probabilities, fixed effects and per-animal intercepts. One sweep
runs in that order: speeds, directions, fixed effects, random effects,
population Gibbs.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from . import _numba
from .covariates import N_COVARIATES
from .ctmc_kernel import N_STATES, SharedMovementParams
from .data_model import Dataset
from .likelihood import LikelihoodEngine
from .transition_model import PopulationParams, TransitionCoefficients, assemble_coefficients

log = logging.getLogger(__name__)

SUMMARY_PARAMS = ("lambda1", "lambda2", "pi1", "pi2", "ascent_deeper")
RHAT_PARAMS = ("lambda1", "lambda2", "pi1", "pi2", "loglik")
# refresh proposal Cholesky factors every this many adaptation steps
_REFRESH = 20


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters.

    ``wishart_dof`` defaults to ``K``, i.e. the intercept dimension ``K - 1``
    plus one.
    """

    gamma_shape: float = 0.01
    gamma_rate: float = 0.01
    pi_bounds: tuple[float, float] = (0.5, 1.0)
    effect_var: float = 100.0
    wishart_scale: float = 0.01
    wishart_dof: float | None = None

    def __post_init__(self):
        if not (self.gamma_shape > 0 and self.gamma_rate > 0):
            raise ValueError("gamma shape and rate must be positive")
        lo, hi = self.pi_bounds
        if not 0.5 <= lo < hi <= 1.0:
            raise ValueError(f"direction bounds must satisfy 0.5 <= lo < hi <= 1, got {self.pi_bounds}")
        if not (self.effect_var > 0 and self.wishart_scale > 0):
            raise ValueError("prior variances must be positive")
        if self.wishart_dof is not None and self.wishart_dof < N_STATES:
            raise ValueError(f"Wishart degrees of freedom must be at least {N_STATES}")

    @property
    def dof(self) -> float:
        return float(N_STATES if self.wishart_dof is None else self.wishart_dof)


@dataclass(frozen=True)
class MCMCConfig:
    """Run length and adaptation settings.

    ``iterations`` counts full sweeps including burn-in; ``burn_in`` defaults
    to half of them. A sample is stored every ``thin`` post-burn-in sweeps.
    """

    iterations: int
    burn_in: int | None = None
    thin: int = 10
    seed: int = 0
    target_accept: float = 0.234
    adapt_exponent: float = 0.6
    init_speed_range: tuple[float, float] = (0.05, 5.0)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.burn_in is not None and not 0 <= self.burn_in <= self.iterations:
            raise ValueError("burn_in must lie in [0, iterations]")
        if not 0.5 < self.adapt_exponent <= 1.0:
            raise ValueError("adapt_exponent must lie in (0.5, 1]")
        lo, hi = self.init_speed_range
        if not 0 < lo < hi:
            raise ValueError("init_speed_range must be an increasing positive pair")

    @property
    def n_burn(self) -> int:
        return self.iterations // 2 if self.burn_in is None else self.burn_in


class AdaptiveBlock:
    """Gaussian random-walk proposal for one parameter block.

    The overall scale follows a Robbins-Monro recursion on its logarithm with
    gain ``t**-exponent``, pushing the acceptance rate toward ``target``. The
    shape is a running estimate of the block's covariance (full or
    diagonal), shrunk toward the initial covariance (``init_cov``, else
    ``diag(init_sd**2)``) with weight ``prior_weight`` pseudo-observations.
    """

    def __init__(self, init_sd, full: bool = False, target: float = 0.234,
                 exponent: float = 0.6, prior_weight: float = 100.0, init_cov=None):
        self.init_sd = np.atleast_1d(np.asarray(init_sd, dtype=float)).copy()
        self.dim = self.init_sd.size
        self.full = full or init_cov is not None
        self.init_cov = np.diag(self.init_sd ** 2) if init_cov is None else np.asarray(init_cov, dtype=float)
        self.target = target
        self.exponent = exponent
        self.prior_weight = prior_weight
        self.log_scale = math.log(2.38 / math.sqrt(self.dim))
        self.n = 0
        self.mean = np.zeros(self.dim)
        self.m2 = np.zeros((self.dim, self.dim)) if self.full else np.zeros(self.dim)
        self.shape = np.linalg.cholesky(self.init_cov) if self.full else self.init_sd.copy()
        self.steps = 0
        self.proposed = 0
        self.accepted = 0

    def propose(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.dim)
        step = self.shape @ z if self.full else self.shape * z
        return x + math.exp(self.log_scale) * step

    def record(self, accepted: bool, x: np.ndarray, adapt: bool):
        """Track the outcome; when ``adapt`` also update scale and shape using the new state ``x``."""
        self.proposed += 1
        self.accepted += bool(accepted)
        if not adapt:
            return
        self.steps += 1
        self.log_scale += self.steps ** -self.exponent * (float(accepted) - self.target)
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        if self.full:
            self.m2 += np.outer(d, x - self.mean)
        else:
            self.m2 += d * (x - self.mean)
        if self.steps % _REFRESH == 0:
            self._refresh()

    def _refresh(self):
        w0 = self.prior_weight
        if self.full:
            cov = (w0 * self.init_cov + self.m2) / (w0 + self.n)
            try:
                self.shape = np.linalg.cholesky(0.5 * (cov + cov.T))
            except np.linalg.LinAlgError:
                pass
        else:
            self.shape = np.sqrt((w0 * self.init_sd ** 2 + self.m2) / (w0 + self.n))

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


class FlatLikelihood:
    """Constant log-likelihood with the engine interface; the sampler then targets the prior."""

    def __init__(self, n_tags: int):
        self.n_tags = n_tags

    def total(self) -> float:
        return 0.0

    def covariate_moments(self):
        return np.zeros(N_COVARIATES - 1), np.eye(N_COVARIATES - 1)

    def propose_movement(self, log_lambda, pi) -> float:
        return 0.0

    def propose_rows(self, k, tags, Bk_of_tag) -> float:
        return 0.0

    def accept(self):
        pass

    def reject(self):
        pass


@dataclass
class ChainState:
    """Current values of every parameter plus adaptation state and RNG.

    ``pi`` holds ``(pi_descent, pi_ascent)``; the random-walk direction
    parameter is fixed at 0.5 and never stored.
    """

    log_lambda: np.ndarray
    pi: np.ndarray
    coefs: TransitionCoefficients
    population: PopulationParams
    rng: np.random.Generator
    blocks: dict = field(default_factory=dict)
    cov_inv: np.ndarray | None = None
    iteration: int = 0
    # mean of the non-intercept covariates; fixed-effect steps are centred on it
    covariate_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_COVARIATES - 1))

    def __post_init__(self):
        if self.cov_inv is None:
            self.cov_inv = np.linalg.inv(self.population.cov)

    @property
    def lambdas(self) -> np.ndarray:
        return np.exp(self.log_lambda)

    def shared(self) -> SharedMovementParams:
        lam = self.lambdas
        return SharedMovementParams(float(lam[0]), float(lam[1]), float(self.pi[0]), float(self.pi[1]))


@dataclass(frozen=True, eq=False)
class PosteriorSample:
    """One stored joint draw. Speeds are kept on the log scale."""

    chain: int
    iteration: int
    log_lambda: np.ndarray
    pi: np.ndarray
    intercepts: np.ndarray
    fixed: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    loglik: float
    tag_ids: tuple[str, ...]

    @property
    def lambda1(self) -> float:
        return float(np.exp(self.log_lambda[0]))

    @property
    def lambda2(self) -> float:
        return float(np.exp(self.log_lambda[1]))

    @property
    def pi1(self) -> float:
        return float(self.pi[0])

    @property
    def pi2(self) -> float:
        return float(self.pi[1])

    @property
    def ascent_deeper(self) -> float:
        """Probability that an ascent-state jump goes deeper, ``1 - pi2``."""
        return 1.0 - float(self.pi[1])

    def value(self, name: str) -> float:
        return float(self.loglik) if name == "loglik" else getattr(self, name)

    def shared(self) -> SharedMovementParams:
        return SharedMovementParams(self.lambda1, self.lambda2, self.pi1, self.pi2)

    def coefficients(self) -> TransitionCoefficients:
        return TransitionCoefficients(self.intercepts, self.fixed)

    def population(self) -> PopulationParams:
        return PopulationParams(self.mean, self.cov)

    def animal(self, i: int) -> np.ndarray:
        return assemble_coefficients(self.intercepts[i], self.fixed)

    def __eq__(self, other):
        if not isinstance(other, PosteriorSample):
            return NotImplemented
        return self.to_record() == other.to_record()

    def to_record(self) -> dict:
        K = self.mean.shape[0]
        mu = [{"k": k + 1, "r": 0, "values": self.mean[k].tolist()} for k in range(K)]
        mu += [{"k": k + 1, "r": r + 1, "values": self.fixed[k, r].tolist()}
               for k in range(K) for r in range(self.fixed.shape[1])]
        sigma = [{"k": k + 1, "r": 0, "values": self.cov[k].ravel().tolist()} for k in range(K)]
        beta = [{"tag_id": t, "k": k + 1, "values": self.intercepts[i, k].tolist()}
                for i, t in enumerate(self.tag_ids) for k in range(K)]
        return {
            "chain": self.chain,
            "iteration": self.iteration,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "pi1": self.pi1,
            "pi2": self.pi2,
            "log_lambda1": float(self.log_lambda[0]),
            "log_lambda2": float(self.log_lambda[1]),
            "loglik": float(self.loglik),
            "mu": mu,
            "sigma": sigma,
            "intercepts": beta,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PosteriorSample":
        K = len(rec["sigma"])
        d = K - 1
        mean = np.zeros((K, d))
        fixed = np.zeros((K, N_COVARIATES - 1, d))
        for m in rec["mu"]:
            if m["r"] == 0:
                mean[m["k"] - 1] = m["values"]
            else:
                fixed[m["k"] - 1, m["r"] - 1] = m["values"]
        cov = np.array([np.reshape(s["values"], (d, d)) for s in sorted(rec["sigma"], key=lambda s: s["k"])])
        tag_ids = list(dict.fromkeys(b["tag_id"] for b in rec["intercepts"]))
        intercepts = np.zeros((len(tag_ids), K, d))
        where = {t: i for i, t in enumerate(tag_ids)}
        for b in rec["intercepts"]:
            intercepts[where[b["tag_id"]], b["k"] - 1] = b["values"]
        return cls(
            chain=int(rec["chain"]), iteration=int(rec["iteration"]),
            log_lambda=np.array([rec["log_lambda1"], rec["log_lambda2"]]),
            pi=np.array([rec["pi1"], rec["pi2"]]),
            intercepts=intercepts, fixed=fixed, mean=mean, cov=cov,
            loglik=float(rec["loglik"]), tag_ids=tuple(tag_ids),
        )


# --- log priors -----------------------------------------------------------

def _log_prior_log_speeds(u: np.ndarray, prior: PriorConfig) -> float:
    # Gamma(a, b) density of exp(u) times the Jacobian exp(u)
    with np.errstate(over="ignore"):
        return float(np.sum(prior.gamma_shape * u - prior.gamma_rate * np.exp(u)))


def _to_unit(pi: float, prior: PriorConfig) -> float:
    lo, hi = prior.pi_bounds
    q = (pi - lo) / (hi - lo)
    return math.log(q) - math.log1p(-q)


def _from_unit(u: float, prior: PriorConfig) -> float:
    lo, hi = prior.pi_bounds
    return lo + (hi - lo) * _expit(u)


def _expit(u: float) -> float:
    if u >= 0:
        return 1.0 / (1.0 + math.exp(-u))
    e = math.exp(u)
    return e / (1.0 + e)


def _log_jacobian_unit(u: float) -> float:
    # log of d expit(u) / du, uniform prior is flat on the probability scale
    return -abs(u) - 2.0 * math.log1p(math.exp(-abs(u)))


def _metropolis(rng: np.random.Generator, log_ratio: float) -> bool:
    u = rng.random()
    return bool(log_ratio > -np.inf and math.log1p(-u) < log_ratio)


# --- block updates --------------------------------------------------------

def update_speeds(state: ChainState, engine, prior: PriorConfig, adapt: bool = False) -> ChainState:
    """Joint random-walk step on (log lambda1, log lambda2).

    Proposals breaking ``lambda1 < lambda2`` are rejected without touching
    the likelihood.
    """
    blk = state.blocks["speeds"]
    cur = state.log_lambda
    prop = blk.propose(cur, state.rng)
    accepted = False
    if prop[0] < prop[1]:
        dll = engine.propose_movement(prop, state.pi)
        lr = dll + _log_prior_log_speeds(prop, prior) - _log_prior_log_speeds(cur, prior)
        accepted = _metropolis(state.rng, lr)
        if accepted:
            engine.accept()
            state.log_lambda = prop
        else:
            engine.reject()
    blk.record(accepted, state.log_lambda, adapt)
    return state


def update_direction_params(state: ChainState, engine, prior: PriorConfig, adapt: bool = False) -> ChainState:
    """Separate random-walk steps for the descent and ascent probabilities on the logit scale."""
    for j, name in enumerate(("pi1", "pi2")):
        blk = state.blocks[name]
        u = _to_unit(state.pi[j], prior)
        up = float(blk.propose(np.array([u]), state.rng)[0])
        pi = state.pi.copy()
        pi[j] = _from_unit(up, prior)
        accepted = False
        # the logit map saturates in floating point far out in the tails
        if prior.pi_bounds[0] < pi[j] < prior.pi_bounds[1]:
            dll = engine.propose_movement(state.log_lambda, pi)
            lr = dll + _log_jacobian_unit(up) - _log_jacobian_unit(u)
            accepted = _metropolis(state.rng, lr)
            if accepted:
                engine.accept()
                state.pi = pi
            else:
                engine.reject()
        blk.record(accepted, np.array([_to_unit(state.pi[j], prior)]), adapt)
    return state


def _row_block(intercept: np.ndarray, fixed_k: np.ndarray) -> np.ndarray:
    K = intercept.size + 1
    Bk = np.zeros((N_COVARIATES, K))
    Bk[0, :-1] = intercept
    Bk[1:, :-1] = fixed_k
    return Bk


def update_fixed_effects(state: ChainState, engine, prior: PriorConfig, adapt: bool = False) -> ChainState:
    """One joint random-walk step per from-state on all its fixed-effect rows.

    A step ``D`` on the fixed effects also moves every animal's intercepts
    by ``-xbar @ D``, so the logits change by ``D'(x - xbar)``: the step acts
    on centred covariates and does not fight the intercepts. The map is a
    volume-preserving translation, so the proposal stays symmetric. Each
    block touches every animal's likelihood.
    """
    coefs = state.coefs
    n = coefs.n_animals
    mu = state.population.mean
    for k in range(coefs.n_states):
        blk = state.blocks[f"fixed{k}"]
        cur = coefs.fixed[k].ravel()
        prop = blk.propose(cur, state.rng)
        Fk = prop.reshape(coefs.fixed.shape[1:])
        shift = -state.covariate_mean @ (Fk - coefs.fixed[k])
        new_ic = coefs.intercepts[:, k] + shift
        dll = engine.propose_rows(k, range(n), lambda i: _row_block(new_ic[i], Fk))
        lp = -(prop @ prop - cur @ cur) / (2.0 * prior.effect_var)
        if n:
            P = state.cov_inv[k]
            dc, dp = coefs.intercepts[:, k] - mu[k], new_ic - mu[k]
            lp -= 0.5 * (np.einsum("ni,ij,nj->", dp, P, dp) - np.einsum("ni,ij,nj->", dc, P, dc))
        accepted = _metropolis(state.rng, dll + lp)
        if accepted:
            engine.accept()
            coefs.fixed[k] = Fk
            coefs.intercepts[:, k] = new_ic
        else:
            engine.reject()
        blk.record(accepted, coefs.fixed[k].ravel(), adapt)
    return state


def update_random_effects(state: ChainState, engine, prior: PriorConfig, adapt: bool = False) -> ChainState:
    """Random-walk step on each animal's intercept row for each from-state.

    Only that animal's segments enter the acceptance ratio.
    """
    coefs = state.coefs
    mu = state.population.mean
    for i in range(coefs.n_animals):
        for k in range(coefs.n_states):
            blk = state.blocks[f"beta{i}_{k}"]
            cur = coefs.intercepts[i, k]
            prop = blk.propose(cur, state.rng)
            dll = engine.propose_rows(k, [i], lambda _i: _row_block(prop, coefs.fixed[k]))
            P = state.cov_inv[k]
            dc, dp = cur - mu[k], prop - mu[k]
            lp = -0.5 * (dp @ P @ dp - dc @ P @ dc)
            accepted = _metropolis(state.rng, dll + lp)
            if accepted:
                engine.accept()
                coefs.intercepts[i, k] = prop
            else:
                engine.reject()
            blk.record(accepted, coefs.intercepts[i, k], adapt)
    return state


def sample_inv_wishart(scale: np.ndarray, dof: float, rng: np.random.Generator,
                       return_precision: bool = False):
    """Inverse-Wishart draws with scale ``scale`` of shape ``(d, d)`` or ``(K, d, d)``.

    The mean is ``scale / (dof - d - 1)``. Uses the Bartlett decomposition of
    ``W ~ Wishart(scale^{-1}, dof)`` and returns ``W^{-1}``; with
    ``return_precision`` also returns ``W``.
    """
    scale = np.asarray(scale, dtype=float)
    single = scale.ndim == 2
    S = np.ascontiguousarray(scale[None] if single else scale)
    K, d = S.shape[0], S.shape[-1]
    if dof <= d - 1:
        raise ValueError(f"degrees of freedom {dof} too small for dimension {d}")
    chisq = rng.chisquare(dof - np.arange(d), size=(K, d))
    normals = rng.standard_normal((K, d * (d - 1) // 2))
    cov = np.empty_like(S)
    prec = np.empty_like(S)
    _numba.inv_wishart_draws(S, chisq, normals, cov, prec)
    if single:
        cov, prec = cov[0], prec[0]
    return (cov, prec) if return_precision else cov


def sample_population_mean(beta: np.ndarray, cov: np.ndarray, prior: PriorConfig,
                           rng: np.random.Generator, cov_inv: np.ndarray | None = None) -> np.ndarray:
    """Conjugate Normal draw of the intercept mean.

    ``beta`` has shape ``(N, d)`` with ``cov`` ``(d, d)``, or ``(N, K, d)``
    with ``cov`` ``(K, d, d)``. The posterior precision is
    ``N cov^{-1} + I / effect_var`` and the mean ``prec^{-1} cov^{-1} sum_i beta_i``.
    """
    cov = np.asarray(cov, dtype=float)
    single = cov.ndim == 2
    d = cov.shape[-1]
    C = cov[None] if single else cov
    K = C.shape[0]
    beta = np.asarray(beta, dtype=float).reshape(-1, K, d)
    if cov_inv is None:
        cov_inv = np.linalg.inv(C)
    cov_inv = np.ascontiguousarray(np.reshape(cov_inv, (K, d, d)))
    z = rng.standard_normal((K, d))
    out = np.empty((K, d))
    _numba.normal_posterior_draws(beta.sum(axis=0), float(beta.shape[0]), cov_inv,
                                  1.0 / prior.effect_var, z, out)
    return out[0] if single else out


def sample_population_cov(beta: np.ndarray, mean: np.ndarray, prior: PriorConfig,
                          rng: np.random.Generator, return_precision: bool = False):
    """Conjugate inverse-Wishart draw with scale ``wishart_scale * I + scatter`` and dof ``dof + N``."""
    beta = np.asarray(beta, dtype=float)
    mean = np.asarray(mean, dtype=float)
    d = mean.shape[-1]
    R = beta - mean
    S = prior.wishart_scale * np.eye(d) + np.einsum("n...i,n...j->...ij", R, R)
    return sample_inv_wishart(S, prior.dof + beta.shape[0], rng, return_precision)


def gibbs_population(state: ChainState, prior: PriorConfig) -> ChainState:
    """Mean then covariance of every from-state's intercept distribution, all states at once."""
    pop = state.population
    beta = state.coefs.intercepts
    pop.mean[:] = sample_population_mean(beta, pop.cov, prior, state.rng, state.cov_inv)
    cov, prec = sample_population_cov(beta, pop.mean, prior, state.rng, return_precision=True)
    pop.cov[:] = cov
    state.cov_inv[:] = prec
    return state


# --- chains ---------------------------------------------------------------

def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Independent stream for chain ``chain`` derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chain,)))


def initial_state(n_animals: int, prior: PriorConfig, mcmc: MCMCConfig,
                  rng: np.random.Generator) -> ChainState:
    """Directions from their uniform prior, speeds from the Gamma prior restricted to
    ``init_speed_range`` and sorted, all coefficients zero, covariances identity."""
    K, d = N_STATES, N_STATES - 1
    lo, hi = prior.pi_bounds
    pi = rng.uniform(lo, hi, size=2)
    g = stats.gamma(prior.gamma_shape, scale=1.0 / prior.gamma_rate)
    a, b = g.cdf(mcmc.init_speed_range[0]), g.cdf(mcmc.init_speed_range[1])
    lam = np.sort(g.ppf(rng.uniform(a, b, size=2)))
    state = ChainState(
        log_lambda=np.log(lam),
        pi=pi,
        coefs=TransitionCoefficients(np.zeros((n_animals, K, d)), np.zeros((K, N_COVARIATES - 1, d))),
        population=PopulationParams(np.zeros((K, d)), np.tile(np.eye(d), (K, 1, 1))),
        rng=rng,
    )
    return state


def make_blocks(n_animals: int, mcmc: MCMCConfig, covariate_cov=None) -> dict[str, AdaptiveBlock]:
    """Proposal blocks with their starting step sizes.

    Fixed-effect steps start with covariance proportional to the inverse of
    the covariates' covariance, the shape of the likelihood's curvature in
    a linear model.
    """
    K, d = N_STATES, N_STATES - 1
    p = N_COVARIATES - 1
    C = np.eye(p) if covariate_cov is None else np.array(covariate_cov, dtype=float)
    # constant columns (e.g. a label never observed) carry no information: give them a unit scale
    flat = np.diag(C) <= 1e-12
    C[flat, :] = 0.0
    C[:, flat] = 0.0
    C[flat, flat] = 1.0
    fixed_cov = np.kron(0.01 * np.linalg.inv(C), np.eye(d))
    kw = dict(target=mcmc.target_accept, exponent=mcmc.adapt_exponent)
    blocks = {"speeds": AdaptiveBlock([0.05, 0.05], full=True, **kw),
              "pi1": AdaptiveBlock([0.2], **kw),
              "pi2": AdaptiveBlock([0.2], **kw)}
    for k in range(K):
        blocks[f"fixed{k}"] = AdaptiveBlock(np.sqrt(np.diag(fixed_cov)), init_cov=fixed_cov, **kw)
    for i in range(n_animals):
        for k in range(K):
            blocks[f"beta{i}_{k}"] = AdaptiveBlock(np.full(d, 0.2), **kw)
    return blocks


def sweep(state: ChainState, engine, prior: PriorConfig, adapt: bool) -> ChainState:
    update_speeds(state, engine, prior, adapt)
    update_direction_params(state, engine, prior, adapt)
    update_fixed_effects(state, engine, prior, adapt)
    update_random_effects(state, engine, prior, adapt)
    gibbs_population(state, prior)
    state.iteration += 1
    return state


def snapshot(state: ChainState, engine, chain: int, tag_ids) -> PosteriorSample:
    return PosteriorSample(
        chain=chain,
        iteration=state.iteration,
        log_lambda=state.log_lambda.copy(),
        pi=state.pi.copy(),
        intercepts=state.coefs.intercepts.copy(),
        fixed=state.coefs.fixed.copy(),
        mean=state.population.mean.copy(),
        cov=state.population.cov.copy(),
        loglik=float(engine.total()),
        tag_ids=tuple(tag_ids),
    )


def run_chain(dataset: Dataset | None, prior: PriorConfig, mcmc: MCMCConfig, chain: int = 0,
              engine=None, n_animals: int | None = None, return_state: bool = False):
    """Run one chain and return its stored post-burn-in samples.

    Parameters
    ----------
    dataset : Dataset or None
        Data to condition on. May be ``None`` when ``engine`` is supplied.
    chain : int
        Chain index; selects the random stream derived from ``mcmc.seed``.
    engine : optional
        Object with the :class:`~divehmm.likelihood.LikelihoodEngine`
        proposal interface, e.g. :class:`FlatLikelihood` to sample the prior.
    n_animals : int, optional
        Number of animals when no dataset is given.
    """
    rng = chain_rng(mcmc.seed, chain)
    if dataset is not None:
        tag_ids = dataset.tag_ids
        n_animals = len(tag_ids)
    else:
        if engine is None or n_animals is None:
            raise ValueError("without a dataset both engine and n_animals are required")
        tag_ids = tuple(f"animal{i + 1}" for i in range(n_animals))
    state = initial_state(n_animals, prior, mcmc, rng)
    if engine is None:
        engine = LikelihoodEngine(dataset, state.shared(), state.coefs)
    xbar, xcov = engine.covariate_moments()
    state.covariate_mean = np.asarray(xbar, dtype=float)
    state.blocks = make_blocks(n_animals, mcmc, xcov)
    samples = []
    burn = mcmc.n_burn
    for t in range(mcmc.iterations):
        sweep(state, engine, prior, adapt=t < burn)
        if t >= burn and (t + 1 - burn) % mcmc.thin == 0:
            samples.append(snapshot(state, engine, chain, tag_ids))
        if (t + 1) % 1000 == 0:
            log.info("chain %d: iteration %d/%d, loglik %.2f", chain, t + 1, mcmc.iterations, engine.total())
    if return_state:
        return samples, state
    return samples


def _run_chain_job(args):
    return run_chain(*args)


def run_chains(dataset: Dataset, prior: PriorConfig, mcmc: MCMCConfig, n_chains: int,
               max_workers: int | None = None) -> list[list[PosteriorSample]]:
    """Independent chains, optionally in worker processes.

    Output does not depend on ``max_workers``: chain ``c`` always uses the
    stream ``(seed, c)``. Defaults to the ``DIVEHMM_THREADS`` environment
    variable, else one worker.
    """
    if n_chains < 1:
        raise ValueError("need at least one chain")
    if max_workers is None:
        max_workers = int(os.environ.get("DIVEHMM_THREADS", "1"))
    jobs = [(dataset, prior, mcmc, c) for c in range(n_chains)]
    workers = max(1, min(max_workers, n_chains))
    if workers == 1:
        return [_run_chain_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_chain_job, jobs))


def pool_chains(chains) -> list[PosteriorSample]:
    """Concatenate chains in order, relabeling each sample with its chain's position."""
    chains = list(chains)
    if not chains:
        raise ValueError("no chains to pool")
    ref = None
    out = []
    for c, samples in enumerate(chains):
        if not samples:
            raise ValueError(f"chain {c} has no samples")
        for s in samples:
            shape = (s.intercepts.shape, s.fixed.shape, s.tag_ids)
            if ref is None:
                ref = shape
            elif shape != ref:
                raise ValueError("chains have mismatched model shapes")
            out.append(replace(s, chain=c))
    return out


# --- summaries ------------------------------------------------------------

def hpd_interval(x, prob: float = 0.95) -> tuple[float, float]:
    """Shortest interval containing a fraction ``prob`` of the draws."""
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    if n == 0:
        raise ValueError("no draws")
    m = max(1, int(math.ceil(prob * n)))
    widths = x[m - 1:] - x[:n - m + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + m - 1])


def split_rhat(chains) -> float:
    """Split potential scale reduction factor over a list of equal-length draw arrays."""
    halves = []
    for c in chains:
        c = np.asarray(c, dtype=float)
        h = c.size // 2
        if h < 2:
            return float("nan")
        halves += [c[:h], c[c.size - h:]]
    n = min(h.size for h in halves)
    x = np.array([h[:n] for h in halves])
    W = x.var(axis=1, ddof=1).mean()
    B = n * x.mean(axis=1).var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else float("inf")
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def convergence_report(chains) -> dict[str, float]:
    return {name: split_rhat([[s.value(name) for s in c] for c in chains]) for name in RHAT_PARAMS}


def summarize(samples, prob: float = 0.95) -> list[dict]:
    """Posterior mean, sd and HPD interval of the movement parameters."""
    if not samples:
        raise ValueError("no samples")
    rows = []
    for name in SUMMARY_PARAMS:
        x = np.array([s.value(name) for s in samples])
        lo, hi = hpd_interval(x, prob)
        rows.append({"parameter": name, "post_mean": float(x.mean()),
                     "post_sd": float(x.std(ddof=1)) if x.size > 1 else 0.0,
                     "hpd_lower": lo, "hpd_upper": hi})
    return rows


def write_samples(path, samples):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record()) + "\n")


def read_samples(path) -> list[PosteriorSample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(PosteriorSample.from_record(json.loads(line)))
    return out

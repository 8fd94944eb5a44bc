"""Birth-death CTMC generators over depth bins and their transition kernels."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from . import _numba
from .data_model import DepthGrid

N_STATES = 5
RANDOM_WALK_PI = 0.5
STATE_NAMES = ("slow_descent", "fast_descent", "slow_random_walk", "slow_ascent", "fast_ascent")

# Largest uniformization rate * time handled in a single Poisson series; larger
# products are split by repeated squaring.
_MAX_POISSON_MEAN = 32.0
_TAIL_TOL = 1e-12


class KernelError(ArithmeticError):
    pass


@dataclass(frozen=True)
class MovementParams:
    """Vertical speed (m/s) and probability that a jump goes one bin deeper."""

    speed: float
    pi: float

    def __post_init__(self):
        if not (self.speed > 0 and math.isfinite(self.speed)):
            raise ValueError(f"speed must be positive and finite, got {self.speed}")
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError(f"pi must lie in [0, 1], got {self.pi}")


@dataclass(frozen=True)
class SharedMovementParams:
    """Parameters shared across the five movement types.

    ``pi_ascent`` is the probability that an ascent-state jump goes *up*;
    ascent states move deeper with probability ``1 - pi_ascent``.
    """

    lambda_slow: float
    lambda_fast: float
    pi_descent: float
    pi_ascent: float

    def __post_init__(self):
        if not 0.0 < self.lambda_slow < self.lambda_fast:
            raise ValueError("speeds must satisfy 0 < lambda_slow < lambda_fast")
        if not math.isfinite(self.lambda_fast):
            raise ValueError("speeds must be finite")
        for name in ("pi_descent", "pi_ascent"):
            v = getattr(self, name)
            if not 0.5 < v < 1.0:
                raise ValueError(f"{name} must lie in (0.5, 1), got {v}")

    @classmethod
    def from_deeper_ascent(cls, lambda_slow, lambda_fast, pi_descent, ascent_deeper):
        """Build from the ascent states' deeper-move probability (Table-style reporting)."""
        return cls(lambda_slow, lambda_fast, pi_descent, 1.0 - ascent_deeper)

    @property
    def ascent_deeper(self) -> float:
        return 1.0 - self.pi_ascent


def expand_states(shared: SharedMovementParams) -> list[MovementParams]:
    """Per-state parameters in the order slow/fast descent, random walk, slow/fast ascent."""
    up = 1.0 - shared.pi_ascent
    return [
        MovementParams(shared.lambda_slow, shared.pi_descent),
        MovementParams(shared.lambda_fast, shared.pi_descent),
        MovementParams(shared.lambda_slow, RANDOM_WALK_PI),
        MovementParams(shared.lambda_slow, up),
        MovementParams(shared.lambda_fast, up),
    ]


def build_rate_matrix(grid: DepthGrid, theta: MovementParams) -> np.ndarray:
    """Generator with exit rate ``speed / width`` per bin; boundary bins reflect."""
    m = grid.n_bins
    rate = theta.speed / grid.widths
    A = np.zeros((m, m))
    idx = np.arange(1, m - 1)
    A[idx, idx + 1] = rate[idx] * theta.pi
    A[idx, idx - 1] = rate[idx] * (1.0 - theta.pi)
    A[0, 1] = rate[0]
    A[m - 1, m - 2] = rate[m - 1]
    A[np.arange(m), np.arange(m)] = -A.sum(axis=1)
    return A


def _poisson_weights(mean: float, tol: float) -> np.ndarray:
    # weights e^{-x} x^n / n! until the remaining tail mass is below tol
    w = [math.exp(-mean)]
    total = w[0]
    n = 0
    while 1.0 - total > tol:
        n += 1
        w.append(w[-1] * mean / n)
        total += w[-1]
        if n > 10_000:
            raise KernelError("Poisson series failed to converge")
    return np.array(w)


def transition_kernel(A: np.ndarray, delta: float) -> np.ndarray:
    """Row-stochastic ``exp(delta * A)`` by uniformization.

    ``A`` must be a conservative generator. The Poisson series is truncated
    once the neglected tail mass is below 1e-12; long horizons are handled by
    squaring a shorter-step kernel.
    """
    A = np.asarray(A, dtype=float)
    if delta < 0 or not math.isfinite(delta):
        raise KernelError(f"delta must be finite and non-negative, got {delta}")
    if not np.all(np.isfinite(A)):
        raise KernelError("generator has non-finite entries")
    m = A.shape[0]
    q = float(np.max(-np.diag(A))) if m else 0.0
    if delta == 0.0 or q == 0.0:
        return np.eye(m)
    mean = q * delta
    squarings = max(0, math.ceil(math.log2(mean / _MAX_POISSON_MEAN))) if mean > _MAX_POISSON_MEAN else 0
    mean /= 2.0 ** squarings
    U = np.eye(m) + A / q
    weights = _poisson_weights(mean, _TAIL_TOL / 2.0 ** squarings)
    if m > 2 and not (np.triu(U, 2).any() or np.tril(U, -2).any()):
        P = np.empty((m, m))
        _numba.uniformized_series(
            np.ascontiguousarray(np.diag(U)), np.ascontiguousarray(np.diag(U, 1)),
            np.ascontiguousarray(np.diag(U, -1)), weights, P)
    else:
        P = weights[0] * np.eye(m)
        power = np.eye(m)
        for w in weights[1:]:
            power = power @ U
            P += w * power
    for _ in range(squarings):
        P = P @ P
    if not np.all(np.isfinite(P)):
        raise KernelError("non-finite kernel entries")
    if P.min() < -1e-14:
        raise KernelError(f"kernel entry {P.min()} is negative beyond rounding")
    np.clip(P, 0.0, None, out=P)
    P /= P.sum(axis=1, keepdims=True)
    return P


class KernelCache:
    """Build-once, read-many cache of kernels keyed by (speed, pi).

    Returned arrays are read-only; the same object is handed out on a hit.
    """

    def __init__(self, grid: DepthGrid, delta: float, maxsize: int = 256):
        self.grid = grid
        self.delta = float(delta)
        self.maxsize = maxsize
        self._store: dict[tuple[float, float], np.ndarray] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, theta: MovementParams) -> np.ndarray:
        key = (theta.speed, theta.pi)
        with self._lock:
            P = self._store.get(key)
            if P is not None:
                self.hits += 1
                return P
        P = transition_kernel(build_rate_matrix(self.grid, theta), self.delta)
        P.setflags(write=False)
        with self._lock:
            self.misses += 1
            if len(self._store) >= self.maxsize:
                # drop the oldest entry (dicts keep insertion order)
                self._store.pop(next(iter(self._store)))
            return self._store.setdefault(key, P)

    def kernel_set(self, shared: SharedMovementParams) -> np.ndarray:
        """Stacked (5, M, M) kernels for the five movement types."""
        out = np.stack([self.get(theta) for theta in expand_states(shared)])
        out.setflags(write=False)
        return out


def kernel_set(shared: SharedMovementParams, grid: DepthGrid, delta: float,
               cache: KernelCache | None = None) -> np.ndarray:
    if cache is None:
        cache = KernelCache(grid, delta)
    elif cache.grid != grid or cache.delta != float(delta):
        raise ValueError("cache was built for a different grid or interval")
    return cache.kernel_set(shared)


def simulate_endpoints(A: np.ndarray, start: int, t: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """States at time ``t`` of ``n`` independent jump-process paths from ``start`` (Gillespie)."""
    A = np.asarray(A, dtype=float)
    m = A.shape[0]
    exit_rate = -np.diag(A)
    jump = np.where(np.eye(m, dtype=bool), 0.0, A)
    with np.errstate(invalid="ignore", divide="ignore"):
        jump = jump / exit_rate[:, None]
    jump_cdf = np.cumsum(np.nan_to_num(jump), axis=1)
    state = np.full(n, start, dtype=np.int64)
    clock = np.zeros(n)
    active = np.flatnonzero(exit_rate[state] > 0)
    while active.size:
        s = state[active]
        clock[active] += rng.exponential(1.0, active.size) / exit_rate[s]
        moving = clock[active] <= t
        active = active[moving]
        if not active.size:
            break
        u = rng.random(active.size)
        cdf = jump_cdf[state[active]]
        state[active] = np.minimum((cdf <= u[:, None]).sum(axis=1), m - 1)
        active = active[exit_rate[state[active]] > 0]
    return state

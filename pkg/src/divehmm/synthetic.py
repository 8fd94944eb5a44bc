"""Known-truth parameters and synthetic multi-tag datasets.

The movement parameters are the published posterior means for the
speeds and direction probabilities. Transition coefficients are
"recovery-shaped": a recent deep dive (large ``c1``) pushes the animal out
of the descent types toward random walk and ascent, and suppresses new
descents until the deep bins leave the 12-step window.
"""

from __future__ import annotations

import numpy as np

from .covariates import COVARIATE_NAMES, N_COVARIATES
from .ctmc_kernel import N_STATES, SharedMovementParams, kernel_set
from .data_model import DEFAULT_DELTA, CelestialLabel, Dataset, DepthGrid, default_grid
from .predictive import generate_synthetic_tag
from .transition_model import PopulationParams, TransitionCoefficients

TRUTH_SHARED = SharedMovementParams.from_deeper_ascent(0.45, 1.31, 0.83, 0.04)

# Target transition rows (to slow/fast descent, random walk, slow/fast ascent)
# at c1 = 0 and at c1 = 6; logits are linear in c1 between and beyond.
_ROWS_SHALLOW = np.array([
    [0.75, 0.12, 0.09, 0.02, 0.02],
    [0.10, 0.78, 0.08, 0.02, 0.02],
    [0.05, 0.04, 0.87, 0.02, 0.02],
    [0.02, 0.02, 0.40, 0.50, 0.06],
    [0.02, 0.02, 0.40, 0.06, 0.50],
])
_ROWS_DEEP = np.array([
    [0.05, 0.02, 0.60, 0.23, 0.10],
    [0.02, 0.05, 0.60, 0.13, 0.20],
    [0.002, 0.002, 0.70, 0.15, 0.146],
    [0.005, 0.005, 0.20, 0.60, 0.19],
    [0.005, 0.005, 0.20, 0.19, 0.60],
])
_DEEP_C1 = 6.0
# daytime and moonlit shifts of the random-walk-to-descent log-odds
_DAY_DESCENT = 0.3
_MOON_DESCENT = -0.2
TRUTH_INTERCEPT_SD = 0.2
CYCLE_STEPS = 288


def truth_population() -> tuple[np.ndarray, PopulationParams]:
    """Fixed effects ``(K, p-1, K-1)`` and the intercept population distribution."""
    K = N_STATES
    a = np.log(_ROWS_SHALLOW[:, :-1] / _ROWS_SHALLOW[:, -1:])
    b = (np.log(_ROWS_DEEP[:, :-1] / _ROWS_DEEP[:, -1:]) - a) / _DEEP_C1
    fixed = np.zeros((K, N_COVARIATES - 1, K - 1))
    c1 = COVARIATE_NAMES.index("c1") - 1
    fixed[:, c1, :] = b
    fixed[2, COVARIATE_NAMES.index("day") - 1, :2] = _DAY_DESCENT
    fixed[2, COVARIATE_NAMES.index("moonlit") - 1, :2] = _MOON_DESCENT
    cov = np.tile(TRUTH_INTERCEPT_SD ** 2 * np.eye(K - 1), (K, 1, 1))
    return fixed, PopulationParams(a, cov)


def truth_coefficients(n_animals: int, rng: np.random.Generator) -> TransitionCoefficients:
    """Shared fixed effects plus per-animal intercepts drawn from the truth population."""
    fixed, pop = truth_population()
    z = rng.standard_normal((n_animals,) + pop.mean.shape)
    return TransitionCoefficients(pop.mean + TRUTH_INTERCEPT_SD * z, fixed)


def diel_schedule(T: int, offset: int = 0) -> np.ndarray:
    """Twelve hours of daytime then twelve of night at five-minute steps; nights
    alternate between dark and moonlit."""
    step = np.arange(T) + offset
    day = (step % CYCLE_STEPS) < CYCLE_STEPS // 2
    night_no = step // CYCLE_STEPS
    labels = np.where(night_no % 2 == 1, CelestialLabel.MOONLIT, CelestialLabel.DARK)
    return np.where(day, CelestialLabel.DAY, labels).astype(np.int64)


def simulate_dataset(n_tags: int, T: int, seed: int, grid: DepthGrid | None = None,
                     shared: SharedMovementParams = TRUTH_SHARED, exposure_index: int | None = None,
                     delta: float = DEFAULT_DELTA) -> tuple[Dataset, TransitionCoefficients]:
    """``n_tags`` records of length ``T`` from the truth model.

    With ``exposure_index`` every tag carries a pseudo-exposure at that
    observation; the data after it come from the same model.
    """
    if n_tags < 1:
        raise ValueError("need at least one tag")
    grid = default_grid() if grid is None else grid
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    coefs = truth_coefficients(n_tags, rng)
    kernels = kernel_set(shared, grid, delta)
    tags = []
    width = len(str(n_tags))
    for i in range(n_tags):
        offset = int(rng.integers(CYCLE_STEPS))
        tags.append(generate_synthetic_tag(
            kernels, coefs.animal(i), grid, T, diel_schedule(T, offset), rng,
            tag_id=f"tag{i + 1:0{width}d}", delta=delta, exposure_index=exposure_index))
    return Dataset(grid, tuple(tags), delta=delta), coefs

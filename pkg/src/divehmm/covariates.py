"""Constructed covariates from recent depth-bin history.

Covariate vector layout (p = 9)::

    0 intercept   1 daytime   2 moonlit night
    3 c1   4 c1**2   5 c1**3   6 z2   7 z2**2   8 z2**3

Dark night is the reference celestial level. ``c1`` counts the last 12 bins
(current one included) whose midpoint is at least the deep threshold; ``c2``
sums the absolute midpoint changes over the last 12 steps and
``z2 = (c2 - 1650) / 500``.
"""

from __future__ import annotations

import numpy as np

from .data_model import CelestialLabel, DepthGrid, TagRecord

N_COVARIATES = 9
WINDOW = 12
DISTANCE_CENTER = 1650.0
DISTANCE_SCALE = 500.0
COVARIATE_NAMES = ("intercept", "day", "moonlit", "c1", "c1^2", "c1^3", "z2", "z2^2", "z2^3")

# Index of the first observation (0-based) with a full 13-bin history.
FIRST_FULL = WINDOW


class InsufficientHistory(ValueError):
    pass


def recent_deep_count(history, grid: DepthGrid, deep_threshold: float = 800.0) -> int:
    """Number of the last 12 bins whose midpoint is at least ``deep_threshold`` meters deep."""
    history = np.asarray(history, dtype=np.int64)
    if history.size < WINDOW:
        raise InsufficientHistory(f"need {WINDOW} bins, got {history.size}")
    mids = grid.midpoints[history[-WINDOW:] - 1]
    return int(np.count_nonzero(mids >= deep_threshold))


def recent_vertical_distance(history, grid: DepthGrid) -> tuple[float, float]:
    """(c2 in meters, standardized z2) over the last 13 bins."""
    history = np.asarray(history, dtype=np.int64)
    if history.size < WINDOW + 1:
        raise InsufficientHistory(f"need {WINDOW + 1} bins, got {history.size}")
    mids = grid.midpoints[history[-(WINDOW + 1):] - 1]
    c2 = float(np.abs(np.diff(mids)).sum())
    return c2, (c2 - DISTANCE_CENTER) / DISTANCE_SCALE


def assemble(c1: float, z2: float, celestial: int) -> np.ndarray:
    return np.array([
        1.0,
        float(celestial == CelestialLabel.DAY),
        float(celestial == CelestialLabel.MOONLIT),
        c1, c1 ** 2, c1 ** 3,
        z2, z2 ** 2, z2 ** 3,
    ])


def build_covariates(record: TagRecord, grid: DepthGrid, j: int,
                     deep_threshold: float = 800.0) -> np.ndarray:
    """Covariate vector for observation ``j`` (0-based) of a contiguous record."""
    if j < FIRST_FULL or j >= len(record):
        raise InsufficientHistory(f"observation {j} lacks {WINDOW} prior observations")
    window = record.bins[j - WINDOW:j + 1]
    c1 = recent_deep_count(window, grid, deep_threshold)
    _, z2 = recent_vertical_distance(window, grid)
    return assemble(c1, z2, int(record.celestial[j]))


def covariate_matrix(bins, celestial, grid: DepthGrid, deep_threshold: float = 800.0) -> np.ndarray:
    """Covariates for every observation of a segment; rows before index 12 are NaN."""
    bins = np.asarray(bins, dtype=np.int64)
    celestial = np.asarray(celestial, dtype=np.int64)
    n = bins.size
    X = np.full((n, N_COVARIATES), np.nan)
    if n <= FIRST_FULL:
        return X
    mids = grid.midpoints[bins - 1]
    windows = np.lib.stride_tricks.sliding_window_view
    j = np.arange(FIRST_FULL, n)
    c1 = windows(mids >= deep_threshold, WINDOW)[1:].sum(axis=1).astype(float)
    c2 = windows(np.abs(np.diff(mids)), WINDOW).sum(axis=1)
    z2 = (c2 - DISTANCE_CENTER) / DISTANCE_SCALE
    cel = celestial[j]
    X[j] = np.column_stack([
        np.ones_like(c1),
        (cel == CelestialLabel.DAY).astype(float),
        (cel == CelestialLabel.MOONLIT).astype(float),
        c1, c1 ** 2, c1 ** 3,
        z2, z2 ** 2, z2 ** 3,
    ])
    return X

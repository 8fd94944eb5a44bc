"""Multinomial-logit movement-type transitions.

Coefficients for one animal are stored as an array ``B`` of shape
``(K, p, K)``: ``B[k, r, l]`` multiplies covariate ``r`` in the log-odds of
moving from type ``k`` to type ``l``. The last target column is pinned to
zero, making fast ascent the reference category. Row ``r = 0`` holds the
animal-specific intercepts; rows ``1..p-1`` are fixed effects shared by all
animals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariates import N_COVARIATES

TINY = 1e-300


@dataclass
class TransitionCoefficients:
    """Intercepts ``(N, K, K-1)`` per animal plus shared fixed effects ``(K, p-1, K-1)``."""

    intercepts: np.ndarray
    fixed: np.ndarray

    def __post_init__(self):
        self.intercepts = np.asarray(self.intercepts, dtype=float)
        self.fixed = np.asarray(self.fixed, dtype=float)
        n, k, km1 = self.intercepts.shape
        if km1 != k - 1 or self.fixed.shape != (k, N_COVARIATES - 1, k - 1):
            raise ValueError(
                f"shape mismatch: intercepts {self.intercepts.shape}, fixed {self.fixed.shape}")

    @property
    def n_animals(self) -> int:
        return self.intercepts.shape[0]

    @property
    def n_states(self) -> int:
        return self.intercepts.shape[1]

    def animal(self, i: int) -> np.ndarray:
        return assemble_coefficients(self.intercepts[i], self.fixed)

    def copy(self) -> "TransitionCoefficients":
        return TransitionCoefficients(self.intercepts.copy(), self.fixed.copy())


def assemble_coefficients(intercepts: np.ndarray, fixed: np.ndarray) -> np.ndarray:
    """Full ``(K, p, K)`` matrix for one animal; last target column is zero."""
    k = intercepts.shape[0]
    B = np.zeros((k, N_COVARIATES, k))
    B[:, 0, :-1] = intercepts
    B[:, 1:, :-1] = fixed
    return B


def log_ratios(k: int, x: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Log-odds of each target type against the reference, from type ``k``."""
    return np.asarray(x, dtype=float) @ B[k]


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max-shift; entries floored at 1e-300."""
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    if p.min() < TINY:
        np.maximum(p, TINY, out=p)
        p /= p.sum(axis=-1, keepdims=True)
    return p


def transition_row(k: int, x: np.ndarray, B: np.ndarray) -> np.ndarray:
    return softmax_rows(log_ratios(k, x, B))


def transition_matrices(X: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Transition matrices ``(T, K, K)`` for covariate rows ``X`` of shape ``(T, p)``."""
    logits = np.einsum("tr,krl->tkl", X, B)
    return softmax_rows(logits)


def transition_rows_for(X: np.ndarray, B: np.ndarray, k: int) -> np.ndarray:
    """Rows from type ``k`` only: shape ``(T, K)``."""
    return softmax_rows(X @ B[k])


@dataclass
class PopulationParams:
    """Population-level intercept means ``(K, K-1)`` and covariances ``(K, K-1, K-1)``.

    Fixed-effect rows have no separate population parameters: their
    coefficients *are* the population means.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        k, km1 = self.mean.shape
        if self.cov.shape != (k, km1, km1):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean {self.mean.shape}")
        for s in self.cov:
            if not np.allclose(s, s.T) or np.linalg.eigvalsh(s).min() <= 0:
                raise ValueError("population covariances must be symmetric positive definite")

    def copy(self) -> "PopulationParams":
        return PopulationParams(self.mean.copy(), self.cov.copy())

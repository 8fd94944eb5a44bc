"""Marginal likelihood of depth-bin sequences with movement types summed out.

For a contiguous segment, likelihood factors start at the first observation
``j0`` with a full 13-bin covariate history (0-based index 12). The state at
``j0 - 1`` is uniform over the K types; the type at ``j`` is drawn using the
covariates at ``j`` and governs the depth transition ``j -> j+1``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import _numba
from .covariates import FIRST_FULL, N_COVARIATES, covariate_matrix
from .ctmc_kernel import KernelCache, SharedMovementParams
from .data_model import Dataset, DepthGrid, TagRecord, segment_record
from .transition_model import TransitionCoefficients, softmax_rows

MIN_SEGMENT = FIRST_FULL + 2
# logits below this exponentiate without overflow, so the max-shift can be skipped
_EXP_SAFE = 700.0


class ShortSegmentWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SegmentData:
    """Precomputed covariates and (from, to) bin pairs for one segment."""

    tag_index: int
    X: np.ndarray
    src: np.ndarray
    dst: np.ndarray

    @property
    def n_terms(self) -> int:
        return self.src.size

    def emissions(self, kernels: np.ndarray) -> np.ndarray:
        """(n, K) probabilities of each observed depth transition under each type."""
        return np.ascontiguousarray(kernels[:, self.src, self.dst].T)

    def emissions_by_type(self, kernels: np.ndarray) -> np.ndarray:
        """The same probabilities laid out ``(K, n)``."""
        K, M = kernels.shape[:2]
        return np.take(kernels.reshape(K, M * M), self.src * M + self.dst, axis=1)


def prepare_segment(segment: TagRecord, grid: DepthGrid, deep_threshold: float = 800.0,
                    tag_index: int = 0) -> SegmentData | None:
    """Returns ``None`` (with a warning) when the segment is too short to contribute."""
    n = len(segment)
    if n < MIN_SEGMENT:
        if n:
            warnings.warn(
                f"segment of {n} observations in tag {segment.tag_id} is shorter than "
                f"{MIN_SEGMENT}; it contributes nothing to the likelihood",
                ShortSegmentWarning, stacklevel=2)
        return None
    X = covariate_matrix(segment.bins, segment.celestial, grid, deep_threshold)[FIRST_FULL:n - 1]
    bins0 = segment.bins - 1
    return SegmentData(
        tag_index,
        np.ascontiguousarray(X),
        np.ascontiguousarray(bins0[FIRST_FULL:n - 1]),
        np.ascontiguousarray(bins0[FIRST_FULL + 1:n]),
    )


def prepare_dataset(dataset: Dataset) -> list[SegmentData]:
    out = []
    for i, tag in enumerate(dataset.tags):
        for seg in segment_record(tag):
            data = prepare_segment(seg, dataset.grid, dataset.deep_threshold, i)
            if data is not None:
                out.append(data)
    return out


def uniform_start(K: int) -> np.ndarray:
    return np.full(K, 1.0 / K)


def transition_tensor(X: np.ndarray, B: np.ndarray) -> np.ndarray:
    out = np.empty((X.shape[0], B.shape[0], B.shape[0]))
    _numba.transition_tensor(np.ascontiguousarray(X), np.ascontiguousarray(B), out)
    return out


def segment_loglik(data: SegmentData, kernels: np.ndarray, B: np.ndarray) -> float:
    K = B.shape[0]
    G = transition_tensor(data.X, B)
    return float(_run_forward(G, data.emissions(kernels), uniform_start(K)))


def forward_loglik(segment: TagRecord, kernels: np.ndarray, B: np.ndarray, grid: DepthGrid,
                   deep_threshold: float = 800.0) -> float:
    """Log-likelihood of one contiguous segment.

    Parameters
    ----------
    segment : TagRecord
        Contiguous observations (no gaps).
    kernels : (K, M, M) ndarray
        Depth-bin transition kernel of each movement type.
    B : (K, p, K) ndarray
        The animal's transition coefficients.
    """
    data = prepare_segment(segment, grid, deep_threshold)
    if data is None:
        return 0.0
    return segment_loglik(data, kernels, B)


def filtered_state(segment: TagRecord, kernels: np.ndarray, B: np.ndarray, grid: DepthGrid,
                   j: int, deep_threshold: float = 800.0) -> np.ndarray:
    """Distribution of the movement type at observation ``j`` given the data.

    Conditions on bins up to ``j + 1`` when the segment extends past ``j``;
    otherwise returns the one-step predictive given bins up to ``j``.
    """
    n = len(segment)
    if not FIRST_FULL <= j < n:
        raise ValueError(f"index {j} must lie in [{FIRST_FULL}, {n})")
    K = B.shape[0]
    X = covariate_matrix(segment.bins, segment.celestial, grid, deep_threshold)
    bins0 = segment.bins - 1
    alpha = uniform_start(K)
    if j > FIRST_FULL:
        # filter through the transitions FIRST_FULL..j-1
        Xs = np.ascontiguousarray(X[FIRST_FULL:j])
        G = transition_tensor(Xs, B)
        E = np.ascontiguousarray(kernels[:, bins0[FIRST_FULL:j], bins0[FIRST_FULL + 1:j + 1]].T)
        ll, alpha = _numba.forward(G, E, alpha)
        if not np.isfinite(ll):
            raise FloatingPointError("data have zero probability under these parameters")
    Gj = transition_tensor(np.ascontiguousarray(X[j:j + 1]), B)[0]
    pred = alpha @ Gj
    if j + 1 < n:
        pred = pred * kernels[:, bins0[j], bins0[j + 1]]
    total = pred.sum()
    if not total > 0:
        raise FloatingPointError("data have zero probability under these parameters")
    return pred / total


def dataset_loglik(dataset: Dataset, shared: SharedMovementParams,
                   coefs: TransitionCoefficients, cache: KernelCache | None = None) -> float:
    """Sum of segment log-likelihoods over all tags, accumulated in tag-id order."""
    if coefs.n_animals != len(dataset.tags):
        raise ValueError("one set of intercepts is needed per tag")
    if cache is None:
        cache = KernelCache(dataset.grid, dataset.delta)
    kernels = cache.kernel_set(shared)
    total = 0.0
    for data in prepare_dataset(dataset):
        total += segment_loglik(data, kernels, coefs.animal(data.tag_index))
    return total


class LikelihoodEngine:
    """Incremental likelihood evaluation for MCMC.

    Holds per-segment transition rows (one ``(n, K)`` array per from-type)
    and emission matrices for the current parameters, so a proposal
    touching one coefficient block or the movement parameters only
    recomputes what it changes. Every ``propose_*`` call must be followed by
    :meth:`accept` or :meth:`reject`.
    """

    def __init__(self, dataset: Dataset, shared: SharedMovementParams,
                 coefs: TransitionCoefficients, cache: KernelCache | None = None):
        if coefs.n_animals != len(dataset.tags):
            raise ValueError("one set of intercepts is needed per tag")
        if coefs.n_states != 5:
            raise ValueError("the incremental engine is specialised to five movement types")
        if cache is None:
            cache = KernelCache(dataset.grid, dataset.delta)
        self.cache = cache
        kernels = cache.kernel_set(shared)
        self.segments = prepare_dataset(dataset)
        self.n_tags = len(dataset.tags)
        self.K = coefs.n_states
        self.alpha0 = uniform_start(self.K)
        self.by_tag = [[s for s, d in enumerate(self.segments) if d.tag_index == i]
                       for i in range(self.n_tags)]
        self.rows = []
        for d in self.segments:
            G = transition_tensor(d.X, coefs.animal(d.tag_index))
            self.rows.append([np.ascontiguousarray(G[:, k, :]) for k in range(self.K)])
        self.E = [d.emissions_by_type(kernels) for d in self.segments]
        self.seg_ll = np.array([self._forward(self.rows[s], self.E[s]) for s in range(len(self.segments))])
        self._pending = None

    def _forward(self, rows, E) -> float:
        return _numba.forward_rows5(rows[0], rows[1], rows[2], rows[3], rows[4], E, self.alpha0)

    def total(self) -> float:
        return _ordered_sum(self.seg_ll)

    def tag_loglik(self, i: int) -> float:
        return _ordered_sum(self.seg_ll[self.by_tag[i]])

    def covariate_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the non-intercept covariates over all likelihood terms."""
        if not self.segments:
            return np.zeros(N_COVARIATES - 1), np.eye(N_COVARIATES - 1)
        X = np.concatenate([d.X for d in self.segments])[:, 1:]
        return X.mean(axis=0), np.atleast_2d(np.cov(X, rowvar=False))

    def propose_movement(self, log_lambda, pi) -> float:
        """Log-likelihood change for new (log speeds, direction probabilities).

        Parameter values outside the model's support give ``-inf``.
        """
        lam = np.exp(np.asarray(log_lambda, dtype=float))
        try:
            shared = SharedMovementParams(float(lam[0]), float(lam[1]), float(pi[0]), float(pi[1]))
        except ValueError:
            self._check_idle()
            self._pending = ("void",)
            return -np.inf
        return self.propose_kernels(self.cache.kernel_set(shared))

    def propose_kernels(self, kernels) -> float:
        """Log-likelihood change from swapping in new movement kernels."""
        self._check_idle()
        E = [d.emissions_by_type(kernels) for d in self.segments]
        ll = np.array([self._forward(self.rows[s], E[s]) for s in range(len(self.segments))])
        self._pending = ("kernels", E, ll)
        return _ordered_sum(ll) - self.total()

    def propose_rows(self, k: int, tags, Bk_of_tag) -> float:
        """Log-likelihood change from replacing transition row ``k`` for ``tags``.

        ``Bk_of_tag(i)`` returns the ``(p, K)`` coefficient block of tag ``i``.
        """
        self._check_idle()
        segs = [s for i in tags for s in self.by_tag[i]]
        new_ll = np.empty(len(segs))
        new_rows = []
        for n, s in enumerate(segs):
            d = self.segments[s]
            Bk = Bk_of_tag(d.tag_index)
            Z = d.X @ Bk[:, :-1]
            if Z.max(initial=-np.inf) < _EXP_SAFE:
                np.exp(Z, out=Z)
                R = np.empty((d.n_terms, self.K))
                _numba.softmax_exp_rows(Z, R)
            else:
                R = softmax_rows(d.X @ Bk)
            rows = list(self.rows[s])
            rows[k] = R
            new_rows.append(R)
            new_ll[n] = self._forward(rows, self.E[s])
        self._pending = ("rows", k, segs, new_rows, new_ll)
        return _ordered_sum(new_ll) - _ordered_sum(self.seg_ll[segs])

    def accept(self):
        token, self._pending = self._pending, None
        if token[0] == "void":
            raise RuntimeError("cannot accept a proposal outside the support")
        if token[0] == "kernels":
            self.E, self.seg_ll = token[1], token[2]
        else:
            _, k, segs, new_rows, ll = token
            for s, R in zip(segs, new_rows):
                self.rows[s][k] = R
            self.seg_ll[segs] = ll

    def reject(self):
        self._pending = None

    def _check_idle(self):
        if self._pending is not None:
            raise RuntimeError("previous proposal was neither accepted nor rejected")


def _run_forward(G, E, alpha0) -> float:
    return _numba.forward(G, E, alpha0)[0]


def _ordered_sum(values) -> float:
    total = 0.0
    for v in values:
        total += float(v)
    return total

"""Per-set sufficient statistics and quasi-static segmentation of sensor logs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDatasetError, InsufficientDataError, InvalidInputError

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 50
DEFAULT_TOL = 0.02


@dataclass
class RawDataset:
    """Samples grouped into sets taken at a fixed orientation.

    ``accel[i]`` and ``mag[i]`` are ``(count, 3)`` arrays for set ``i``; the two
    sensors may have different counts in the same set. ``indices`` optionally
    maps each set back to sample positions in the originating stream.
    """

    accel: list
    mag: list
    indices: list = field(default=None, repr=False)

    def __post_init__(self):
        self.accel = [np.asarray(a, dtype=float).reshape(-1, 3) for a in self.accel]
        self.mag = [np.asarray(m, dtype=float).reshape(-1, 3) for m in self.mag]
        if len(self.accel) != len(self.mag):
            raise InvalidInputError("accelerometer and magnetometer must have the same number of sets")

    @property
    def n_sets(self):
        return len(self.accel)

    def sensor(self, name):
        return self.accel if name in ("a", "accel", "accelerometer") else self.mag

    def subset(self, n):
        idx = None if self.indices is None else self.indices[:n]
        return RawDataset(self.accel[:n], self.mag[:n], idx)


@dataclass
class SensorStats:
    means: np.ndarray  # (N, 3)
    counts: np.ndarray  # (N,)
    cov: np.ndarray  # (3, 3) pooled, possibly regularized
    jittered: bool = False


@dataclass
class SummaryStats:
    accel: SensorStats
    mag: SensorStats

    @property
    def n_sets(self):
        return len(self.accel.counts)


def sample_means(sets):
    """Per-set sample means and counts of a list of ``(count, 3)`` arrays."""
    if len(sets) == 0:
        raise InvalidInputError("dataset has no sets")
    means = np.empty((len(sets), 3))
    counts = np.empty(len(sets), dtype=int)
    for i, s in enumerate(sets):
        s = np.asarray(s, dtype=float).reshape(-1, 3)
        if len(s) == 0:
            raise InvalidInputError(f"set {i} is empty")
        means[i] = s.sum(axis=0) / len(s)
        counts[i] = len(s)
    return means, counts


def scatter_matrix(sets, centers):
    """Sum over sets of ``sum_j (v_ij - c_i)(v_ij - c_i)^T``."""
    total = np.zeros((3, 3))
    for s, c in zip(sets, centers):
        d = np.asarray(s, dtype=float).reshape(-1, 3) - c
        total += d.T @ d
    return 0.5 * (total + total.T)


def pooled_covariance(sets, means):
    """Within-set covariance with the ``sum(count) - N`` denominator."""
    dof = sum(len(s) for s in sets) - len(sets)
    if dof <= 0:
        raise InsufficientDataError("need more samples than sets to estimate the noise covariance")
    return scatter_matrix(sets, means) / dof


def regularize_covariance(S):
    """Add a small diagonal jitter if ``S`` is (nearly) singular.

    Returns ``(S', jittered)``. The jitter is ``1e-10 * trace / 3`` when the
    smallest eigenvalue is below ``1e-12 * trace``; an all-zero matrix gets a
    fixed ``1e-30`` floor so it can still be inverted.
    """
    S = 0.5 * (np.asarray(S, dtype=float) + np.asarray(S, dtype=float).T)
    tr = float(np.trace(S))
    lam_min = np.linalg.eigvalsh(S)[0]
    if lam_min >= 1e-12 * tr and tr > 0.0:
        return S, False
    jitter = max(1e-10 * tr / 3.0, 1e-30)
    logger.debug("covariance nearly singular (min eig %.3g); adding jitter %.3g", lam_min, jitter)
    return S + jitter * np.eye(3), True


def summarize(data: RawDataset) -> SummaryStats:
    out = []
    for sets in (data.accel, data.mag):
        means, counts = sample_means(sets)
        cov, jittered = regularize_covariance(pooled_covariance(sets, means))
        out.append(SensorStats(means, counts, cov, jittered))
    return SummaryStats(*out)


def _trailing_median(x, window):
    n = len(x)
    med = np.empty(n)
    head = min(window - 1, n)
    for t in range(head):
        med[t] = np.median(x[: t + 1])
    if n >= window:
        med[window - 1 :] = np.median(np.lib.stride_tricks.sliding_window_view(x, window), axis=1)
    return med


def static_mask(norms, window=DEFAULT_WINDOW, tol=DEFAULT_TOL):
    """True where a norm is within ``tol`` (relative) of the median of both the
    trailing and the leading ``window`` samples (windows shrink at the ends)."""
    norms = np.asarray(norms, dtype=float)
    ok = np.ones(len(norms), dtype=bool)
    for med in (_trailing_median(norms, window), _trailing_median(norms[::-1], window)[::-1]):
        ok &= np.abs(norms - med) <= tol * np.abs(med)
    return ok


def segment_by_norm(accel, mag, window=DEFAULT_WINDOW, tol=DEFAULT_TOL) -> RawDataset:
    """Split a time-ordered stream into quasi-static sets.

    A sample is static when, for both sensors, its norm lies within ``tol``
    (relative) of the median norm of the ``window`` samples before it and of
    the ``window`` samples after it, so the edges of slow ramps are rejected
    from either side. Maximal
    runs of static samples at least ``window`` long become sets; everything
    else is dropped. ``indices`` on the result holds stream positions.
    """
    if window < 2:
        raise InvalidInputError("window must be at least 2")
    if not tol > 0:
        raise InvalidInputError("tol must be positive")
    accel = np.asarray(accel, dtype=float).reshape(-1, 3)
    mag = np.asarray(mag, dtype=float).reshape(-1, 3)
    if len(accel) != len(mag):
        raise InvalidInputError("accelerometer and magnetometer streams differ in length")
    ok = static_mask(np.linalg.norm(accel, axis=1), window, tol) & static_mask(
        np.linalg.norm(mag, axis=1), window, tol
    )
    edges = np.diff(np.concatenate([[0], ok.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    slices = [np.arange(a, b) for a, b in zip(starts, stops) if b - a >= window]
    if not slices:
        raise EmptyDatasetError("no quasi-static segment found; try a larger tol or smaller window")
    return RawDataset([accel[s] for s in slices], [mag[s] for s in slices], slices)


def group_by_set_id(accel, mag, set_ids) -> RawDataset:
    """Sets from an explicit non-decreasing id column (no segmentation)."""
    set_ids = np.asarray(set_ids)
    if np.any(np.diff(set_ids) < 0):
        raise InvalidInputError("set_id must be non-decreasing")
    accel = np.asarray(accel, dtype=float).reshape(-1, 3)
    mag = np.asarray(mag, dtype=float).reshape(-1, 3)
    slices = [np.flatnonzero(set_ids == k) for k in np.unique(set_ids)]
    return RawDataset([accel[s] for s in slices], [mag[s] for s in slices], slices)

"""Maximum-likelihood costs and the block coordinate descent refinement.

Each outer iteration updates, in order: the per-set orientations, the biases
and field components (generalized least squares), the gains (generalized
least squares), and optionally the noise covariances. Iteration stops once
the governing cost decreases by less than ``gamma``.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError, InvalidStateError
from .geometry import ROTATION_FORMS, quat_normalize
from .init_estimate import DEFAULT_RESTARTS, initial_estimate, rotation_approx
from .preprocess import RawDataset, SummaryStats, regularize_covariance, summarize
from .state import CalibrationState

logger = logging.getLogger(__name__)

SENSOR_KEYS = ("a", "m")


class CovarianceRefit(str, enum.Enum):
    NONE = "none"
    FULL = "full"
    DIAGONAL = "diagonal"


class RotationMode(str, enum.Enum):
    DIRECT = "direct"
    APPROX_THEN_DIRECT = "approx_then_direct"


@dataclass(frozen=True)
class VariantConfig:
    covariance_refit: CovarianceRefit = CovarianceRefit.NONE
    rotation_mode: RotationMode = RotationMode.APPROX_THEN_DIRECT

    @property
    def name(self):
        for key, value in VARIANTS.items():
            if value == self:
                return key
        return f"{self.covariance_refit.value}/{self.rotation_mode.value}"


VARIANTS = {
    "ncdr": VariantConfig(CovarianceRefit.NONE, RotationMode.DIRECT),
    "ncar": VariantConfig(CovarianceRefit.NONE, RotationMode.APPROX_THEN_DIRECT),
    "fcar": VariantConfig(CovarianceRefit.FULL, RotationMode.APPROX_THEN_DIRECT),
    "dcar": VariantConfig(CovarianceRefit.DIAGONAL, RotationMode.APPROX_THEN_DIRECT),
}


def get_variant(name) -> VariantConfig:
    if isinstance(name, VariantConfig):
        return name
    try:
        return VARIANTS[str(name).lower()]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


@dataclass(frozen=True)
class ConvergenceConfig:
    gamma: float = 1e-4
    max_outer_iters: int = 500

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


def _stats_of(stats: SummaryStats, key):
    return stats.accel if key == "a" else stats.mag


def _sets_of(data: RawDataset, key):
    return data.accel if key == "a" else data.mag


def _spd_inverse_and_logdet(Sigma):
    try:
        L = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise InvalidStateError("noise covariance is not positive definite") from exc
    Linv = np.linalg.inv(L)
    return Linv.T @ Linv, 2.0 * float(np.sum(np.log(np.diag(L))))


# ---------------------------------------------------------------------------
# costs


def cost_full(state: CalibrationState, data: RawDataset) -> float:
    """Negative log-likelihood (up to constants) over every raw sample."""
    total = 0.0
    for key in SENSOR_KEYS:
        p = state.sensor(key)
        W, logdet = _spd_inverse_and_logdet(p.Sigma)
        pred = state.predicted_means(key)
        for i, samples in enumerate(_sets_of(data, key)):
            d = pred[i] - samples
            total += len(samples) * logdet + float(np.einsum("ji,ik,jk->", d, W, d))
    return total


def cost_simplified(state: CalibrationState, stats: SummaryStats) -> float:
    """Count-weighted Mahalanobis misfit of the set means.

    Uses the covariances held in ``state`` (initialized from the pooled
    estimate), so the gap to :func:`cost_full` is the within-set scatter term
    plus the log-determinants.
    """
    total = 0.0
    for key in SENSOR_KEYS:
        st = _stats_of(stats, key)
        W, _ = _spd_inverse_and_logdet(state.sensor(key).Sigma)
        d = state.predicted_means(key) - st.means
        total += float(np.einsum("n,ni,ij,nj->", st.counts, d, W, d))
    return total


# ---------------------------------------------------------------------------
# rotation step


@dataclass
class _RotationTerm:
    """Per-sensor pieces of the per-set orientation cost
    ``cnt * (u^T C u - 2 d^T u + e)`` with ``u = R(q) v``."""

    C: np.ndarray
    d: np.ndarray
    e: np.ndarray
    cnt: np.ndarray
    forms: np.ndarray  # (12, 4): rows of 4x4 forms giving R(q) v
    vsq: float

    def subset(self, idx):
        return _RotationTerm(self.C, self.d[idx], self.e[idx], self.cnt[idx], self.forms, self.vsq)

    def rotated(self, q, nsq):
        qq = (q[:, :, None] * q[:, None, :]).reshape(len(q), 16)
        return qq @ self.forms.reshape(3, 16).T / nsq[:, None]

    def cost(self, u):
        return self.cnt * (np.einsum("ni,ij,nj->n", u, self.C, u) - 2.0 * np.einsum("ni,ni->n", self.d, u) + self.e)


def _rotation_terms(state: CalibrationState, stats: SummaryStats):
    terms = []
    for key in SENSOR_KEYS:
        p = state.sensor(key)
        st = _stats_of(stats, key)
        W, _ = _spd_inverse_and_logdet(p.Sigma)
        r = st.means - p.b
        forms = np.einsum("c,rcjk->rjk", state.field(key), ROTATION_FORMS).reshape(12, 4)
        terms.append(
            _RotationTerm(
                C=p.K.T @ W @ p.K,
                d=r @ W @ p.K,
                e=np.einsum("ni,ij,nj->n", r, W, r),
                cnt=st.counts.astype(float),
                forms=forms,
                vsq=float(state.field(key) @ state.field(key)),
            )
        )
    return terms


def rotation_costs(q, terms):
    """Per-set orientation cost for quaternions ``q`` of shape ``(N, 4)``."""
    nsq = np.einsum("nj,nj->n", q, q)
    return sum(t.cost(t.rotated(q, nsq)) for t in terms)


def rotation_costs_and_grad(q, terms):
    """Per-set cost and its gradient w.r.t. the quaternion components."""
    nsq = np.einsum("nj,nj->n", q, q)
    total = np.zeros(len(q))
    grad = np.zeros_like(q)
    for t in terms:
        u = t.rotated(q, nsq)
        total += t.cost(u)
        g_u = 2.0 * t.cnt[:, None] * (u @ t.C - t.d)
        lin = (q @ t.forms.T).reshape(len(q), 3, 4)
        # d(R(q) v)/dq = 2 (F_r q - u_r q) / |q|^2
        grad += 2.0 * (np.einsum("nr,nrj->nj", g_u, lin) - np.einsum("nr,nr->n", g_u, u)[:, None] * q) / nsq[:, None]
    return total, grad


def optimize_rotations(q, terms, max_iter=10, tol=1e-12):
    """Batched per-set gradient descent with Armijo backtracking.

    Every set keeps its own step size; no set's cost ever increases.
    """
    q = quat_normalize(q).copy()
    f, g = rotation_costs_and_grad(q, terms)
    curv = sum(t.cnt * np.linalg.norm(t.C, 2) * t.vsq for t in terms)
    step = 1.0 / np.maximum(8.0 * curv, 1e-300)
    active = np.ones(len(q), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        gsq = np.einsum("nj,nj->n", g, g)
        trial = step.copy()
        accepted = ~active
        new_q = q.copy()
        for _ls in range(60):
            idx = np.flatnonzero(~accepted)
            cand = q[idx] - trial[idx, None] * g[idx]
            cand_f = rotation_costs(cand, [t.subset(idx) for t in terms])
            ok = cand_f <= f[idx] - 1e-4 * trial[idx] * gsq[idx]
            hit = idx[ok]
            new_q[hit] = cand[ok]
            step[hit] = trial[hit]
            accepted[hit] = True
            if accepted.all():
                break
            trial = np.where(accepted, trial, 0.5 * trial)
        stalled = ~accepted
        done = active & accepted & (step * np.sqrt(gsq) < tol)
        q = quat_normalize(new_q)
        f, g = rotation_costs_and_grad(q, terms)
        active &= ~(done | stalled)
        step = np.where(active, 2.0 * step, step)
    return q, f


def step_rotations(state: CalibrationState, stats: SummaryStats, mode="direct", max_iter=10):
    """Update every set orientation.

    ``mode='direct'`` runs gradient descent on each set's cost; ``'approx'``
    replaces the orientations by the closed-form two-vector solution.
    """
    out = state.copy()
    if mode == "approx":
        out.rotations = rotation_approx(state.accel, state.mag, state.fields, stats.accel.means, stats.mag.means)
    elif mode == "direct":
        out.rotations, _ = optimize_rotations(state.rotations, _rotation_terms(state, stats), max_iter=max_iter)
    else:
        raise ValueError(f"unknown rotation mode {mode!r}")
    return out


# ---------------------------------------------------------------------------
# generalized least squares steps


def gls_solve(blocks, weights, targets, what="parameters"):
    """Solve ``min sum_i (y_i - X_i beta)^T W_i (y_i - X_i beta)``.

    ``blocks`` is ``(N, 3, p)``, ``weights`` ``(N, 3, 3)`` (inverse block
    covariances) and ``targets`` ``(N, 3)``.
    """
    XtW = np.swapaxes(blocks, 1, 2) @ weights
    normal = (XtW @ blocks).sum(axis=0)
    rhs = (XtW @ targets[:, :, None]).sum(axis=0)[:, 0]
    normal = 0.5 * (normal + normal.T)
    d = np.sqrt(np.abs(np.diag(normal)))
    if np.any(d == 0.0):
        raise DegenerateGeometryError(f"{what} are not identifiable from the current orientations")
    scaled = normal / np.outer(d, d)
    if np.linalg.cond(scaled) > 1e12:
        raise DegenerateGeometryError(f"{what} are not identifiable from the current orientations")
    return np.linalg.solve(scaled, rhs / d) / d


def _block_weights(Sigma, counts):
    W, _ = _spd_inverse_and_logdet(Sigma)
    return counts[:, None, None] * W[None]


def solve_bias_field(state: CalibrationState, stats: SummaryStats):
    """Unnormalized GLS estimates ``(g_z, b_a, h_x, h_z, b_m)``."""
    R = state.rotation_matrices()
    n = len(R)
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))

    Kz = (R @ np.array([0.0, 0.0, 1.0])) @ state.accel.K.T
    X_a = np.concatenate([Kz[:, :, None], eye], axis=2)
    beta_a = gls_solve(
        X_a, _block_weights(state.accel.Sigma, stats.accel.counts), stats.accel.means, "accelerometer bias and gravity"
    )

    Kx = (R @ np.array([1.0, 0.0, 0.0])) @ state.mag.K.T
    Kz = (R @ np.array([0.0, 0.0, 1.0])) @ state.mag.K.T
    X_m = np.concatenate([Kx[:, :, None], Kz[:, :, None], eye], axis=2)
    beta_m = gls_solve(
        X_m, _block_weights(state.mag.Sigma, stats.mag.counts), stats.mag.means, "magnetometer bias and field"
    )
    return beta_a[0], beta_a[1:], beta_m[0], beta_m[1], beta_m[2:]


def step_bias_field(state: CalibrationState, stats: SummaryStats) -> CalibrationState:
    """GLS update of biases and fields, then restore ``g_z = -1``, ``h_x = 1``."""
    g_z, b_a, h_x, h_z, b_m = solve_bias_field(state, stats)
    out = state.copy()
    out.accel.b = b_a
    out.mag.b = b_m
    out.accel.K = -state.accel.K * g_z
    out.mag.K = state.mag.K * h_x
    out.fields.g_z = -1.0
    out.fields.h_x = 1.0
    out.fields.h_z = h_z / h_x
    return out


_UPPER = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def step_gain(state: CalibrationState, stats: SummaryStats) -> CalibrationState:
    """GLS update of the upper-triangular accelerometer gain and full magnetometer gain."""
    R = state.rotation_matrices()
    n = len(R)
    out = state.copy()

    u = R @ state.fields.g
    X = np.zeros((n, 3, 6))
    for col, (row, k) in enumerate(_UPPER):
        X[:, row, col] = u[:, k]
    beta = gls_solve(
        X,
        _block_weights(state.accel.Sigma, stats.accel.counts),
        stats.accel.means - state.accel.b,
        "accelerometer gain",
    )
    K_a = np.zeros((3, 3))
    for col, (row, k) in enumerate(_UPPER):
        K_a[row, k] = beta[col]
    out.accel.K = K_a

    u = R @ state.fields.h
    X = np.zeros((n, 3, 9))
    for row in range(3):
        X[:, row, 3 * row : 3 * row + 3] = u
    beta = gls_solve(
        X,
        _block_weights(state.mag.Sigma, stats.mag.counts),
        stats.mag.means - state.mag.b,
        "magnetometer gain",
    )
    out.mag.K = beta.reshape(3, 3)
    return out


def residual_covariance(state: CalibrationState, data: RawDataset, key):
    """Maximum-likelihood covariance (no Bessel correction) about the model means."""
    pred = state.predicted_means(key)
    sets = _sets_of(data, key)
    total = np.zeros((3, 3))
    count = 0
    for i, samples in enumerate(sets):
        d = samples - pred[i]
        total += d.T @ d
        count += len(samples)
    return 0.5 * (total + total.T) / count


def step_covariance(state: CalibrationState, data: RawDataset, shape="full"):
    """Refit both noise covariances. Returns ``(state, jittered)``."""
    shape = CovarianceRefit(shape)
    out = state.copy()
    jittered = False
    for key in SENSOR_KEYS:
        S = residual_covariance(state, data, key)
        if shape is CovarianceRefit.DIAGONAL:
            S = np.diag(np.diag(S))
        S, flag = regularize_covariance(S)
        jittered |= flag
        out.sensor(key).Sigma = S
    return out, jittered


# ---------------------------------------------------------------------------
# driver


@dataclass
class Diagnostics:
    costs: list = field(default_factory=list)
    iterations: int = 0
    switch_iteration: int | None = None
    converged: bool = False
    wall_time: float = 0.0
    init_time: float = 0.0
    covariance_jittered: bool = False

    @property
    def final_cost(self):
        return self.costs[-1] if self.costs else float("nan")


def governing_cost(state, data, stats, variant: VariantConfig):
    if variant.covariance_refit is CovarianceRefit.NONE:
        return cost_simplified(state, stats)
    return cost_full(state, data)


def refine(state, data, stats, variant, conv, diagnostics=None, callback=None):
    """Run the coordinate descent loop from ``state``."""
    variant = get_variant(variant)
    diag = diagnostics if diagnostics is not None else Diagnostics()
    mode = "approx" if variant.rotation_mode is RotationMode.APPROX_THEN_DIRECT else "direct"
    j_prev = governing_cost(state, data, stats, variant)
    diag.costs.append(j_prev)
    for k in range(1, conv.max_outer_iters + 1):
        state = step_rotations(state, stats, mode)
        state = step_bias_field(state, stats)
        state = step_gain(state, stats)
        if variant.covariance_refit is not CovarianceRefit.NONE:
            state, jit = step_covariance(state, data, variant.covariance_refit)
            diag.covariance_jittered |= jit
        j = governing_cost(state, data, stats, variant)
        diag.costs.append(j)
        diag.iterations = k
        if callback is not None:
            callback(k, state, j)
        if mode == "approx" and j > j_prev:
            mode = "direct"
            diag.switch_iteration = k
            logger.debug("iteration %d: cost rose %.6g -> %.6g, switching to direct rotations", k, j_prev, j)
        elif j_prev - j < conv.gamma:
            diag.converged = True
            break
        j_prev = j
    return state, diag


def calibrate(
    data: RawDataset,
    variant="ncar",
    conv: ConvergenceConfig | None = None,
    rng=None,
    restarts=DEFAULT_RESTARTS,
    callback=None,
):
    """Estimate all parameters from raw sets. Returns ``(state, diagnostics)``."""
    variant = get_variant(variant)
    conv = conv or ConvergenceConfig()
    t0 = time.perf_counter()
    stats = summarize(data)
    state = initial_estimate(stats, restarts=restarts, rng=rng)
    diag = Diagnostics(covariance_jittered=stats.accel.jittered or stats.mag.jittered)
    diag.init_time = time.perf_counter() - t0
    state, diag = refine(state, data, stats, variant, conv, diag, callback)
    diag.wall_time = time.perf_counter() - t0
    return state, diag

"""Closed-form and restart-based initial estimate of all calibration parameters.

The pipeline is: fit an ellipsoid to each sensor's set means, recover an
upper-triangular gain and bias from it, find the accelerometer-to-magnetometer
rotation together with the vertical magnetic component by restarted gradient
descent, fix the field scale, and finally solve each set orientation as a
two-vector attitude problem.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, FieldInclinationError, NotAnEllipsoidError
from .geometry import min_eigvec_sym4, quat_to_matrix, random_rotations, rotation_form
from .preprocess import SummaryStats
from .sensor_model import FieldParams, SensorParams
from .state import CalibrationState

logger = logging.getLogger(__name__)

MIRROR = np.diag([1.0, 1.0, -1.0])
DEFAULT_RESTARTS = 100


@dataclass
class EllipsoidCoeffs:
    """Quadric ``x^T A x + b^T x + c = 0`` fitted to set means.

    ``eta`` is the stacked ``(vec A, b, c)`` as estimated (13 entries) and
    ``alpha`` the scale that makes ``alpha * A`` equal ``K^-T K^-1``.
    """

    A: np.ndarray
    b: np.ndarray
    c: float
    eta: np.ndarray
    alpha: float
    singular_values: np.ndarray


def _design_row(m):
    x, y, z = m[:, 0], m[:, 1], m[:, 2]
    one = np.ones_like(x)
    return np.stack([x * x, y * y, z * z, 2 * x * y, 2 * x * z, 2 * y * z, x, y, z, one], axis=1)


def ellipsoid_fit(means) -> EllipsoidCoeffs:
    """Algebraic ellipsoid fit through the smallest right singular vector.

    Symmetry of ``A`` is built into the design: the six unique quadratic
    monomials are used instead of the nine entries of ``vec A``.
    """
    means = np.asarray(means, dtype=float).reshape(-1, 3)
    if len(means) < 9:
        raise DegenerateGeometryError(f"ellipsoid fit needs at least 9 set means, got {len(means)}")
    J = _design_row(means)
    _, s, vt = np.linalg.svd(J, full_matrices=False)
    if s[-2] <= 1e-9 * s[0]:
        raise DegenerateGeometryError("set means do not determine a unique quadric (too few distinct orientations)")
    eta = vt[-1]
    A = np.array(
        [
            [eta[0], eta[3], eta[4]],
            [eta[3], eta[1], eta[5]],
            [eta[4], eta[5], eta[2]],
        ]
    )
    b = eta[6:9].copy()
    c = float(eta[9])
    if np.trace(A) < 0:
        A, b, c = -A, -b, -c
    try:
        denom = 0.25 * b @ np.linalg.solve(A, b) - c
    except np.linalg.LinAlgError as exc:
        raise NotAnEllipsoidError("quadric matrix is singular") from exc
    alpha = 1.0 / denom if denom != 0.0 else np.inf
    if not np.isfinite(alpha) or not _is_spd(alpha * A):
        raise NotAnEllipsoidError("fitted quadric is not an ellipsoid; collect more varied orientations")
    return EllipsoidCoeffs(A, b, c, np.concatenate([A.ravel(), b, [c]]), float(alpha), s)


def _is_spd(M):
    try:
        np.linalg.cholesky(0.5 * (M + M.T))
    except np.linalg.LinAlgError:
        return False
    return True


def recover_gain_bias(e: EllipsoidCoeffs):
    """Upper-triangular gain ``Kt`` with ``Kt^-T Kt^-1 = alpha A`` and the bias."""
    M = e.alpha * e.A
    try:
        L = np.linalg.cholesky(0.5 * (M + M.T))
    except np.linalg.LinAlgError as exc:
        raise NotAnEllipsoidError("scaled quadric matrix is not positive definite") from exc
    Kt = np.linalg.inv(L).T
    Kt = np.triu(Kt)
    bias = -0.5 * np.linalg.solve(e.A, e.b)
    return Kt, bias


@dataclass
class RotationFieldEstimate:
    """Result of the joint rotation / vertical-field search.

    ``R`` is a proper rotation; ``mirrored`` says whether the magnetometer
    frame is a reflection, in which case the orientation to compose into the
    magnetometer gain is ``R @ diag(1, 1, -1)``.
    """

    R: np.ndarray
    h_z: float
    cost: float
    mirrored: bool
    restart: int

    @property
    def orientation(self):
        return self.R @ MIRROR if self.mirrored else self.R


def _rh_objective(q, h, P, w):
    # P is (B, N, 16): flattened per-set forms for each batch member's class
    nsq = np.einsum("bj,bj->b", q, q)
    qq = (q[:, :, None] * q[:, None, :]).reshape(len(q), 16)
    c = np.einsum("bnk,bk->bn", P, qq) / nsq[:, None]
    r = h[:, None] + c
    return 0.5 * (r * r) @ w, r, c, nsq


def rotation_hz_objective(R, h_z, z_a, z_m, counts_a, counts_m):
    """Objective of the rotation / h_z search evaluated at a given orientation."""
    w = np.asarray(counts_a, dtype=float) + np.asarray(counts_m, dtype=float)
    r = h_z + np.einsum("ni,ji,nj->n", z_a, R, z_m)
    return 0.5 * float(np.sum(w * r * r))


def estimate_rotation_hz(
    z_a,
    z_m,
    counts_a,
    counts_m,
    restarts=DEFAULT_RESTARTS,
    rng=None,
    max_iter=500,
    tol=1e-10,
    history=None,
) -> RotationFieldEstimate:
    """Minimize ``1/2 sum_i w_i (h_z + z_a[i]^T R^T z_m[i])^2`` over R and h_z.

    Every restart starts from a uniform random rotation and ``h_z ~ U[-1, 1]``
    and is run in both orientation classes (proper and mirrored magnetometer
    frame). All restarts advance together by gradient descent with an Armijo
    backtracking line search; the lowest final cost wins, ties going to the
    earliest restart. If ``history`` is a list, the per-member objective
    after every iteration is appended to it.
    """
    rng = np.random.default_rng(rng)
    z_a = np.asarray(z_a, dtype=float).reshape(-1, 3)
    z_m = np.asarray(z_m, dtype=float).reshape(-1, 3)
    w = np.asarray(counts_a, dtype=float) + np.asarray(counts_m, dtype=float)
    restarts = int(restarts)
    if restarts < 1:
        raise ValueError("restarts must be >= 1")

    q0 = random_rotations(rng, restarts)
    h0 = rng.uniform(-1.0, 1.0, restarts)
    n = len(w)
    forms = np.stack([rotation_form(z_a, z_m), rotation_form(z_a @ MIRROR, z_m)]).reshape(2, n, 16)
    q = np.concatenate([q0, q0])
    h = np.concatenate([h0, h0])
    P = np.repeat(forms, restarts, axis=0)
    B = len(q)

    f, r, c, nsq = _rh_objective(q, h, P, w)
    if history is not None:
        history.append(f.copy())
    step = np.full(B, 1.0 / max(w.sum(), 1e-300))
    active = np.ones(B, dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        wr = w * r
        g_h = wr.sum(axis=1)
        Mq = np.einsum("bjk,bk->bj", np.einsum("bn,bnk->bk", wr, P).reshape(B, 4, 4), q)
        g_q = 2.0 * (Mq - np.einsum("bn,bn->b", wr, c)[:, None] * q) / nsq[:, None]
        gsq = g_h * g_h + np.einsum("bj,bj->b", g_q, g_q)
        trial_step = np.where(active, step, 0.0)
        accepted = ~active
        new_q, new_h = q.copy(), h.copy()
        for _ls in range(80):
            idx = np.flatnonzero(~accepted)
            cand_q = q[idx] - trial_step[idx, None] * g_q[idx]
            cand_h = h[idx] - trial_step[idx] * g_h[idx]
            cand_f = _rh_objective(cand_q, cand_h, P[idx], w)[0]
            ok = cand_f <= f[idx] - 1e-4 * trial_step[idx] * gsq[idx]
            hit = idx[ok]
            new_q[hit] = cand_q[ok]
            new_h[hit] = cand_h[ok]
            step[hit] = trial_step[hit]
            accepted[hit] = True
            if accepted.all():
                break
            trial_step = np.where(accepted, trial_step, 0.5 * trial_step)
        stalled = ~accepted
        moved = active & accepted
        done = moved & (step * np.sqrt(gsq) < tol)
        q = new_q / np.linalg.norm(new_q, axis=1, keepdims=True)
        h = new_h
        f, r, c, nsq = _rh_objective(q, h, P, w)
        if history is not None:
            history.append(f.copy())
        active &= ~(done | stalled)
        step = np.where(active, 2.0 * step, step)

    best = int(np.argmin(f))
    return RotationFieldEstimate(
        R=quat_to_matrix(q[best]),
        h_z=float(h[best]),
        cost=float(f[best]),
        mirrored=best >= restarts,
        restart=best % restarts,
    )


def normalize_field_scale(K_a, K_m, g_z, h_z_raw):
    """Fix the gauge ``g_z = -1, h_x = 1`` after a unit-field fit.

    Returns ``(K_a, K_m, h_z)``: the magnetometer gain is scaled by
    ``h_x = sqrt(1 - h_z^2)`` and ``h_z`` divided by it; the accelerometer is
    left untouched because it was fitted to a unit field already.
    """
    h_z_raw = float(h_z_raw)
    if not abs(h_z_raw) < 1.0:
        raise FieldInclinationError(
            f"estimated vertical field component {h_z_raw:.6g} is outside (-1, 1); "
            "initial fit is unreliable (near-vertical field?)"
        )
    h_x = np.sqrt(1.0 - h_z_raw * h_z_raw)
    return np.array(K_a, dtype=float), np.asarray(K_m, dtype=float) * h_x, h_z_raw / h_x


def _vector_pair_matrix(x, y):
    """Stack of 4x4 matrices ``f(x, y)`` whose null vector is the quaternion
    taking the inertial vector to the body vector (``x = s + s_I``,
    ``y = s - s_I``)."""
    n = x.shape[0]
    F = np.zeros((n, 4, 4))
    F[:, 0, 1:] = -y
    F[:, 1:, 0] = y
    F[:, 1, 2], F[:, 1, 3] = -x[:, 2], x[:, 1]
    F[:, 2, 1], F[:, 2, 3] = x[:, 2], -x[:, 0]
    F[:, 3, 1], F[:, 3, 2] = -x[:, 1], x[:, 0]
    return F


def sensor_weight(params: SensorParams):
    """Cube root of ``det(K^T Sigma^-1 K)``."""
    info = params.K.T @ np.linalg.solve(params.Sigma, params.K)
    return float(np.cbrt(np.linalg.det(info)))


def rotation_approx(accel: SensorParams, mag: SensorParams, fields: FieldParams, means_a, means_m):
    """Closed-form per-set orientation from both sensors' set means.

    Each set gives a weighted two-vector attitude problem whose solution is
    the eigenvector of the smallest eigenvalue of a 4x4 matrix.
    """
    B = np.zeros((len(means_a), 4, 4))
    for params, means, v_inertial in ((accel, means_a, fields.g), (mag, means_m, fields.h)):
        body = np.linalg.solve(params.K, (np.asarray(means, dtype=float) - params.b).T).T
        F = _vector_pair_matrix(body + v_inertial, body - v_inertial)
        B += sensor_weight(params) * np.einsum("nki,nkj->nij", F, F)
    return min_eigvec_sym4(B)


def initial_rotations(accel: SensorParams, mag: SensorParams, fields: FieldParams, stats: SummaryStats):
    return rotation_approx(accel, mag, fields, stats.accel.means, stats.mag.means)


def initial_estimate(stats: SummaryStats, restarts=DEFAULT_RESTARTS, rng=None) -> CalibrationState:
    """Complete initial parameter set from summary statistics."""
    rng = np.random.default_rng(rng)
    K_a, b_a = recover_gain_bias(ellipsoid_fit(stats.accel.means))
    Kt_m, b_m = recover_gain_bias(ellipsoid_fit(stats.mag.means))
    z_a = np.linalg.solve(K_a, (stats.accel.means - b_a).T).T
    z_m = np.linalg.solve(Kt_m, (stats.mag.means - b_m).T).T
    est = estimate_rotation_hz(z_a, z_m, stats.accel.counts, stats.mag.counts, restarts, rng)
    logger.debug(
        "rotation/h_z search: cost=%.3g h_z=%.4f mirrored=%s restart=%d",
        est.cost, est.h_z, est.mirrored, est.restart,
    )
    K_a, K_m, h_z = normalize_field_scale(K_a, Kt_m @ est.orientation, -1.0, est.h_z)
    fields = FieldParams(g_z=-1.0, h_x=1.0, h_z=h_z)
    accel = SensorParams(K_a, b_a, stats.accel.cov)
    mag = SensorParams(K_m, b_m, stats.mag.cov)
    rotations = initial_rotations(accel, mag, fields, stats)
    return CalibrationState(accel, mag, fields, rotations)

"""Synthetic scenarios, reconstruction error and Monte Carlo campaigns."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError
from .geometry import quat_to_matrix, random_rotation, random_rotations
from .init_estimate import DEFAULT_RESTARTS, rotation_approx
from .preprocess import RawDataset, summarize
from .refine import (
    ConvergenceConfig,
    _rotation_terms,
    calibrate,
    get_variant,
    optimize_rotations,
)
from .sensor_model import FieldParams, SensorParams, expected_reading, simulate_reading
from .state import CalibrationState

logger = logging.getLogger(__name__)


@dataclass
class ScenarioTruth:
    """Ground truth for one simulated sensor pair.

    ``mag.K`` already includes the extra rotation and mirroring
    (``mirror @ extra_rotation @ K_nominal``).
    """

    accel: SensorParams
    mag: SensorParams
    fields: FieldParams
    mirror: np.ndarray
    extra_rotation: np.ndarray
    seed: object = None


@dataclass
class SimDataset:
    data: RawDataset
    rotations: np.ndarray  # true quaternions, (N, 4)
    counts: np.ndarray  # (N,)

    def subset(self, n):
        return SimDataset(self.data.subset(n), self.rotations[:n], self.counts[:n])


def _random_covariance(rng):
    # diagonal U[0.5, 2], off-diagonal U[-0.2, 0.2] (upper triangle mirrored),
    # scaled by 10^eps with eps ~ U[-4, -2]
    while True:
        S = np.diag(rng.uniform(0.5, 2.0, 3))
        iu = np.triu_indices(3, 1)
        S[iu] = rng.uniform(-0.2, 0.2, 3)
        S = S + np.triu(S, 1).T
        S *= 10.0 ** rng.uniform(-4.0, -2.0)
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError:  # pragma: no cover - cannot happen for these ranges
            continue
        return S


def gen_scenario(rng) -> ScenarioTruth:
    rng = np.random.default_rng(rng)
    fields = FieldParams(
        g_z=rng.uniform(-1.5, -0.5),
        h_x=rng.uniform(0.5, 1.5),
        h_z=rng.uniform(-1.5, 1.5),
    )
    sensors = []
    for _ in range(2):
        K = np.eye(3) + rng.uniform(-0.1, 0.1, (3, 3))
        b = rng.uniform(-1.0, 1.0, 3)
        sensors.append(SensorParams(K, b, _random_covariance(rng)))
    accel, mag = sensors
    extra = quat_to_matrix(random_rotation(rng))
    mirror = np.diag(rng.choice([-1.0, 1.0], 3))
    mag.K = mirror @ extra @ mag.K
    return ScenarioTruth(accel, mag, fields, mirror, extra)


def gen_dataset(truth: ScenarioTruth, n_sets=15, count_range=(400, 600), rng=None, noiseless=False) -> SimDataset:
    """Random orientations and readings; both sensors share each set's count."""
    rng = np.random.default_rng(rng)
    lo, hi = count_range
    accel, mag = [], []
    quats = np.empty((n_sets, 4))
    counts = np.empty(n_sets, dtype=int)
    for i in range(n_sets):
        counts[i] = rng.integers(lo, hi, endpoint=True)
        quats[i] = random_rotation(rng)
        R = quat_to_matrix(quats[i])
        for params, v, out in ((truth.accel, truth.fields.g, accel), (truth.mag, truth.fields.h, mag)):
            if noiseless:
                out.append(np.repeat(expected_reading(params, v, R)[None], counts[i], axis=0))
            else:
                out.append(simulate_reading(params, v, R, rng, size=counts[i]))
    return SimDataset(RawDataset(accel, mag), quats, counts)


def true_means(truth: ScenarioTruth, rotations):
    R = quat_to_matrix(rotations)
    return (
        expected_reading(truth.accel, truth.fields.g, R),
        expected_reading(truth.mag, truth.fields.h, R),
    )


def reconstruction_error(truth: ScenarioTruth, true_rotations, estimate: CalibrationState, counts):
    """Count-weighted RMS Mahalanobis distance between true and reconstructed
    set means, per sensor, in units of the true noise standard deviation.
    """
    counts = np.asarray(counts, dtype=float)
    mu_a, mu_m = true_means(truth, true_rotations)
    out = []
    for mu, key, Sigma in ((mu_a, "a", truth.accel.Sigma), (mu_m, "m", truth.mag.Sigma)):
        d = mu - estimate.predicted_means(key)
        m2 = np.einsum("ni,ij,nj->n", d, np.linalg.inv(Sigma), d)
        out.append(float(np.sqrt(np.sum(counts * m2) / np.sum(counts))))
    return tuple(out)


def fit_rotations(estimate: CalibrationState, data: RawDataset, max_iter=500):
    """Orientations for new sets with sensor parameters held fixed:
    closed-form start, then direct descent."""
    stats = summarize(data)
    fixed = estimate.copy()
    q0 = rotation_approx(fixed.accel, fixed.mag, fixed.fields, stats.accel.means, stats.mag.means)
    fixed.rotations = q0
    q, _ = optimize_rotations(q0, _rotation_terms(fixed, stats), max_iter=max_iter)
    fixed.rotations = q
    return fixed


def fit_test_rotations(truth: ScenarioTruth, estimate: CalibrationState, test: SimDataset):
    """Fit orientations on held-out sets and return ``(state, (delta_a, delta_m))``."""
    fitted = fit_rotations(estimate, test.data)
    return fitted, reconstruction_error(truth, test.rotations, fitted, test.counts)


# ---------------------------------------------------------------------------
# campaigns


@dataclass
class MonteCarloConfig:
    runs: int = 100
    n_sets: int = 15
    count_range: tuple = (400, 600)
    gamma: float = 1e-4
    variants: tuple = ("ncar",)
    seed: int = 0
    test_split: bool = True
    sweep: str | None = None  # None, "gamma" or "sets"
    sweep_values: tuple = ()
    restarts: int = DEFAULT_RESTARTS
    max_outer_iters: int = 500
    threads: int = 1


@dataclass
class RunReport:
    run: int
    variant: str
    n_sets: int
    gamma: float
    delta_a: float = float("nan")
    delta_m: float = float("nan")
    test_delta_a: float = float("nan")
    test_delta_m: float = float("nan")
    time_s: float = float("nan")
    iterations: int = 0
    switch_iteration: int | None = None
    final_cost: float = float("nan")
    failed: bool = False
    error: str = ""


def run_rng(seed, run, stream):
    """Independent generator for (campaign seed, run index, stream tag)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(run), int(stream)]))


_DATA, _TEST, _CAL, _SCENARIO = 1, 2, 3, 0


def _calibrate_one(truth, train, test, variant, gamma, cfg, run):
    rep = RunReport(run=run, variant=get_variant(variant).name, n_sets=train.data.n_sets, gamma=gamma)
    try:
        t0 = time.perf_counter()
        state, diag = calibrate(
            train.data,
            variant,
            ConvergenceConfig(gamma=gamma, max_outer_iters=cfg.max_outer_iters),
            rng=run_rng(cfg.seed, run, _CAL),
            restarts=cfg.restarts,
        )
        rep.time_s = time.perf_counter() - t0
        rep.iterations = diag.iterations
        rep.switch_iteration = diag.switch_iteration
        rep.final_cost = diag.final_cost
        rep.delta_a, rep.delta_m = reconstruction_error(truth, train.rotations, state, train.counts)
        if test is not None:
            _, (rep.test_delta_a, rep.test_delta_m) = fit_test_rotations(truth, state, test)
    except (CalibrationError, np.linalg.LinAlgError) as exc:
        rep.failed = True
        rep.error = f"{type(exc).__name__}: {exc}"
        logger.warning("run %d variant %s failed: %s", run, rep.variant, rep.error)
    return rep


def simulate_run(cfg: MonteCarloConfig, run: int):
    """All reports for one Monte Carlo run (one scenario, shared data)."""
    truth = gen_scenario(run_rng(cfg.seed, run, _SCENARIO))
    if cfg.sweep == "sets":
        sizes = sorted(int(n) for n in cfg.sweep_values)
        n_max = max(sizes)
    else:
        sizes = [cfg.n_sets]
        n_max = cfg.n_sets
    train_full = gen_dataset(truth, n_max, cfg.count_range, run_rng(cfg.seed, run, _DATA))
    test_full = gen_dataset(truth, n_max, cfg.count_range, run_rng(cfg.seed, run, _TEST)) if cfg.test_split else None
    gammas = [float(g) for g in cfg.sweep_values] if cfg.sweep == "gamma" else [cfg.gamma]
    reports = []
    for n in sizes:
        train = train_full.subset(n)
        test = test_full.subset(n) if test_full is not None else None
        for variant in cfg.variants:
            for gamma in gammas:
                reports.append(_calibrate_one(truth, train, test, variant, gamma, cfg, run))
    return reports


def _simulate_run_star(args):
    return simulate_run(*args)


def default_threads():
    env = os.environ.get("MAGCAL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_monte_carlo(cfg: MonteCarloConfig):
    """Run the campaign; results are ordered by run index regardless of ``threads``."""
    jobs = [(cfg, run) for run in range(cfg.runs)]
    if cfg.threads > 1 and cfg.runs > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            per_run = list(pool.map(_simulate_run_star, jobs))
    else:
        per_run = [simulate_run(*job) for job in jobs]
    return [rep for reps in per_run for rep in reps]


# ---------------------------------------------------------------------------
# handheld logs


@dataclass
class HandheldTrace:
    """A continuous log: static holds joined by motion, with known truth."""

    timestamps: np.ndarray
    accel: np.ndarray
    mag: np.ndarray
    rotations: np.ndarray  # (N, 4) orientation of each hold
    holds: list  # sample index ranges of the static holds
    offset_sets: tuple
    truth: ScenarioTruth


def _slerp(q0, q1, t):
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1, d = -q1, -d
    theta = np.arccos(min(d, 1.0))
    t = np.asarray(t, dtype=float)[:, None]
    if theta < 1e-9:
        return np.repeat(q0[None], len(t), axis=0)
    return (np.sin((1 - t) * theta) * q0 + np.sin(t * theta) * q1) / np.sin(theta)


def gen_handheld_log(
    truth: ScenarioTruth,
    n_sets=20,
    rng=None,
    count_range=(400, 600),
    transition=150,
    drift=0.005,
    offset_sets=(),
    offset=10.0,
    noise_var=1e-6,
    bump=0.3,
    rate=100.0,
) -> HandheldTrace:
    """Simulate holding the device still in ``n_sets`` orientations.

    Within each hold both sensor means drift linearly by ``drift`` times the
    field reading magnitude in a random direction. Holds listed in
    ``offset_sets`` get an extra constant magnetometer offset of ``offset``
    noise standard deviations along the field reading, i.e. a local change of
    field strength that no orientation can explain. Moves between holds
    slerp the orientation and scale the accelerometer reading by up to
    ``1 + bump`` (with a steep onset) to mimic hand acceleration. Noise covariances are rescaled to
    mean variance ``noise_var`` so that quasi-static samples stay well inside
    the segmentation tolerance.
    """
    rng = np.random.default_rng(rng)
    sensors = []
    for p in (truth.accel, truth.mag):
        q = p.copy()
        q.Sigma = p.Sigma * (noise_var / (np.trace(p.Sigma) / 3.0))
        sensors.append(q)
    accel_p, mag_p = sensors
    quats = random_rotations(rng, n_sets)
    A, M, holds = [], [], []
    pos = 0
    for i in range(n_sets):
        if i > 0:
            t = (np.arange(transition) + 0.5) / transition
            qs = _slerp(quats[i - 1], quats[i], t)
            R = quat_to_matrix(qs)
            a = expected_reading(accel_p, truth.fields.g, R)
            # steep onset plus hand shake, so no stretch of motion has a steady norm
            envelope = np.minimum(1.0, 10.0 * np.sin(np.pi * t))
            scale = 1.0 + bump * envelope * (1.0 + 0.5 * np.sin(12.0 * np.pi * t))
            a = accel_p.b + (a - accel_p.b) * scale[:, None]
            a = a + rng.standard_normal((transition, 3)) @ np.linalg.cholesky(accel_p.Sigma).T
            m = expected_reading(mag_p, truth.fields.h, R)
            m = m + rng.standard_normal((transition, 3)) @ np.linalg.cholesky(mag_p.Sigma).T
            A.append(a)
            M.append(m)
            pos += transition
        n = int(rng.integers(count_range[0], count_range[1], endpoint=True))
        R = quat_to_matrix(quats[i])
        ramp = np.linspace(-0.5, 0.5, n)[:, None]
        chunk = []
        for p, v in ((accel_p, truth.fields.g), (mag_p, truth.fields.h)):
            mu = expected_reading(p, v, R)
            u = rng.standard_normal(3)
            u *= drift * np.linalg.norm(mu - p.b) / np.linalg.norm(u)
            chunk.append(simulate_reading(p, v, R, rng, size=n) + ramp * u)
        a, m = chunk
        if i in offset_sets:
            u = expected_reading(mag_p, truth.fields.h, R) - mag_p.b
            m = m + offset * np.sqrt(noise_var) * u / np.linalg.norm(u)
        A.append(a)
        M.append(m)
        holds.append(np.arange(pos, pos + n))
        pos += n
    accel = np.concatenate(A)
    mag = np.concatenate(M)
    stamps = np.arange(len(accel)) / rate
    return HandheldTrace(stamps, accel, mag, quats, holds, tuple(offset_sets), truth)

"""Linear sensor model ``v = K R v_I + b + noise`` and the inertial fields."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParamsError


class SensorId(str, enum.Enum):
    ACCELEROMETER = "accelerometer"
    MAGNETOMETER = "magnetometer"


SENSORS = (SensorId.ACCELEROMETER, SensorId.MAGNETOMETER)


@dataclass
class SensorParams:
    """Gain ``K``, bias ``b`` and noise covariance ``Sigma`` of one sensor."""

    K: np.ndarray
    b: np.ndarray
    Sigma: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.K = np.array(self.K, dtype=float).reshape(3, 3)
        self.b = np.array(self.b, dtype=float).reshape(3)
        self.Sigma = np.array(self.Sigma, dtype=float).reshape(3, 3)

    def copy(self):
        return SensorParams(self.K.copy(), self.b.copy(), self.Sigma.copy())

    def check(self):
        """Raise ``InvalidParamsError`` unless K is invertible and Sigma SPD."""
        if not gain_is_invertible(self.K):
            raise InvalidParamsError("gain matrix is singular")
        if not np.allclose(self.Sigma, self.Sigma.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.Sigma).max())):
            raise InvalidParamsError("covariance is not symmetric")
        if np.linalg.eigvalsh(self.Sigma)[0] <= 0.0:
            raise InvalidParamsError("covariance is not positive definite")
        return self


@dataclass
class FieldParams:
    """Inertial-frame fields: gravity ``(0, 0, g_z)``, magnetic ``(h_x, 0, h_z)``."""

    g_z: float = -1.0
    h_x: float = 1.0
    h_z: float = 0.0

    @property
    def g(self):
        return np.array([0.0, 0.0, self.g_z])

    @property
    def h(self):
        return np.array([self.h_x, 0.0, self.h_z])

    def copy(self):
        return FieldParams(self.g_z, self.h_x, self.h_z)


def gain_is_invertible(K):
    K = np.asarray(K, dtype=float)
    scale = np.linalg.norm(K, 2)
    return scale > 0.0 and abs(np.linalg.det(K)) > 1e-12 * scale**3


def field_vector(fields: FieldParams, sensor: SensorId):
    if SensorId(sensor) is SensorId.ACCELEROMETER:
        return fields.g
    return fields.h


def expected_reading(params: SensorParams, v_inertial, R):
    """Noiseless reading ``K R v_I + b``; ``R`` may be a stack ``(..., 3, 3)``."""
    rv = np.einsum("...ij,j->...i", R, np.asarray(v_inertial, dtype=float))
    return rv @ params.K.T + params.b


def noise_factor(Sigma):
    """Lower-triangular factor ``L`` with ``L L^T = Sigma`` (zero matrix allowed)."""
    Sigma = np.asarray(Sigma, dtype=float)
    if not np.any(Sigma):
        return np.zeros((3, 3))
    return np.linalg.cholesky(Sigma)


def simulate_reading(params: SensorParams, v_inertial, R, rng: np.random.Generator, size=None):
    """Draw readings ``K R v_I + b + eps`` with ``eps ~ N(0, Sigma)``.

    Returns one 3-vector when ``size`` is None, else an array ``(size, 3)``.
    """
    mean = expected_reading(params, v_inertial, R)
    L = noise_factor(params.Sigma)
    shape = (3,) if size is None else (size, 3)
    return mean + rng.standard_normal(shape) @ L.T


def invert_reading(params: SensorParams, v):
    """Nominal field estimate ``K^-1 (v - b)`` for one reading or a stack."""
    if not gain_is_invertible(params.K):
        raise InvalidParamsError("gain matrix is singular")
    v = np.asarray(v, dtype=float)
    return np.linalg.solve(params.K, (v - params.b).T).T

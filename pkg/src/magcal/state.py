from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import quat_normalize, quat_to_matrix
from .sensor_model import FieldParams, SensorParams, expected_reading


@dataclass
class CalibrationState:
    """Full parameter set: both sensors, the inertial fields and one
    orientation quaternion per measurement set (``rotations`` is ``(N, 4)``).

    After gauge normalization ``g_z == -1``, ``h_x == 1`` and ``accel.K`` is
    upper triangular; ``mag.K`` is unrestricted.
    """

    accel: SensorParams
    mag: SensorParams
    fields: FieldParams
    rotations: np.ndarray

    def __post_init__(self):
        self.rotations = quat_normalize(np.asarray(self.rotations, dtype=float).reshape(-1, 4))

    @property
    def n_sets(self):
        return len(self.rotations)

    def copy(self):
        return CalibrationState(self.accel.copy(), self.mag.copy(), self.fields.copy(), self.rotations.copy())

    def rotation_matrices(self):
        return quat_to_matrix(self.rotations)

    def sensor(self, name):
        return self.accel if name == "a" else self.mag

    def field(self, name):
        return self.fields.g if name == "a" else self.fields.h

    def predicted_means(self, name):
        """Reconstructed set means ``K R_i v_I + b`` for sensor ``'a'`` or ``'m'``."""
        return expected_reading(self.sensor(name), self.field(name), self.rotation_matrices())

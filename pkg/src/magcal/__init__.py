"""Joint calibration of a triaxial accelerometer and magnetometer pair from
quasi-static measurement sets, plus a Monte Carlo harness for synthetic sensors."""

from .errors import (
    CalibrationError,
    DegenerateGeometryError,
    EmptyDatasetError,
    FieldInclinationError,
    InsufficientDataError,
    InvalidArgumentError,
    InvalidInputError,
    InvalidParamsError,
    InvalidStateError,
    NotAnEllipsoidError,
    SchemaError,
)
from .files import CalibrationFile, Provenance, read_calibration, read_log, write_calibration
from .init_estimate import initial_estimate
from .preprocess import RawDataset, group_by_set_id, segment_by_norm, summarize
from .refine import VARIANTS, ConvergenceConfig, Diagnostics, calibrate, cost_full, cost_simplified, refine
from .sensor_model import FieldParams, SensorParams, expected_reading, invert_reading
from .simulator import MonteCarloConfig, gen_dataset, gen_scenario, reconstruction_error, run_monte_carlo
from .state import CalibrationState

__version__ = "0.1.0"

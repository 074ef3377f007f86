"""Sensor log CSV and calibration file formats."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, SchemaError
from .sensor_model import FieldParams, SensorParams
from .state import CalibrationState

SCHEMA_NAME = "magcal-calibration"
SCHEMA_VERSION = 1
LOG_COLUMNS = ("timestamp", "ax", "ay", "az", "mx", "my", "mz")


def fmt(x) -> str:
    """Shortest text that reads back to the identical double."""
    return repr(float(x))


# ---------------------------------------------------------------------------
# sensor logs


@dataclass
class SensorLog:
    timestamps: list  # original text, passed through untouched
    accel: np.ndarray  # (n, 3)
    mag: np.ndarray  # (n, 3)
    set_ids: np.ndarray | None = None
    digest: str = ""

    def __len__(self):
        return len(self.timestamps)


def parse_log(text: str, source="<log>") -> SensorLog:
    """Parse ``timestamp,ax,ay,az,mx,my,mz[,set_id]`` with a header row.

    Errors carry the 1-based line number of the offending row.
    """
    digest = hashlib.sha256(text.encode()).hexdigest()
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise InvalidInputError(f"{source}: empty file, expected header {','.join(LOG_COLUMNS)}") from None
    if tuple(header[:7]) != LOG_COLUMNS or header[7:] not in ([], ["set_id"]):
        raise InvalidInputError(
            f"{source}:1: bad header {','.join(header)!r}; expected {','.join(LOG_COLUMNS)}[,set_id]"
        )
    has_ids = len(header) == 8
    stamps, values, ids = [], [], []
    prev_t = None
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InvalidInputError(f"{source}:{line}: expected {len(header)} fields, got {len(row)}")
        try:
            t = float(row[0])
            v = [float(c) for c in row[1:7]]
            sid = int(row[7]) if has_ids else None
        except ValueError as exc:
            raise InvalidInputError(f"{source}:{line}: {exc}") from None
        if not np.all(np.isfinite(v)) or not np.isfinite(t):
            raise InvalidInputError(f"{source}:{line}: non-finite value")
        if prev_t is not None and t < prev_t:
            raise InvalidInputError(f"{source}:{line}: timestamps must be non-decreasing")
        if has_ids and ids and sid < ids[-1]:
            raise InvalidInputError(f"{source}:{line}: set_id must be non-decreasing")
        prev_t = t
        stamps.append(row[0].strip())
        values.append(v)
        if has_ids:
            ids.append(sid)
    if not values:
        raise InvalidInputError(f"{source}: no data rows")
    arr = np.array(values)
    return SensorLog(stamps, arr[:, :3], arr[:, 3:], np.array(ids) if has_ids else None, digest)


def read_log(path) -> SensorLog:
    path = Path(path)
    return parse_log(path.read_text(), source=str(path))


def format_log(timestamps, accel, mag, set_ids=None) -> str:
    cols = list(LOG_COLUMNS) + (["set_id"] if set_ids is not None else [])
    lines = [",".join(cols)]
    for k, t in enumerate(timestamps):
        cells = [t if isinstance(t, str) else fmt(t)]
        cells += [fmt(x) for x in accel[k]] + [fmt(x) for x in mag[k]]
        if set_ids is not None:
            cells.append(str(int(set_ids[k])))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_table(path, header, rows):
    """Plain CSV; floats are written with full round-trip precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(c) if isinstance(c, (float, np.floating)) else c for c in row])


# ---------------------------------------------------------------------------
# calibration files


@dataclass
class Provenance:
    input_sha256: str = ""
    seed: int | None = None
    variant: str = ""
    gamma: float = float("nan")
    iterations: int = 0
    final_cost: float = float("nan")


@dataclass
class CalibrationFile:
    state: CalibrationState
    provenance: Provenance = field(default_factory=Provenance)


def _sensor_dict(p: SensorParams):
    return {
        "K": [float(x) for x in p.K.ravel()],
        "b": [float(x) for x in p.b],
        "Sigma": [float(x) for x in p.Sigma.ravel()],
    }


def to_dict(cal: CalibrationFile) -> dict:
    s = cal.state
    pv = cal.provenance
    return {
        "schema": SCHEMA_NAME,
        "schema_version": SCHEMA_VERSION,
        "gauge": {"g_z": -1.0, "h_x": 1.0, "accelerometer_gain": "upper_triangular"},
        "accelerometer": _sensor_dict(s.accel),
        "magnetometer": _sensor_dict(s.mag),
        "fields": {"g_z": float(s.fields.g_z), "h_x": float(s.fields.h_x), "h_z": float(s.fields.h_z)},
        "rotations": [[float(x) for x in q] for q in s.rotations],
        "provenance": {
            "input_sha256": pv.input_sha256,
            "seed": pv.seed,
            "variant": pv.variant,
            "gamma": float(pv.gamma),
            "iterations": int(pv.iterations),
            "final_cost": float(pv.final_cost),
        },
    }


def dumps_calibration(cal: CalibrationFile) -> str:
    return json.dumps(to_dict(cal), indent=2) + "\n"


def _sensor_from(d, name):
    try:
        K = np.array(d["K"], dtype=float)
        b = np.array(d["b"], dtype=float)
        S = np.array(d["Sigma"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{name}: malformed sensor block ({exc})") from None
    if K.shape != (9,) or b.shape != (3,) or S.shape != (9,):
        raise SchemaError(f"{name}: expected K[9], b[3], Sigma[9]")
    return SensorParams(K.reshape(3, 3), b, S.reshape(3, 3))


def from_dict(d: dict) -> CalibrationFile:
    if not isinstance(d, dict) or d.get("schema") != SCHEMA_NAME:
        raise SchemaError("not a calibration file")
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {version!r} (this build reads version {SCHEMA_VERSION})")
    try:
        f = d["fields"]
        fields = FieldParams(float(f["g_z"]), float(f["h_x"]), float(f["h_z"]))
        rot = np.array(d["rotations"], dtype=float).reshape(-1, 4)
        p = d["provenance"]
        prov = Provenance(
            p["input_sha256"], p["seed"], p["variant"], float(p["gamma"]), int(p["iterations"]), float(p["final_cost"])
        )
        accel = _sensor_from(d["accelerometer"], "accelerometer")
        mag = _sensor_from(d["magnetometer"], "magnetometer")
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed calibration file: {exc!r}") from None
    # the constructor normalizes; keep the stored values bit-exact
    state = CalibrationState(accel, mag, fields, np.zeros((0, 4)))
    state.rotations = rot
    return CalibrationFile(state, prov)


def loads_calibration(text: str) -> CalibrationFile:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"calibration file is not valid JSON: {exc}") from None
    return from_dict(d)


def write_calibration(path, cal: CalibrationFile):
    Path(path).write_text(dumps_calibration(cal))


def read_calibration(path) -> CalibrationFile:
    return loads_calibration(Path(path).read_text())

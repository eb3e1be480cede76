"""File formats, data ingestion with truncation, and result export.

CSV conventions: detections are an n x K matrix of 0/1 under headers
``sensor_1..sensor_K``; bearings (degrees, [0, 360)) and received levels
(dB) use the same shape with empty fields exactly where there is no
detection.  Sensors: ``easting,northing``.  Covariate fields:
``easting,northing,<covariate...>`` on a regular grid.  All floats are
written with 17 significant digits so values survive a round trip.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .density import DesignMatrix, log_density
from .estimation import FitResult
from .geometry import CovariateField, Mesh, SensorArray
from .likelihood import Dataset
from .validation import DataError

DEG_PER_RAD = 180.0 / math.pi
RAD_PER_DEG = math.pi / 180.0


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _degrees_for_radians(rad: float) -> float:
    """Degrees value whose canonical load reproduces ``rad`` when possible.

    Multiplying by 180/pi and back by pi/180 can be off by an ulp; nudging
    the candidate restores the exact preimage whenever one exists.  Radians
    that themselves came from a degree load always have one, so a loaded
    dataset survives export and reload bit-exactly; internally generated
    radians may land between degree preimages and round-trip to within an
    ulp instead.
    """
    candidate = rad * DEG_PER_RAD
    if candidate * RAD_PER_DEG == rad:
        return candidate
    for step in (1, -1, 2, -2):
        nudged = candidate
        for _ in range(abs(step)):
            nudged = math.nextafter(nudged, math.copysign(math.inf, step))
        if nudged * RAD_PER_DEG == rad:
            return nudged
    return candidate


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            rows = [row for row in reader if row]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}")
    if not rows:
        raise DataError(f"{path}: file is empty")
    return rows[0], rows[1:]


def _parse_float(value: str, path, row: int, column: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataError(f"{path} row {row} column {column}: {value!r} is not numeric")


def load_sensors(path) -> SensorArray:
    header, rows = _read_rows(path)
    if [h.strip() for h in header[:2]] != ["easting", "northing"]:
        raise DataError(f"{path}: expected header easting,northing")
    positions = [(_parse_float(r[0], path, i + 2, "easting"),
                  _parse_float(r[1], path, i + 2, "northing"))
                 for i, r in enumerate(rows)]
    return SensorArray(positions)


def load_covariate_field(path) -> CovariateField:
    header, rows = _read_rows(path)
    names = [h.strip() for h in header]
    if names[:2] != ["easting", "northing"]:
        raise DataError(f"{path}: expected leading columns easting,northing")
    if len(names) < 3:
        raise DataError(f"{path}: no covariate columns found")
    data = np.array([[_parse_float(v, path, i + 2, names[j]) for j, v in enumerate(r)]
                     for i, r in enumerate(rows)])
    return CovariateField(data[:, :2], {name: data[:, j + 2]
                                        for j, name in enumerate(names[2:])})


def _load_matrix(path, n_expected: int | None = None,
                 allow_empty_fields: bool = True) -> np.ndarray:
    header, rows = _read_rows(path)
    k = len(header)
    out = np.full((len(rows), k), np.nan)
    for i, row in enumerate(rows):
        if len(row) != k:
            raise DataError(f"{path} row {i + 2}: expected {k} fields, got {len(row)}")
        for j, value in enumerate(row):
            if value.strip() == "":
                if not allow_empty_fields:
                    raise DataError(f"{path} row {i + 2} column {header[j]}: empty field")
                continue
            out[i, j] = _parse_float(value, path, i + 2, header[j])
    if n_expected is not None and out.shape[0] != n_expected:
        raise DataError(f"{path}: expected {n_expected} rows, got {out.shape[0]}")
    return out


def load_matrix(path) -> np.ndarray:
    """Plain numeric matrix CSV (e.g. sampled noise rows), no empty fields."""
    return _load_matrix(path, allow_empty_fields=False)


@dataclass
class RawDetections:
    """As-loaded matrices: detections with bearings (degrees) and levels."""

    detections: np.ndarray
    bearings_deg: np.ndarray
    received: np.ndarray
    call_noise: np.ndarray | None = None


def load_raw(detections_path, bearings_path, received_path,
             call_noise_path=None) -> RawDetections:
    det = _load_matrix(detections_path, allow_empty_fields=False)
    if not np.isin(det, (0.0, 1.0)).all():
        bad = np.argwhere(~np.isin(det, (0.0, 1.0)))[0]
        raise DataError(
            f"{detections_path} row {bad[0] + 2} column sensor_{bad[1] + 1}: "
            "detections must be 0 or 1")
    n, k = det.shape
    bearings = _load_matrix(bearings_path, n_expected=n)
    received = _load_matrix(received_path, n_expected=n)
    for name, mat in (("bearings", bearings), ("received", received)):
        if mat.shape != det.shape:
            raise DataError(f"{name} shape {mat.shape} does not match detections {det.shape}")
    detected = det == 1.0
    for name, mat in (("bearings", bearings), ("received", received)):
        missing = detected & np.isnan(mat)
        if missing.any():
            i, j = np.argwhere(missing)[0]
            raise DataError(f"{name} row {i + 2} column sensor_{j + 1}: "
                            "missing value at a detecting sensor")
        excess = ~detected & ~np.isnan(mat)
        if excess.any():
            i, j = np.argwhere(excess)[0]
            raise DataError(f"{name} row {i + 2} column sensor_{j + 1}: "
                            "value present at a non-detecting sensor")
    bad_bearing = detected & ((bearings < 0.0) | (bearings >= 360.0))
    if bad_bearing.any():
        i, j = np.argwhere(bad_bearing)[0]
        raise DataError(f"bearings row {i + 2} column sensor_{j + 1}: "
                        f"value {bearings[i, j]} outside [0, 360)")
    noise = None
    if call_noise_path is not None:
        noise = _load_matrix(call_noise_path, n_expected=n, allow_empty_fields=False)
    return RawDetections(det.astype(np.int8), bearings, received, noise)


@dataclass
class TruncationReport:
    n_input: int
    n_detections_zeroed: int
    n_retained: int
    n_dropped_below_minimum: int
    n_dropped_empty: int
    t_r: float
    m_min: int

    def as_dict(self) -> dict:
        return asdict(self)


def load_and_truncate(raw: RawDetections, t_r: float, m_min: int = 2,
                      period: float = 1.0) -> tuple[Dataset, TruncationReport]:
    """Apply the received-level threshold, then the minimum-detection rule.

    Detections whose level falls below ``t_r`` become non-detections (their
    bearing and level are dropped); calls left with fewer than ``m_min``
    detections are removed entirely.
    """
    det = raw.detections.astype(bool)
    below = det & (raw.received < t_r)
    det = det & ~below
    n_zeroed = int(below.sum())
    counts = det.sum(axis=1)
    keep = counts >= m_min
    empty = counts == 0
    report = TruncationReport(
        n_input=det.shape[0],
        n_detections_zeroed=n_zeroed,
        n_retained=int(keep.sum()),
        n_dropped_below_minimum=int((~keep & ~empty).sum()),
        n_dropped_empty=int(empty.sum()),
        t_r=float(t_r),
        m_min=int(m_min),
    )
    det_kept = det[keep]
    bearings = np.where(det_kept, raw.bearings_deg[keep] * RAD_PER_DEG, np.nan)
    received = np.where(det_kept, raw.received[keep], np.nan)
    noise = raw.call_noise[keep] if raw.call_noise is not None else None
    dataset = Dataset(det_kept.astype(np.int8), bearings, received,
                      m_min=m_min, period=period, noise=noise)
    return dataset, report


# -- writers -----------------------------------------------------------------


def _sensor_header(k: int) -> list[str]:
    return [f"sensor_{j + 1}" for j in range(k)]


def write_dataset(dataset: Dataset, detections_path, bearings_path, received_path):
    """Write a dataset back to the raw CSV layout (bearings in degrees)."""
    k = dataset.n_sensors
    header = _sensor_header(k)
    with open(detections_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in dataset.omega:
            w.writerow([int(v) for v in row])
    with open(bearings_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(dataset.n_calls):
            w.writerow([
                _fmt(_degrees_for_radians(float(dataset.bearings[i, j])))
                if dataset.omega[i, j] else ""
                for j in range(k)
            ])
    with open(received_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(dataset.n_calls):
            w.writerow([_fmt(float(dataset.received[i, j])) if dataset.omega[i, j] else ""
                        for j in range(k)])


def write_matrix(path, matrix: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_sensor_header(matrix.shape[1]))
        for row in matrix:
            w.writerow([_fmt(float(v)) for v in row])


def write_mesh(path, mesh: Mesh):
    names = sorted(mesh.covariates)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "easting", "northing", "area"] + names)
        for i in range(mesh.n_cells):
            w.writerow([i, _fmt(mesh.centroids[i, 0]), _fmt(mesh.centroids[i, 1]),
                        _fmt(mesh.areas[i])] + [_fmt(mesh.covariates[n][i]) for n in names])


def write_density_surface(path, mesh: Mesh, design: DesignMatrix, beta: np.ndarray):
    log_d = log_density(beta, design)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "easting", "northing", "area", "log_density", "density"])
        for i in range(mesh.n_cells):
            w.writerow([i, _fmt(mesh.centroids[i, 0]), _fmt(mesh.centroids[i, 1]),
                        _fmt(mesh.areas[i]), _fmt(log_d[i]), _fmt(float(np.exp(log_d[i])))])


def write_qcd(path, mesh: Mesh, qcd: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "easting", "northing", "qcd"])
        for i in range(mesh.n_cells):
            w.writerow([i, _fmt(mesh.centroids[i, 0]), _fmt(mesh.centroids[i, 1]),
                        _fmt(qcd[i])])


def fit_result_document(result: FitResult) -> dict:
    return {
        "formula": result.formula,
        "n_free_parameters": result.n_free,
        "loglik": result.loglik,
        "aic": result.aic,
        "abundance": result.abundance,
        "lambda_detected": result.lambda_detected,
        "expected_singletons": result.expected_singletons,
        "converged": result.converged,
        "status": result.status,
        "n_iterations": result.n_iterations,
        "n_evaluations": result.n_evaluations,
        "estimates": result.estimates(),
    }


def write_json(path, document: dict):
    with open(path, "w") as fh:
        json.dump(document, fh, indent=2, sort_keys=True)
        fh.write("\n")

"""Survey geometry: sensor arrays, distances, bearings, and integration meshes.

Coordinates are planar (projected) easting/northing in meters.  Bearings are
radians clockwise from north internally; file interfaces use degrees.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import DataError, as_float_array, check_finite

#: Distances are clamped below at one meter so the log-distance transmission
#: loss stays finite; mesh centroids never coincide with sensors in practice.
MIN_DISTANCE_M = 1.0


@dataclass(frozen=True)
class SensorArray:
    """Positions of the K sensors, shape (K, 2) in meters."""

    positions: np.ndarray

    def __post_init__(self):
        pos = as_float_array(self.positions, "positions", ndim=2, shape=(None, 2))
        check_finite(pos, "positions")
        if pos.shape[0] < 2:
            raise DataError(f"need at least 2 sensors, got {pos.shape[0]}")
        if len(np.unique(pos, axis=0)) != pos.shape[0]:
            raise DataError("sensor positions must be distinct")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def k(self) -> int:
        return self.positions.shape[0]

    def spacings(self) -> np.ndarray:
        """All pairwise sensor distances (used for start-value heuristics)."""
        diff = self.positions[:, None, :] - self.positions[None, :, :]
        d = np.hypot(diff[..., 0], diff[..., 1])
        iu = np.triu_indices(self.k, k=1)
        return d[iu]


def _check_sensor_index(array: SensorArray, j: int) -> int:
    j = int(j)
    if not 0 <= j < array.k:
        raise IndexError(f"sensor index {j} out of range for K={array.k}")
    return j


def distance(array: SensorArray, j: int, x) -> float:
    """Euclidean distance in meters from sensor ``j`` to point ``x``.

    Clamped below at :data:`MIN_DISTANCE_M`.
    """
    j = _check_sensor_index(array, j)
    x = as_float_array(x, "x", shape=(2,))
    check_finite(x, "x")
    d = float(np.hypot(*(x - array.positions[j])))
    return max(d, MIN_DISTANCE_M)


def distances(array: SensorArray, points: np.ndarray) -> np.ndarray:
    """Distance matrix of shape (K, n_points), clamped at one meter."""
    points = as_float_array(points, "points", ndim=2, shape=(None, 2))
    diff = points[None, :, :] - array.positions[:, None, :]
    d = np.hypot(diff[..., 0], diff[..., 1])
    return np.maximum(d, MIN_DISTANCE_M)


def true_bearing(array: SensorArray, j: int, x) -> float:
    """Bearing from sensor ``j`` to point ``x``: radians clockwise from north.

    0 points along +northing, pi/2 along +easting.  Raises if ``x`` coincides
    with the sensor, where the bearing is undefined.
    """
    j = _check_sensor_index(array, j)
    x = as_float_array(x, "x", shape=(2,))
    de, dn = x - array.positions[j]
    if de == 0.0 and dn == 0.0:
        raise DataError(f"bearing undefined: point coincides with sensor {j}")
    return float(np.arctan2(de, dn) % (2.0 * np.pi))


def true_bearings(array: SensorArray, points: np.ndarray) -> np.ndarray:
    """Bearing matrix of shape (K, n_points), radians in [0, 2*pi)."""
    points = as_float_array(points, "points", ndim=2, shape=(None, 2))
    diff = points[None, :, :] - array.positions[:, None, :]
    return np.arctan2(diff[..., 0], diff[..., 1]) % (2.0 * np.pi)


class CovariateField:
    """Covariate values on a regular spatial grid with nearest-node lookup."""

    def __init__(self, nodes: np.ndarray, values: dict[str, np.ndarray]):
        self.nodes = as_float_array(nodes, "nodes", ndim=2, shape=(None, 2))
        self.values = {k: as_float_array(v, k, shape=(len(self.nodes),)) for k, v in values.items()}
        if not self.values:
            raise DataError("covariate field has no covariate columns")
        # Half the typical node spacing bounds how far a centroid may sit
        # from its nearest node before the field is declared non-covering.
        east = np.unique(self.nodes[:, 0])
        north = np.unique(self.nodes[:, 1])
        step_e = np.min(np.diff(east)) if len(east) > 1 else np.inf
        step_n = np.min(np.diff(north)) if len(north) > 1 else np.inf
        self._bounds = (east.min(), east.max(), north.min(), north.max())
        self._margin = (step_e / 2.0 if np.isfinite(step_e) else 0.0,
                        step_n / 2.0 if np.isfinite(step_n) else 0.0)
        from scipy.spatial import cKDTree

        self._tree = cKDTree(self.nodes)

    @property
    def names(self) -> list[str]:
        return list(self.values)

    def covers(self, points: np.ndarray) -> bool:
        points = as_float_array(points, "points", ndim=2, shape=(None, 2))
        e_lo, e_hi, n_lo, n_hi = self._bounds
        me, mn = self._margin
        ok_e = (points[:, 0] >= e_lo - me) & (points[:, 0] <= e_hi + me)
        ok_n = (points[:, 1] >= n_lo - mn) & (points[:, 1] <= n_hi + mn)
        return bool(np.all(ok_e & ok_n))

    def sample(self, points: np.ndarray) -> dict[str, np.ndarray]:
        points = as_float_array(points, "points", ndim=2, shape=(None, 2))
        if not self.covers(points):
            raise DataError("covariate field does not cover mesh extent")
        _, idx = self._tree.query(points)
        return {name: vals[idx] for name, vals in self.values.items()}


class FunctionField:
    """Covariate field defined by callables of (easting, northing) arrays."""

    def __init__(self, functions: dict[str, callable]):
        if not functions:
            raise DataError("covariate field has no covariate columns")
        self.functions = dict(functions)

    @property
    def names(self) -> list[str]:
        return list(self.functions)

    def covers(self, points: np.ndarray) -> bool:
        return True

    def sample(self, points: np.ndarray) -> dict[str, np.ndarray]:
        points = as_float_array(points, "points", ndim=2, shape=(None, 2))
        e, n = points[:, 0], points[:, 1]
        return {name: np.asarray(f(e, n), dtype=float) for name, f in self.functions.items()}


@dataclass(frozen=True)
class MeshCell:
    """One integration cell: centroid (m), area (m^2), covariates by name."""

    centroid: tuple[float, float]
    area: float
    covariates: dict[str, float] = field(default_factory=dict)


class Mesh:
    """Ordered integration cells over the survey region.

    Stored column-wise for vectorized evaluation: ``centroids`` (M, 2) in
    meters, ``areas`` (M,) in square meters, ``covariates`` mapping names to
    (M,) arrays.  Ordering is deterministic: row-major by (northing, easting)
    as produced by :func:`build_mesh`.
    """

    def __init__(self, centroids, areas, covariates: dict[str, np.ndarray],
                 inner_radius: float = np.nan, outer_radius: float = np.nan,
                 inner_spacing: float = np.nan, outer_spacing: float = np.nan):
        self.centroids = as_float_array(centroids, "centroids", ndim=2, shape=(None, 2))
        self.areas = as_float_array(areas, "areas", shape=(len(self.centroids),))
        if self.centroids.shape[0] == 0:
            raise DataError("mesh has no cells")
        if np.any(self.areas <= 0):
            raise DataError("cell areas must be positive")
        self.covariates = {
            k: as_float_array(v, k, shape=(len(self.centroids),)) for k, v in covariates.items()
        }
        for name, vals in self.covariates.items():
            check_finite(vals, f"covariate {name!r}")
        self.inner_radius = float(inner_radius)
        self.outer_radius = float(outer_radius)
        self.inner_spacing = float(inner_spacing)
        self.outer_spacing = float(outer_spacing)
        self._dist_to_array = None

    @property
    def n_cells(self) -> int:
        return self.centroids.shape[0]

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    def covariate(self, name: str) -> np.ndarray:
        if name not in self.covariates:
            raise DataError(f"covariate {name!r} not present on mesh")
        return self.covariates[name]

    def cell(self, i: int) -> MeshCell:
        return MeshCell(
            centroid=(float(self.centroids[i, 0]), float(self.centroids[i, 1])),
            area=float(self.areas[i]),
            covariates={k: float(v[i]) for k, v in self.covariates.items()},
        )

    def cells(self) -> list[MeshCell]:
        return [self.cell(i) for i in range(self.n_cells)]

    def boundary_mask(self) -> np.ndarray:
        """Cells in the outermost ring of the coarse stage.

        These are the cells whose detection probability the buffer check
        inspects; requires the mesh to have been built with radii recorded.
        """
        if (self._dist_to_array is None or not np.isfinite(self.outer_radius)
                or not np.isfinite(self.outer_spacing)):
            raise DataError("mesh was not built with recorded radii; no boundary defined")
        return self._dist_to_array > self.outer_radius - self.outer_spacing

    def subset(self, mask: np.ndarray) -> "Mesh":
        """New mesh keeping the masked cells (stage metadata preserved)."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n_cells,):
            raise DataError("subset mask must have one entry per cell")
        out = Mesh(self.centroids[mask], self.areas[mask],
                   {k: v[mask] for k, v in self.covariates.items()},
                   inner_radius=self.inner_radius, outer_radius=self.outer_radius,
                   inner_spacing=self.inner_spacing, outer_spacing=self.outer_spacing)
        if self._dist_to_array is not None:
            out._dist_to_array = self._dist_to_array[mask]
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mesh):
            return NotImplemented
        return (
            np.array_equal(self.centroids, other.centroids)
            and np.array_equal(self.areas, other.areas)
            and self.covariates.keys() == other.covariates.keys()
            and all(np.array_equal(v, other.covariates[k]) for k, v in self.covariates.items())
        )


def build_mesh(array: SensorArray, covariate_source, inner_radius: float,
               inner_spacing: float, outer_radius: float, outer_spacing: float) -> Mesh:
    """Two-stage square integration grid around the sensor array.

    The plane is tiled with coarse cells of side ``outer_spacing`` on a grid
    aligned to the array's bounding box.  Coarse cells whose centroid lies
    within ``inner_radius`` of the nearest sensor are subdivided into fine
    cells of side ``inner_spacing``; coarse cells with centroids between the
    two radii are kept whole.  Cells therefore never overlap and the fine/
    coarse boundary is quantized at the coarse spacing.  ``outer_spacing``
    must be an integer multiple of ``inner_spacing``.

    Covariates are sampled at cell centroids from ``covariate_source`` (an
    object with ``names``/``covers``/``sample``, e.g. :class:`CovariateField`).
    """
    inner_radius = float(inner_radius)
    outer_radius = float(outer_radius)
    inner_spacing = float(inner_spacing)
    outer_spacing = float(outer_spacing)
    if not (inner_spacing > 0 and outer_spacing > 0):
        raise DataError("mesh spacings must be positive")
    if not inner_radius < outer_radius:
        raise DataError("inner_radius must be smaller than outer_radius")
    ratio = outer_spacing / inner_spacing
    if abs(ratio - round(ratio)) > 1e-9:
        raise DataError("outer_spacing must be an integer multiple of inner_spacing")
    ratio = int(round(ratio))

    pos = array.positions
    origin_e = pos[:, 0].min() - outer_radius - outer_spacing
    origin_n = pos[:, 1].min() - outer_radius - outer_spacing
    extent_e = pos[:, 0].max() + outer_radius + outer_spacing - origin_e
    extent_n = pos[:, 1].max() + outer_radius + outer_spacing - origin_n
    n_e = int(np.ceil(extent_e / outer_spacing))
    n_n = int(np.ceil(extent_n / outer_spacing))

    # Coarse centroids, row-major by (northing, easting) for stable ordering.
    ge, gn = np.meshgrid(np.arange(n_e), np.arange(n_n))
    coarse = np.column_stack([
        origin_e + (ge.ravel() + 0.5) * outer_spacing,
        origin_n + (gn.ravel() + 0.5) * outer_spacing,
    ])
    d_coarse = distances(array, coarse).min(axis=0)
    keep_outer = (d_coarse > inner_radius) & (d_coarse <= outer_radius)
    refine = d_coarse <= inner_radius

    centroids = [coarse[keep_outer]]
    areas = [np.full(int(keep_outer.sum()), outer_spacing**2)]

    if np.any(refine):
        anchors = coarse[refine] - outer_spacing / 2.0
        se, sn = np.meshgrid(np.arange(ratio), np.arange(ratio))
        offsets = np.column_stack([
            (se.ravel() + 0.5) * inner_spacing,
            (sn.ravel() + 0.5) * inner_spacing,
        ])
        fine = (anchors[:, None, :] + offsets[None, :, :]).reshape(-1, 2)
        centroids.append(fine)
        areas.append(np.full(len(fine), inner_spacing**2))

    centroids = np.concatenate(centroids, axis=0)
    areas = np.concatenate(areas)
    # Global deterministic order: by northing then easting.
    order = np.lexsort((centroids[:, 0], centroids[:, 1]))
    centroids = centroids[order]
    areas = areas[order]

    if centroids.shape[0] == 0:
        raise DataError("mesh construction produced no cells")
    if not covariate_source.covers(centroids):
        raise DataError("covariate field does not cover mesh extent")
    covariates = covariate_source.sample(centroids)

    mesh = Mesh(centroids, areas, covariates,
                inner_radius=inner_radius, outer_radius=outer_radius,
                inner_spacing=inner_spacing, outer_spacing=outer_spacing)
    mesh._dist_to_array = distances(array, centroids).min(axis=0)
    return mesh

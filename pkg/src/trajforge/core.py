"""Domain types: grid/time discretization, trajectories, constraints, validity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

EARTH_RADIUS_KM = 6371.0088
KM_PER_DEG_LAT = math.pi * EARTH_RADIUS_KM / 180.0


class OutOfBoundsError(ValueError):
    """A geographic point falls outside the grid bounding box."""


class OutOfRangeError(ValueError):
    """A time value falls outside the representable day."""


class InvalidCellError(ValueError):
    """A cell id is not in [1, n_cells]."""


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in kilometers."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(a))


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned lat/lon box split into equal square cells, row-major ids from 1.

    Longitude degrees are converted to kilometers with a fixed factor taken at
    the box's mid-latitude; adequate at city scale.
    """

    origin_lat: float
    origin_lon: float
    n_rows: int
    n_cols: int
    cell_km: float = 1.0

    def __post_init__(self):
        if self.cell_km <= 0:
            raise ValueError(f"cell_km must be positive, got {self.cell_km}")
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid must have at least one row and one column")

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def km_per_deg_lon(self) -> float:
        mid_lat = self.origin_lat + (self.n_rows * self.cell_km / KM_PER_DEG_LAT) / 2
        return KM_PER_DEG_LAT * math.cos(math.radians(mid_lat))


@dataclass(frozen=True)
class TimeSpec:
    """Day discretized into fixed slots; slot_minutes must divide 1440."""

    slot_minutes: int = 15

    def __post_init__(self):
        if self.slot_minutes <= 0 or 1440 % self.slot_minutes != 0:
            raise ValueError(f"slot_minutes must divide 1440, got {self.slot_minutes}")

    @property
    def slots_per_day(self) -> int:
        return 1440 // self.slot_minutes

    @property
    def slot_seconds(self) -> int:
        return self.slot_minutes * 60


@dataclass(frozen=True)
class Visit:
    """One stay: arrival slot, grid cell id, duration in slots."""

    arrival: int
    location: int
    duration: int


@dataclass(frozen=True)
class Trajectory:
    """One user-day sequence of visits."""

    visits: tuple[Visit, ...]
    meta: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "visits", tuple(self.visits))

    def __len__(self) -> int:
        return len(self.visits)


@dataclass(frozen=True)
class TrajectoryDataset:
    trajectories: tuple[Trajectory, ...]
    grid: GridSpec
    timespec: TimeSpec

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))

    def __len__(self) -> int:
        return len(self.trajectories)


@dataclass(frozen=True)
class Constraint:
    """Required visit: location plus an inclusive arrival-slot window."""

    location: int
    t_start: int
    t_end: int
    duration_hint: Optional[int] = None

    def __post_init__(self):
        if not (0 <= self.t_start <= self.t_end):
            raise ValueError(f"bad constraint window [{self.t_start}, {self.t_end}]")


@dataclass(frozen=True)
class ConstraintSet:
    constraints: tuple[Constraint, ...]
    source_id: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))

    def __len__(self) -> int:
        return len(self.constraints)


def discretize_location(lat: float, lon: float, grid: GridSpec) -> int:
    """Map a point to its row-major cell id in [1, n_cells].

    Cell boundaries are left/bottom-inclusive, right/top-exclusive.
    """
    row = math.floor((lat - grid.origin_lat) * KM_PER_DEG_LAT / grid.cell_km)
    col = math.floor((lon - grid.origin_lon) * grid.km_per_deg_lon / grid.cell_km)
    if not (0 <= row < grid.n_rows and 0 <= col < grid.n_cols):
        raise OutOfBoundsError(f"point ({lat}, {lon}) outside grid box")
    return row * grid.n_cols + col + 1


def discretize_time(seconds_of_day: float, ts: TimeSpec) -> int:
    """Map seconds-of-day to a slot index."""
    if not (0 <= seconds_of_day < 86400):
        raise OutOfRangeError(f"seconds-of-day out of range: {seconds_of_day}")
    return int(seconds_of_day // ts.slot_seconds)


def cell_centroid(cell: int, grid: GridSpec) -> tuple[float, float]:
    """Geographic center of a cell; inverse of discretize_location on ids."""
    if not (1 <= cell <= grid.n_cells):
        raise InvalidCellError(f"cell {cell} not in [1, {grid.n_cells}]")
    row, col = divmod(cell - 1, grid.n_cols)
    lat = grid.origin_lat + (row + 0.5) * grid.cell_km / KM_PER_DEG_LAT
    lon = grid.origin_lon + (col + 0.5) * grid.cell_km / grid.km_per_deg_lon
    return lat, lon


def satisfies(traj: Trajectory, c: Constraint) -> bool:
    """True iff some visit hits the constrained location inside the window."""
    return any(
        v.location == c.location and c.t_start <= v.arrival <= c.t_end
        for v in traj.visits
    )


def satisfies_all(traj: Trajectory, cs: ConstraintSet) -> tuple[bool, list[bool]]:
    """Per-constraint satisfaction report plus the conjunction."""
    report = [satisfies(traj, c) for c in cs.constraints]
    return all(report), report


def validate_trajectory(traj: Trajectory, ts: TimeSpec, grid: GridSpec) -> list[str]:
    """All integrity violations found; empty list means the trajectory is clean."""
    violations: list[str] = []
    if len(traj.visits) < 1:
        violations.append("empty trajectory")
        return violations
    spd = ts.slots_per_day
    for idx, v in enumerate(traj.visits):
        if not (0 <= v.arrival < spd):
            violations.append(f"visit {idx}: arrival {v.arrival} out of range")
        if not (1 <= v.location <= grid.n_cells):
            violations.append(f"visit {idx}: location {v.location} out of range")
        if not (1 <= v.duration <= spd):
            violations.append(f"visit {idx}: duration {v.duration} out of range")
        if v.arrival + v.duration > spd:
            violations.append(
                f"visit {idx}: arrival {v.arrival} + duration {v.duration} crosses the day boundary"
            )
    for idx in range(len(traj.visits) - 1):
        a, b = traj.visits[idx], traj.visits[idx + 1]
        if b.arrival <= a.arrival:
            violations.append(
                f"visits {idx},{idx + 1}: arrivals not strictly increasing ({a.arrival} -> {b.arrival})"
            )
        elif a.arrival + a.duration > b.arrival:
            violations.append(
                f"visits {idx},{idx + 1}: overlap ({a.arrival}+{a.duration} > {b.arrival})"
            )
    return violations

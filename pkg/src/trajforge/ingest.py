"""Raw GPS records -> staypoints -> single-day discretized trajectories."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import IO, Iterable

from .core import (
    GridSpec,
    OutOfBoundsError,
    TimeSpec,
    Trajectory,
    TrajectoryDataset,
    Visit,
    discretize_location,
    discretize_time,
    haversine_km,
    validate_trajectory,
)


class MalformedRowError(ValueError):
    def __init__(self, line_no: int, text: str, reason: str):
        self.line_no = line_no
        self.text = text
        super().__init__(f"line {line_no}: {reason}: {text!r}")


@dataclass(frozen=True)
class GpsRecord:
    user_id: str
    timestamp: float  # epoch seconds
    lat: float
    lon: float


@dataclass(frozen=True)
class Staypoint:
    """Dwell within radius_km for at least the minimum duration.

    Coordinates are the mean of the member points (not the anchor).
    """

    lat: float
    lon: float
    t_arrive: float
    t_leave: float


@dataclass
class IngestStats:
    records_read: int = 0
    records_dropped: int = 0
    staypoints: int = 0
    trajectories: int = 0
    trajectories_filtered: int = 0
    visits_clipped: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


EXPECTED_COLUMNS = ["user_id", "timestamp", "lat", "lon"]


def parse_gps_csv(stream: IO) -> list[GpsRecord]:
    """Parse `user_id,timestamp,lat,lon` rows; per-user records sorted by time."""
    if isinstance(stream, (bytes, bytearray)):
        stream = io.StringIO(stream.decode("utf-8"))
    elif hasattr(stream, "read") and isinstance(stream.read(0), bytes):
        stream = io.TextIOWrapper(stream, encoding="utf-8")
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise MalformedRowError(1, "", "missing header row")
    header = [h.strip() for h in header]
    if header != EXPECTED_COLUMNS:
        missing = [c for c in EXPECTED_COLUMNS if c not in header]
        raise MalformedRowError(
            1, ",".join(header), f"bad header, missing columns {missing or header}"
        )
    records = []
    for line_no, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 4:
            raise MalformedRowError(line_no, ",".join(row), "expected 4 fields")
        user_id = row[0].strip()
        try:
            ts, lat, lon = float(row[1]), float(row[2]), float(row[3])
        except ValueError:
            raise MalformedRowError(line_no, ",".join(row), "non-numeric field")
        if not (-90 <= lat <= 90 and -180 <= lon <= 180):
            raise MalformedRowError(line_no, ",".join(row), "coordinate out of range")
        records.append(GpsRecord(user_id, ts, lat, lon))
    records.sort(key=lambda r: (r.user_id, r.timestamp))
    return records


def extract_staypoints(
    records: list[GpsRecord], radius_km: float = 1.0, min_minutes: float = 20.0
) -> list[Staypoint]:
    """Anchor-scan staypoint detection on one user's time-sorted records.

    From anchor i, extend j while the point stays within radius_km of the
    anchor. When the window i..j-1 dwells at least min_minutes, emit its mean
    coordinates and continue from j; otherwise advance the anchor by one.
    """
    min_seconds = min_minutes * 60.0
    out: list[Staypoint] = []
    n = len(records)
    i = 0
    while i < n:
        j = i + 1
        while j < n and haversine_km(
            records[i].lat, records[i].lon, records[j].lat, records[j].lon
        ) <= radius_km:
            j += 1
        if records[j - 1].timestamp - records[i].timestamp >= min_seconds:
            members = records[i:j]
            out.append(
                Staypoint(
                    lat=sum(r.lat for r in members) / len(members),
                    lon=sum(r.lon for r in members) / len(members),
                    t_arrive=records[i].timestamp,
                    t_leave=records[j - 1].timestamp,
                )
            )
            i = j
        else:
            i += 1
    return out


def split_days(
    staypoints: Iterable[Staypoint],
    grid: GridSpec,
    ts: TimeSpec,
    user_id: str = "",
    stats: IngestStats | None = None,
) -> list[Trajectory]:
    """Group staypoints by calendar day and discretize each into a Visit.

    Dwells crossing midnight are clipped at the day boundary; a visit whose
    rounded slots collide with the next arrival gets its duration clipped, and
    a visit landing on an already-taken slot is dropped (counted, not fatal).
    """
    by_day: dict[int, list[tuple[int, int, int]]] = {}
    for sp in sorted(staypoints, key=lambda s: s.t_arrive):
        day = int(sp.t_arrive // 86400)
        arrival = discretize_time(sp.t_arrive % 86400, ts)
        try:
            location = discretize_location(sp.lat, sp.lon, grid)
        except OutOfBoundsError:
            if stats:
                stats.records_dropped += 1
            continue
        duration = max(1, round((sp.t_leave - sp.t_arrive) / ts.slot_seconds))
        duration = min(duration, ts.slots_per_day - arrival)
        by_day.setdefault(day, []).append((arrival, location, duration))

    trajectories = []
    for day in sorted(by_day):
        entries = by_day[day]
        visits: list[Visit] = []
        for arrival, location, duration in entries:
            if visits and arrival <= visits[-1].arrival:
                if stats:
                    stats.visits_clipped += 1
                continue
            if visits and visits[-1].arrival + visits[-1].duration > arrival:
                prev = visits.pop()
                visits.append(Visit(prev.arrival, prev.location, arrival - prev.arrival))
                if stats:
                    stats.visits_clipped += 1
            visits.append(Visit(arrival, location, duration))
        if visits:
            trajectories.append(
                Trajectory(visits=tuple(visits), meta=f"{user_id}/{day}")
            )
    return trajectories


def filter_short(ds: TrajectoryDataset, min_visits: int = 3) -> TrajectoryDataset:
    kept = tuple(t for t in ds.trajectories if len(t) >= min_visits)
    return TrajectoryDataset(trajectories=kept, grid=ds.grid, timespec=ds.timespec)


def build_dataset(
    stream: IO,
    grid: GridSpec,
    ts: TimeSpec,
    radius_km: float = 1.0,
    min_minutes: float = 20.0,
    min_visits: int = 3,
    stats: IngestStats | None = None,
) -> TrajectoryDataset:
    """Full preprocessing pipeline: parse, staypoints per user, split, filter."""
    stats = stats if stats is not None else IngestStats()
    records = parse_gps_csv(stream)
    stats.records_read = len(records)

    by_user: dict[str, list[GpsRecord]] = {}
    for r in records:
        by_user.setdefault(r.user_id, []).append(r)

    trajectories: list[Trajectory] = []
    for user_id in sorted(by_user):
        sps = extract_staypoints(by_user[user_id], radius_km, min_minutes)
        stats.staypoints += len(sps)
        trajectories.extend(split_days(sps, grid, ts, user_id=user_id, stats=stats))

    ds = TrajectoryDataset(trajectories=tuple(trajectories), grid=grid, timespec=ts)
    ds = filter_short(ds, min_visits)
    stats.trajectories = len(ds)
    stats.trajectories_filtered = len(trajectories) - len(ds)
    for traj in ds.trajectories:
        bad = validate_trajectory(traj, ts, grid)
        if bad:
            raise AssertionError(f"ingest produced invalid trajectory {traj.meta}: {bad}")
    return ds

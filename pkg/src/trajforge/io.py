"""File formats: trajectory JSONL with a sidecar header, constraint JSONL."""

from __future__ import annotations

import json
from pathlib import Path

from .core import (
    Constraint,
    ConstraintSet,
    GridSpec,
    TimeSpec,
    Trajectory,
    TrajectoryDataset,
    Visit,
)

HEADER_SUFFIX = ".header.json"


def header_path(trajectories_path: str | Path) -> Path:
    p = Path(trajectories_path)
    return p.with_name(p.stem + HEADER_SUFFIX)


def write_dataset(ds: TrajectoryDataset, path: str | Path) -> None:
    """One JSON record per line plus a sidecar header with grid/timespec."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for i, traj in enumerate(ds.trajectories):
            rec = {
                "id": traj.meta if traj.meta is not None else str(i),
                "visits": [[v.arrival, v.location, v.duration] for v in traj.visits],
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")
    header = {
        "grid": {
            "origin_lat": ds.grid.origin_lat,
            "origin_lon": ds.grid.origin_lon,
            "n_rows": ds.grid.n_rows,
            "n_cols": ds.grid.n_cols,
            "cell_km": ds.grid.cell_km,
        },
        "timespec": {"slot_minutes": ds.timespec.slot_minutes},
    }
    header_path(path).write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")


def read_dataset(path: str | Path) -> TrajectoryDataset:
    path = Path(path)
    header = json.loads(header_path(path).read_text(encoding="utf-8"))
    grid = GridSpec(**header["grid"])
    ts = TimeSpec(**header["timespec"])
    trajectories = []
    with path.open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            visits = tuple(Visit(a, l, d) for a, l, d in rec["visits"])
            trajectories.append(Trajectory(visits=visits, meta=rec.get("id")))
    return TrajectoryDataset(trajectories=tuple(trajectories), grid=grid, timespec=ts)


def write_constraints(sets: list[ConstraintSet], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for cs in sets:
            rec = {
                "for": cs.source_id,
                "constraints": [
                    [c.location, c.t_start, c.t_end, c.duration_hint]
                    for c in cs.constraints
                ],
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_constraints(path: str | Path) -> list[ConstraintSet]:
    sets = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            constraints = tuple(
                Constraint(location=loc, t_start=t0, t_end=t1, duration_hint=dur)
                for loc, t0, t1, dur in rec["constraints"]
            )
            sets.append(ConstraintSet(constraints=constraints, source_id=rec.get("for")))
    return sets

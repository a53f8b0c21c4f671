import numpy as np
import pytest

from trajforge.core import GridSpec, TimeSpec, Trajectory, TrajectoryDataset, Visit


@pytest.fixture
def grid():
    return GridSpec(origin_lat=40.0, origin_lon=-80.0, n_rows=5, n_cols=4)


@pytest.fixture
def timespec():
    return TimeSpec()


def random_trajectory(rng, n_cells=20, slots=96, min_visits=1, max_visits=8, meta=None):
    """A random trajectory that always passes validity checks."""
    n = int(rng.integers(min_visits, max_visits + 1))
    arrivals = np.sort(rng.choice(slots, size=n, replace=False))
    visits = []
    for j, a in enumerate(arrivals):
        limit = (arrivals[j + 1] if j + 1 < n else slots) - a
        d = int(rng.integers(1, min(6, limit) + 1))
        visits.append(Visit(int(a), int(rng.integers(1, n_cells + 1)), d))
    return Trajectory(visits=tuple(visits), meta=meta)


def random_dataset(rng, grid, ts, n=20, **kw):
    trajs = tuple(
        random_trajectory(rng, grid.n_cells, ts.slots_per_day, meta=str(i), **kw)
        for i in range(n)
    )
    return TrajectoryDataset(trajectories=trajs, grid=grid, timespec=ts)


def cycle_corpus(grid, ts, n=32, n_locations=8, seed=7):
    """Memorizable corpus whose locations walk a fixed cycle.

    Deterministic location transitions keep the empirical transition matrix
    reproducible from replayed samples.
    """
    rng = np.random.default_rng(seed)
    trajs = []
    for i in range(n):
        length = int(rng.integers(3, 7))
        arrivals = np.sort(rng.choice(ts.slots_per_day, size=length, replace=False))
        start = int(rng.integers(0, n_locations))
        visits = []
        for j, a in enumerate(arrivals):
            limit = (arrivals[j + 1] if j + 1 < length else ts.slots_per_day) - a
            d = int(rng.integers(1, min(6, limit) + 1))
            visits.append(Visit(int(a), (start + j) % n_locations + 1, d))
        trajs.append(Trajectory(visits=tuple(visits), meta=str(i)))
    return TrajectoryDataset(trajectories=tuple(trajs), grid=grid, timespec=ts)

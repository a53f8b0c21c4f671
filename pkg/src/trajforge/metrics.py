"""Realism metrics: six JSD discrepancies and transition Frobenius distances."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import TrajectoryDataset, cell_centroid, haversine_km


class BinMismatch(ValueError):
    pass


class GridMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Histogram:
    """Probability vector over a fixed support; all-zero encodes an empty input."""

    probs: np.ndarray
    labels: tuple

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if (p < 0).any():
            raise ValueError("negative probability")
        s = p.sum()
        if not (s == 0.0 or abs(s - 1.0) <= 1e-9):
            raise ValueError(f"probabilities sum to {s}, expected 0 or 1")


def shannon_entropy(h: Histogram | np.ndarray) -> float:
    """-sum p ln p in nats, with 0 ln 0 = 0."""
    p = h.probs if isinstance(h, Histogram) else np.asarray(h, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def jsd(p: Histogram, q: Histogram) -> float:
    """Jensen-Shannon divergence in nats: h((p+q)/2) - (h(p)+h(q))/2."""
    if isinstance(p, Histogram) and isinstance(q, Histogram):
        if p.labels != q.labels or len(p.probs) != len(q.probs):
            raise BinMismatch("histograms built over different supports")
        pa, qa = p.probs, q.probs
    else:
        pa = np.asarray(p.probs if isinstance(p, Histogram) else p, dtype=np.float64)
        qa = np.asarray(q.probs if isinstance(q, Histogram) else q, dtype=np.float64)
        if pa.shape != qa.shape:
            raise BinMismatch("histograms have different lengths")
    m = (pa + qa) / 2.0
    return shannon_entropy(m) - (shannon_entropy(pa) + shannon_entropy(qa)) / 2.0


@dataclass(frozen=True)
class BinningConfig:
    n_distance_bins: int = 50
    n_gradius_bins: int = 50
    percentile: float = 99.0
    dailyloc_max: Optional[int] = None
    top_k: int = 100
    irank_depth: int = 10
    top_k_transition: int = 100


@dataclass(frozen=True)
class Binning:
    """Concrete shared bin structure, derived from the real dataset."""

    distance_edges: tuple
    gradius_edges: tuple
    duration_support: int
    dailyloc_support: int
    top_k: int
    irank_depth: int


def _traj_points(traj, grid):
    return [cell_centroid(v.location, grid) for v in traj.visits]


def travel_distance_km(traj, grid) -> float:
    pts = _traj_points(traj, grid)
    return sum(
        haversine_km(*pts[i], *pts[i + 1]) for i in range(len(pts) - 1)
    )


def radius_of_gyration_km(traj, grid) -> float:
    pts = _traj_points(traj, grid)
    clat = sum(p[0] for p in pts) / len(pts)
    clon = sum(p[1] for p in pts) / len(pts)
    sq = [haversine_km(lat, lon, clat, clon) ** 2 for lat, lon in pts]
    return math.sqrt(sum(sq) / len(sq))


def resolve_binning(
    real: TrajectoryDataset, cfg: BinningConfig, other: TrajectoryDataset | None = None
) -> Binning:
    """Linear bins over [0, p99 of the real data] plus an overflow bin;
    categorical supports wide enough for both datasets."""
    dists = [travel_distance_km(t, real.grid) for t in real.trajectories]
    grads = [radius_of_gyration_km(t, real.grid) for t in real.trajectories]

    def edges(values, n_bins):
        hi = float(np.percentile(values, cfg.percentile)) if values else 1.0
        hi = hi if hi > 0 else 1.0
        return tuple(np.linspace(0.0, hi, n_bins + 1))

    max_l = max((len(t) for t in real.trajectories), default=1)
    if other is not None:
        max_l = max(max_l, max((len(t) for t in other.trajectories), default=1))
    dailyloc_support = cfg.dailyloc_max if cfg.dailyloc_max is not None else max_l
    return Binning(
        distance_edges=edges(dists, cfg.n_distance_bins),
        gradius_edges=edges(grads, cfg.n_gradius_bins),
        duration_support=real.timespec.slots_per_day,
        dailyloc_support=dailyloc_support,
        top_k=cfg.top_k,
        irank_depth=cfg.irank_depth,
    )


def _binned(values, edges_t, label) -> Histogram:
    edges = np.asarray(edges_t)
    counts = np.zeros(len(edges) - 1 + 1, dtype=np.float64)  # + overflow bin
    for v in values:
        if v >= edges[-1]:
            counts[-1] += 1
        else:
            counts[np.searchsorted(edges, v, side="right") - 1] += 1
    total = counts.sum()
    probs = counts / total if total > 0 else counts
    return Histogram(probs=probs, labels=(label, edges_t))


def _categorical(values, support: int, label, first: int = 1) -> Histogram:
    counts = np.zeros(support, dtype=np.float64)
    for v in values:
        idx = min(v, support + first - 1) - first
        counts[idx] += 1
    total = counts.sum()
    probs = counts / total if total > 0 else counts
    return Histogram(probs=probs, labels=(label, support))


def trajectory_distributions(ds: TrajectoryDataset, binning: Binning) -> dict[str, Histogram]:
    """Distance, radius of gyration, per-visit duration, and visits-per-day."""
    dists = [travel_distance_km(t, ds.grid) for t in ds.trajectories]
    grads = [radius_of_gyration_km(t, ds.grid) for t in ds.trajectories]
    durations = [v.duration for t in ds.trajectories for v in t.visits]
    dailyloc = [len(t) for t in ds.trajectories]
    return {
        "distance": _binned(dists, binning.distance_edges, "distance_km"),
        "gradius": _binned(grads, binning.gradius_edges, "gradius_km"),
        "duration": _categorical(durations, binning.duration_support, "duration_slots"),
        "dailyloc": _categorical(dailyloc, binning.dailyloc_support, "visits_per_day"),
    }


def location_visit_counts(ds: TrajectoryDataset) -> dict[int, int]:
    counts: dict[int, int] = {}
    for t in ds.trajectories:
        for v in t.visits:
            counts[v.location] = counts.get(v.location, 0) + 1
    return counts


def rank_distributions(
    ds: TrajectoryDataset, top_k: int = 100, irank_depth: int = 10
) -> dict[str, Histogram]:
    """Visit-count profiles over rank positions, globally and per individual."""
    counts = location_visit_counts(ds)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    gvec = np.zeros(top_k, dtype=np.float64)
    for i, (_loc, c) in enumerate(ordered):
        gvec[i] = c
    gtotal = gvec.sum()
    grank = Histogram(
        probs=gvec / gtotal if gtotal > 0 else gvec, labels=("grank", top_k)
    )

    acc = np.zeros(irank_depth, dtype=np.float64)
    for t in ds.trajectories:
        per: dict[int, int] = {}
        for v in t.visits:
            per[v.location] = per.get(v.location, 0) + 1
        vec = sorted(per.items(), key=lambda kv: (-kv[1], kv[0]))[:irank_depth]
        total = sum(c for _l, c in per.items())
        for i, (_loc, c) in enumerate(vec):
            acc[i] += c / total
    atotal = acc.sum()
    irank = Histogram(
        probs=acc / atotal if atotal > 0 else acc, labels=("irank", irank_depth)
    )
    return {"grank": grank, "irank": irank}


class TransitionMatrix:
    """Sparse row-stochastic matrix of consecutive-visit location transitions."""

    def __init__(self, n_cells: int, probs: dict[tuple[int, int], float]):
        self.n_cells = n_cells
        self.probs = probs

    @classmethod
    def from_dataset(cls, ds: TrajectoryDataset) -> "TransitionMatrix":
        counts: dict[tuple[int, int], int] = {}
        row_totals: dict[int, int] = {}
        for t in ds.trajectories:
            for a, b in zip(t.visits, t.visits[1:]):
                key = (a.location, b.location)
                counts[key] = counts.get(key, 0) + 1
                row_totals[a.location] = row_totals.get(a.location, 0) + 1
        probs = {k: c / row_totals[k[0]] for k, c in counts.items()}
        return cls(ds.grid.n_cells, probs)

    def row_sums(self) -> dict[int, float]:
        sums: dict[int, float] = {}
        for (l1, _l2), p in self.probs.items():
            sums[l1] = sums.get(l1, 0.0) + p
        return sums

    def dense(self) -> np.ndarray:
        m = np.zeros((self.n_cells, self.n_cells))
        for (l1, l2), p in self.probs.items():
            m[l1 - 1, l2 - 1] = p
        return m


def transition_matrix(ds: TrajectoryDataset) -> TransitionMatrix:
    return TransitionMatrix.from_dataset(ds)


def frobenius_diff(
    p: TransitionMatrix, q: TransitionMatrix, restrict_to: Optional[set] = None
) -> float:
    """sqrt of summed squared entry differences; restriction keeps entries whose
    source or target location is in the set."""
    if p.n_cells != q.n_cells:
        raise GridMismatch(f"matrices over {p.n_cells} vs {q.n_cells} cells")
    total = 0.0
    for key in set(p.probs) | set(q.probs):
        if restrict_to is not None and key[0] not in restrict_to and key[1] not in restrict_to:
            continue
        d = p.probs.get(key, 0.0) - q.probs.get(key, 0.0)
        total += d * d
    return math.sqrt(total)


@dataclass
class MetricsReport:
    distance_jsd: float
    gradius_jsd: float
    duration_jsd: float
    dailyloc_jsd: float
    grank_jsd: float
    irank_jsd: float
    transition_frob: float
    topk_transition_frob: Optional[float] = None
    meta: dict = field(default_factory=dict)

    JSD_FIELDS = ("distance_jsd", "gradius_jsd", "duration_jsd", "dailyloc_jsd", "grank_jsd", "irank_jsd")

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.JSD_FIELDS}
        d["transition_frob"] = self.transition_frob
        d["topk_transition_frob"] = self.topk_transition_frob
        d["meta"] = self.meta
        return d


def distribution_pairs(
    real: TrajectoryDataset, gen: TrajectoryDataset, cfg: BinningConfig = BinningConfig()
) -> dict[str, tuple[Histogram, Histogram]]:
    """The six (real, generated) histogram pairs under shared binning."""
    binning = resolve_binning(real, cfg, other=gen)
    rd = trajectory_distributions(real, binning)
    gd = trajectory_distributions(gen, binning)
    rr = rank_distributions(real, binning.top_k, binning.irank_depth)
    gr = rank_distributions(gen, binning.top_k, binning.irank_depth)
    pairs = {k: (rd[k], gd[k]) for k in rd}
    pairs.update({k: (rr[k], gr[k]) for k in rr})
    return pairs


def evaluate(
    real: TrajectoryDataset,
    gen: TrajectoryDataset,
    constraint_locations: Optional[set] = None,
    cfg: BinningConfig = BinningConfig(),
) -> MetricsReport:
    """Full metric suite between a real and a generated dataset."""
    if real.grid != gen.grid or real.timespec != gen.timespec:
        raise GridMismatch("datasets use different grids or time discretizations")
    pairs = distribution_pairs(real, gen, cfg)
    jsds = {k: jsd(p, q) for k, (p, q) in pairs.items()}
    pm = transition_matrix(real)
    qm = transition_matrix(gen)
    frob = frobenius_diff(pm, qm)
    topk = None
    if constraint_locations is not None:
        locs = set(constraint_locations)
        if len(locs) > cfg.top_k_transition:
            counts = location_visit_counts(real)
            ranked = sorted(locs, key=lambda l: (-counts.get(l, 0), l))
            locs = set(ranked[: cfg.top_k_transition])
        topk = frobenius_diff(pm, qm, restrict_to=locs)
    return MetricsReport(
        distance_jsd=jsds["distance"],
        gradius_jsd=jsds["gradius"],
        duration_jsd=jsds["duration"],
        dailyloc_jsd=jsds["dailyloc"],
        grank_jsd=jsds["grank"],
        irank_jsd=jsds["irank"],
        transition_frob=frob,
        topk_transition_frob=topk,
        meta={
            "n_real": len(real),
            "n_generated": len(gen),
            "top_k": cfg.top_k,
            "irank_depth": cfg.irank_depth,
        },
    )

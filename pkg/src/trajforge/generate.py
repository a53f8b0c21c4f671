"""Prompting, temperature sampling, and the reorder/integrity/verify loop."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    Constraint,
    ConstraintSet,
    GridSpec,
    TimeSpec,
    Trajectory,
    TrajectoryDataset,
    Visit,
    satisfies_all,
    validate_trajectory,
)
from .encode import ParseError, Vocabulary, decode_tokens, encode_visit
from .model import LoraAdapter, ModelConfig, forward_logits

_COLLISION_RETRIES = 100


class EmptyConstraintSet(ValueError):
    pass


class UnresolvableCollision(ValueError):
    pass


class NonFiniteLogits(ValueError):
    pass


class Unsatisfiable(ValueError):
    pass


class RetriesExhausted(RuntimeError):
    def __init__(self, reasons: Counter):
        self.reasons = dict(reasons)
        super().__init__(f"all generation attempts failed: {self.reasons}")


@dataclass(frozen=True)
class GenConfig:
    temperature: float = 1.2
    max_new_tokens: int = 200
    max_retries: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass(frozen=True)
class GenerationOutcome:
    trajectory: Trajectory
    attempts: int
    constraint_report: tuple[bool, ...] = ()


class EmpiricalDurations:
    """Duration marginal of a training dataset, drawable per constraint prompt."""

    def __init__(self, counts: dict[int, int]):
        if not counts:
            counts = {1: 1}
        self.counts = {int(k): int(v) for k, v in counts.items()}
        self.values = np.array(sorted(self.counts), dtype=np.int64)
        totals = np.array([self.counts[v] for v in self.values], dtype=np.float64)
        self.probs = totals / totals.sum()

    @classmethod
    def from_dataset(cls, dataset: TrajectoryDataset) -> "EmpiricalDurations":
        return cls(Counter(v.duration for t in dataset.trajectories for v in t.visits))

    def draw(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.values, p=self.probs))


def build_uncontrolled_prompt(vocab: Vocabulary) -> list[int]:
    """The seed phrase every training sequence starts with."""
    return [vocab.bos, vocab.arrival_word, vocab.time_word, vocab.is_word]


def materialize_constraint_visits(
    cs: ConstraintSet,
    durations: EmpiricalDurations,
    rng: np.random.Generator,
    slots_per_day: int,
) -> list[Visit]:
    """Pin each constraint to a concrete visit: uniform arrival, hinted or drawn duration.

    Arrival slots must be pairwise distinct; colliding draws are retried a
    bounded number of times.
    """
    if len(cs) == 0:
        raise EmptyConstraintSet("controlled generation needs at least one constraint")
    for _ in range(_COLLISION_RETRIES):
        visits = []
        for c in cs.constraints:
            arrival = int(rng.integers(c.t_start, c.t_end + 1))
            duration = c.duration_hint if c.duration_hint is not None else durations.draw(rng)
            duration = max(1, min(duration, slots_per_day - arrival))
            visits.append(Visit(arrival=arrival, location=c.location, duration=duration))
        if len({v.arrival for v in visits}) == len(visits):
            return visits
    raise UnresolvableCollision("constraint windows force identical arrival slots")


def build_controlled_prompt(
    cs: ConstraintSet,
    vocab: Vocabulary,
    durations: EmpiricalDurations,
    rng: np.random.Generator,
) -> tuple[list[int], list[Visit]]:
    """Constraint visits encoded as full blocks, then the seed phrase to continue."""
    visits = materialize_constraint_visits(cs, durations, rng, vocab.slots)
    ids = [vocab.bos]
    for v in visits:
        ids.extend(encode_visit(v, vocab))
        ids.append(vocab.sep)
    ids.extend([vocab.arrival_word, vocab.time_word, vocab.is_word])
    return ids, visits


def sample_next(logits_row: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Categorical draw from softmax(logits / T)."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    logits_row = np.asarray(logits_row, dtype=np.float64)
    if not np.all(np.isfinite(logits_row)):
        raise NonFiniteLogits("logits contain NaN or infinity")
    z = logits_row / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def generate_sequence(
    params,
    config: ModelConfig,
    prompt: list[int],
    gc: GenConfig,
    rng: np.random.Generator,
    adapter: LoraAdapter | None = None,
) -> tuple[list[int], bool]:
    """Sample until EOS or max_new_tokens; returns (sequence, saw_eos)."""
    vocab_eos = 1
    ids = list(prompt)
    for _ in range(gc.max_new_tokens):
        if len(ids) >= config.max_seq_len:
            return ids, False
        logits = forward_logits(params, config, ids, adapter=adapter)
        nxt = sample_next(logits[-1], gc.temperature, rng)
        ids.append(nxt)
        if nxt == vocab_eos:
            return ids, True
    return ids, False


def _reorder(visits: tuple[Visit, ...]) -> Optional[tuple[Visit, ...]]:
    """Sort by arrival; duplicate arrival slots cannot be ordered -> failure."""
    arrivals = [v.arrival for v in visits]
    if len(set(arrivals)) != len(arrivals):
        return None
    return tuple(sorted(visits, key=lambda v: v.arrival))


def generate_trajectory(
    params,
    config: ModelConfig,
    vocab: Vocabulary,
    gc: GenConfig,
    rng: np.random.Generator,
    grid: GridSpec,
    timespec: TimeSpec,
    adapter: LoraAdapter | None = None,
    constraints: ConstraintSet | None = None,
    durations: EmpiricalDurations | None = None,
) -> GenerationOutcome:
    """Sample, decode, reorder, and integrity-check until a trajectory passes.

    Controlled mode additionally requires every pinned constraint visit to
    survive reordering verbatim and the constraint set to be satisfied.
    """
    reasons: Counter = Counter()
    attempts = 0
    while attempts <= gc.max_retries:
        attempts += 1
        if constraints is not None:
            if durations is None:
                raise ValueError("controlled generation needs an empirical duration marginal")
            prompt, pinned = build_controlled_prompt(constraints, vocab, durations, rng)
        else:
            prompt, pinned = build_uncontrolled_prompt(vocab), []

        seq, saw_eos = generate_sequence(params, config, prompt, gc, rng, adapter=adapter)
        if not saw_eos:
            reasons["no_eos"] += 1
            continue
        try:
            decoded = decode_tokens(seq, vocab)
        except (ParseError, ValueError):
            reasons["parse_error"] += 1
            continue
        ordered = _reorder(decoded.visits)
        if ordered is None:
            reasons["duplicate_arrival"] += 1
            continue
        traj = Trajectory(visits=ordered)
        if validate_trajectory(traj, timespec, grid):
            reasons["integrity"] += 1
            continue
        if constraints is not None:
            if any(v not in traj.visits for v in pinned):
                reasons["constraint_visit_lost"] += 1
                continue
            ok, report = satisfies_all(traj, constraints)
            if not ok:
                reasons["constraint_unsatisfied"] += 1
                continue
            return GenerationOutcome(traj, attempts, tuple(report))
        return GenerationOutcome(traj, attempts)
    raise RetriesExhausted(reasons)


def forcible_insert(
    traj: Trajectory,
    cs: ConstraintSet,
    durations: EmpiricalDurations,
    rng: np.random.Generator,
    timespec: TimeSpec,
) -> Trajectory:
    """FI baseline: splice constraint visits in, mechanically repairing overlaps.

    Incumbents starting inside an inserted span are dropped; incumbents
    extending into one are truncated. Inserted visits are never modified
    except for clipping against each other and the day boundary.
    """
    if len(cs) == 0:
        return traj
    spd = timespec.slots_per_day
    inserted = None
    for _ in range(_COLLISION_RETRIES):
        candidate = materialize_constraint_visits(cs, durations, rng, spd)
        candidate.sort(key=lambda v: v.arrival)
        clipped = []
        ok = True
        for i, v in enumerate(candidate):
            end = v.arrival + v.duration
            if i + 1 < len(candidate):
                end = min(end, candidate[i + 1].arrival)
            if end <= v.arrival:
                ok = False
                break
            clipped.append(Visit(v.arrival, v.location, end - v.arrival))
        if ok:
            inserted = clipped
            break
    if inserted is None:
        raise Unsatisfiable("constraints mutually collide; no non-overlapping layout")

    spans = [(v.arrival, v.arrival + v.duration) for v in inserted]
    survivors = []
    for v in traj.visits:
        if any(a <= v.arrival < b for a, b in spans):
            continue
        end = v.arrival + v.duration
        for a, _b in spans:
            if v.arrival < a < end:
                end = a
        survivors.append(Visit(v.arrival, v.location, end - v.arrival))

    merged = tuple(sorted(survivors + inserted, key=lambda v: v.arrival))
    return Trajectory(visits=merged, meta=traj.meta)


def make_constraints(
    dataset: TrajectoryDataset,
    rng: np.random.Generator,
    n_min: int = 1,
    n_max: int = 3,
    window_halfwidth: int = 1,
    fraction: float = 1.0,
) -> list[ConstraintSet]:
    """Sample constraints from real trajectories: windows centered on real visits."""
    if len(dataset) == 0:
        raise ValueError("cannot make constraints from an empty dataset")
    spd = dataset.timespec.slots_per_day
    out = []
    for i, traj in enumerate(dataset.trajectories):
        if fraction < 1.0 and rng.random() >= fraction:
            continue
        k = min(int(rng.integers(n_min, n_max + 1)), len(traj))
        picks = sorted(rng.choice(len(traj), size=k, replace=False).tolist())
        constraints = tuple(
            Constraint(
                location=traj.visits[j].location,
                t_start=max(0, traj.visits[j].arrival - window_halfwidth),
                t_end=min(spd - 1, traj.visits[j].arrival + window_halfwidth),
                duration_hint=traj.visits[j].duration,
            )
            for j in picks
        )
        out.append(
            ConstraintSet(
                constraints=constraints,
                source_id=traj.meta if traj.meta is not None else str(i),
            )
        )
    return out

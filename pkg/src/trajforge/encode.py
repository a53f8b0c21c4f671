"""Trajectory <-> token-sequence codec and the visit-order permutation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GridSpec, TimeSpec, Trajectory, Visit

TEMPLATE_TOKENS = ("<BOS>", "<EOS>", "=>", "arrival", "time", "is", "location", "duration", ",")

TOKENS_PER_VISIT = 12  # arrival time is T_k , location is G_m , duration is D_n


class ParseError(ValueError):
    def __init__(self, position: int, expected: str, found: str):
        self.position = position
        self.expected = expected
        self.found = found
        super().__init__(f"at position {position}: expected {expected}, found {found}")


class MissingEOS(ParseError):
    def __init__(self, position: int):
        super().__init__(position, "<EOS>", "end of sequence")


class EmptySequence(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Dense token<->id map: 9 template tokens, then time, location, duration blocks."""

    slots: int
    n_cells: int

    @property
    def size(self) -> int:
        return len(TEMPLATE_TOKENS) + 2 * self.slots + self.n_cells

    # block offsets
    @property
    def time_base(self) -> int:
        return len(TEMPLATE_TOKENS)

    @property
    def loc_base(self) -> int:
        return self.time_base + self.slots

    @property
    def dur_base(self) -> int:
        return self.loc_base + self.n_cells

    bos = 0
    eos = 1
    sep = 2
    arrival_word = 3
    time_word = 4
    is_word = 5
    location_word = 6
    duration_word = 7
    comma = 8

    def time_id(self, slot: int) -> int:
        if not (0 <= slot < self.slots):
            raise ValueError(f"slot {slot} out of range")
        return self.time_base + slot

    def loc_id(self, cell: int) -> int:
        if not (1 <= cell <= self.n_cells):
            raise ValueError(f"cell {cell} out of range")
        return self.loc_base + cell - 1

    def dur_id(self, duration: int) -> int:
        if not (1 <= duration <= self.slots):
            raise ValueError(f"duration {duration} out of range")
        return self.dur_base + duration - 1

    def token_string(self, token_id: int) -> str:
        if token_id < 0 or token_id >= self.size:
            return f"<invalid:{token_id}>"
        if token_id < len(TEMPLATE_TOKENS):
            return TEMPLATE_TOKENS[token_id]
        if token_id < self.loc_base:
            return f"T_{token_id - self.time_base}"
        if token_id < self.dur_base:
            return f"G_{token_id - self.loc_base + 1}"
        return f"D_{token_id - self.dur_base + 1}"

    def dump(self, ids) -> str:
        """Whitespace-joined token strings, for debugging."""
        return " ".join(self.token_string(i) for i in ids)


def build_vocabulary(grid: GridSpec, ts: TimeSpec) -> Vocabulary:
    return Vocabulary(slots=ts.slots_per_day, n_cells=grid.n_cells)


def encode_visit(v: Visit, vocab: Vocabulary) -> list[int]:
    return [
        vocab.arrival_word,
        vocab.time_word,
        vocab.is_word,
        vocab.time_id(v.arrival),
        vocab.comma,
        vocab.location_word,
        vocab.is_word,
        vocab.loc_id(v.location),
        vocab.comma,
        vocab.duration_word,
        vocab.is_word,
        vocab.dur_id(v.duration),
    ]


def encode_trajectory(traj: Trajectory, vocab: Vocabulary) -> list[int]:
    """BOS visit (SEP visit)* EOS, visit order preserved."""
    ids = [vocab.bos]
    for i, v in enumerate(traj.visits):
        if i > 0:
            ids.append(vocab.sep)
        ids.extend(encode_visit(v, vocab))
    ids.append(vocab.eos)
    return ids


class _Parser:
    """Strict recursive-descent parse of `BOS visit (SEP visit)* EOS`."""

    def __init__(self, ids, vocab: Vocabulary):
        self.ids = list(ids)
        self.vocab = vocab
        self.pos = 0

    def _found(self) -> str:
        if self.pos >= len(self.ids):
            return "end of sequence"
        return self.vocab.token_string(self.ids[self.pos])

    def expect(self, token_id: int, what: str) -> None:
        if self.pos >= len(self.ids) or self.ids[self.pos] != token_id:
            raise ParseError(self.pos, what, self._found())
        self.pos += 1

    def value(self, base: int, count: int, what: str) -> int:
        if self.pos >= len(self.ids):
            raise ParseError(self.pos, what, "end of sequence")
        tid = self.ids[self.pos]
        if not (base <= tid < base + count):
            raise ParseError(self.pos, what, self._found())
        self.pos += 1
        return tid - base

    def visit(self) -> Visit:
        v = self.vocab
        self.expect(v.arrival_word, '"arrival"')
        self.expect(v.time_word, '"time"')
        self.expect(v.is_word, '"is"')
        arrival = self.value(v.time_base, v.slots, "time token")
        self.expect(v.comma, '","')
        self.expect(v.location_word, '"location"')
        self.expect(v.is_word, '"is"')
        location = self.value(v.loc_base, v.n_cells, "location token") + 1
        self.expect(v.comma, '","')
        self.expect(v.duration_word, '"duration"')
        self.expect(v.is_word, '"is"')
        duration = self.value(v.dur_base, v.slots, "duration token") + 1
        return Visit(arrival=arrival, location=location, duration=duration)

    def sequence(self) -> list[Visit]:
        if not self.ids:
            raise EmptySequence("empty token sequence")
        self.expect(self.vocab.bos, "<BOS>")
        visits = [self.visit()]
        while self.pos < len(self.ids) and self.ids[self.pos] == self.vocab.sep:
            self.pos += 1
            visits.append(self.visit())
        if self.pos >= len(self.ids):
            raise MissingEOS(self.pos)
        if self.ids[self.pos] != self.vocab.eos:
            raise ParseError(self.pos, "<EOS> or =>", self._found())
        self.pos += 1
        if self.pos != len(self.ids):
            raise ParseError(self.pos, "end of sequence", self._found())
        return visits


def decode_tokens(ids, vocab: Vocabulary) -> Trajectory:
    """Strict parse back to visits in textual order; no reordering or validity checks."""
    visits = _Parser(ids, vocab).sequence()
    return Trajectory(visits=tuple(visits))


def _visit_blocks(ids, vocab: Vocabulary) -> list[list[int]]:
    parser = _Parser(ids, vocab)
    if not parser.ids:
        raise EmptySequence("empty token sequence")
    parser.expect(vocab.bos, "<BOS>")
    blocks = []
    start = parser.pos
    parser.visit()
    blocks.append(parser.ids[start : parser.pos])
    while parser.pos < len(parser.ids) and parser.ids[parser.pos] == vocab.sep:
        parser.pos += 1
        start = parser.pos
        parser.visit()
        blocks.append(parser.ids[start : parser.pos])
    if parser.pos >= len(parser.ids):
        raise MissingEOS(parser.pos)
    parser.expect(vocab.eos, "<EOS>")
    if parser.pos != len(parser.ids):
        raise ParseError(parser.pos, "end of sequence", parser._found())
    return blocks


def permute_visits(ids, vocab: Vocabulary, rng: np.random.Generator) -> list[int]:
    """Reorder visit blocks uniformly at random; tokens within blocks untouched."""
    blocks = _visit_blocks(ids, vocab)
    order = rng.permutation(len(blocks))
    out = [vocab.bos]
    for i, k in enumerate(order):
        if i > 0:
            out.append(vocab.sep)
        out.extend(blocks[k])
    out.append(vocab.eos)
    return out

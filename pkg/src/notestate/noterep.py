"""Note-state representations and conversion from note events to state rolls.

A state roll is a ``(n_frames, n_pitches)`` grid of integer state indices.
Five representations are supported; all of them are derived from one
canonical five-state encoding by projecting away the states a
representation does not have.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

MIN_PITCH = 21
MAX_PITCH = 108
N_KEYS = 88

# Guards frame quantization against float error (e.g. 3 * 0.032 s).
_QUANT_EPS = 1e-9


class Representation(enum.Enum):
    BINARY = "binary"
    THREE = "three"
    FOUR_OFFSET = "four_offset"
    FOUR_REONSET = "four_reonset"
    FIVE = "five"

    @classmethod
    def parse(cls, name: str | Representation) -> Representation:
        if isinstance(name, Representation):
            return name
        key = name.strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"four_off": "four_offset", "four_re": "four_reonset",
                   "fouroffset": "four_offset", "fourreonset": "four_reonset"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join(r.value for r in cls)
            raise ValueError(f"unknown representation {name!r} (choose from {choices})") from None

    @property
    def states(self) -> tuple[str, ...]:
        return _STATES[self]

    @property
    def n_states(self) -> int:
        return len(_STATES[self])

    @property
    def code(self) -> int:
        return _CODES[self]

    @classmethod
    def from_code(cls, code: int) -> Representation:
        for rep, c in _CODES.items():
            if c == code:
                return rep
        raise ValueError(f"unknown representation code {code}")

    def index(self, state: str) -> int:
        return self.states.index(state)

    @property
    def sounding(self) -> np.ndarray:
        """Boolean mask over state indices marking states where the key sounds."""
        return np.array([s in SOUNDING_STATES for s in self.states])


_STATES = {
    Representation.BINARY: ("off", "on"),
    Representation.THREE: ("off", "onset", "sustain"),
    Representation.FOUR_OFFSET: ("off", "onset", "sustain", "offset"),
    Representation.FOUR_REONSET: ("off", "onset", "sustain", "re-onset"),
    Representation.FIVE: ("off", "onset", "sustain", "re-onset", "offset"),
}
_CODES = {rep: i for i, rep in enumerate(Representation)}

SOUNDING_STATES = frozenset({"on", "onset", "sustain", "re-onset"})
NOTE_START_STATES = frozenset({"on", "onset", "re-onset"})

# Five-state index -> index in each representation.
_PROJECTION = {
    Representation.FIVE: np.array([0, 1, 2, 3, 4], dtype=np.uint8),
    Representation.FOUR_REONSET: np.array([0, 1, 2, 3, 0], dtype=np.uint8),
    Representation.FOUR_OFFSET: np.array([0, 1, 2, 1, 3], dtype=np.uint8),
    Representation.THREE: np.array([0, 1, 2, 1, 0], dtype=np.uint8),
    Representation.BINARY: np.array([0, 1, 1, 1, 0], dtype=np.uint8),
}


def state_set(rep: Representation | str) -> list[str]:
    """Ordered state names of ``rep``; index 0 is always ``off``."""
    return list(Representation.parse(rep).states)


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset_time: float
    offset_time: float
    velocity: int = 64

    def __post_init__(self):
        if not MIN_PITCH <= self.pitch <= MAX_PITCH:
            raise ValueError(f"pitch {self.pitch} outside the 88-key range [{MIN_PITCH}, {MAX_PITCH}]")
        if self.onset_time < 0:
            raise ValueError(f"negative onset time {self.onset_time}")
        if not self.offset_time > self.onset_time:
            raise ValueError(f"offset {self.offset_time} must be after onset {self.onset_time}")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside [1, 127]")

    @property
    def key(self) -> int:
        return self.pitch - MIN_PITCH

    @property
    def duration(self) -> float:
        return self.offset_time - self.onset_time


@dataclass(frozen=True)
class FrameGrid:
    sample_rate: int = 16000
    hop: int = 512
    n_frames: int = 0

    @property
    def frame_duration(self) -> float:
        return self.hop / self.sample_rate

    def frame_of(self, time: float) -> int:
        return int(math.floor(time * self.sample_rate / self.hop + _QUANT_EPS))

    def time_of(self, frame: int) -> float:
        return frame * self.hop / self.sample_rate

    def with_frames(self, n_frames: int) -> FrameGrid:
        return FrameGrid(self.sample_rate, self.hop, n_frames)

    @classmethod
    def for_duration(cls, duration: float, sample_rate: int = 16000, hop: int = 512) -> FrameGrid:
        """Grid matching centered framing of ``duration`` seconds of audio."""
        n_samples = int(math.floor(duration * sample_rate + _QUANT_EPS))
        return cls(sample_rate, hop, 1 + n_samples // hop)


@dataclass(frozen=True)
class StateRoll:
    grid: FrameGrid
    rep: Representation
    states: np.ndarray = field(repr=False)
    min_pitch: int = MIN_PITCH

    def __post_init__(self):
        states = np.asarray(self.states)
        if states.ndim != 2:
            raise ValueError(f"states must be 2-D, got shape {states.shape}")
        if states.shape[0] != self.grid.n_frames:
            raise ValueError(f"roll has {states.shape[0]} frames but grid has {self.grid.n_frames}")
        if states.size and (states.min() < 0 or states.max() >= self.rep.n_states):
            raise ValueError(f"state index out of range for {self.rep.value}")
        if self.min_pitch < MIN_PITCH or self.min_pitch + states.shape[1] - 1 > MAX_PITCH:
            raise ValueError("roll pitch range exceeds the 88-key range")
        states = states.astype(np.uint8)
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @property
    def n_frames(self) -> int:
        return self.states.shape[0]

    @property
    def n_pitches(self) -> int:
        return self.states.shape[1]

    def sounding(self) -> np.ndarray:
        return self.rep.sounding[self.states]

    def count(self, state: str) -> int:
        if state not in self.rep.states:
            return 0
        return int(np.count_nonzero(self.states == self.rep.index(state)))

    def project(self, rep: Representation | str) -> StateRoll:
        """Map a five-state roll to a representation with fewer states."""
        rep = Representation.parse(rep)
        if self.rep is rep:
            return self
        if self.rep is not Representation.FIVE:
            raise ValueError("only five-state rolls can be projected")
        return StateRoll(self.grid, rep, _PROJECTION[rep][self.states], self.min_pitch)


def _quantize(notes, grid: FrameGrid, min_pitch: int, n_pitches: int):
    """Yield (column, onset_frame, offset_frame) per note, checking the range."""
    for note in notes:
        col = note.pitch - min_pitch
        if not 0 <= col < n_pitches:
            raise ValueError(f"pitch {note.pitch} outside roll range "
                             f"[{min_pitch}, {min_pitch + n_pitches - 1}]")
        a = grid.frame_of(note.onset_time)
        b = grid.frame_of(note.offset_time)
        if a >= grid.n_frames or b > grid.n_frames:
            raise ValueError(f"note {note} does not fit in a grid of {grid.n_frames} frames")
        yield col, a, b


def _encode_five(notes, grid: FrameGrid, min_pitch: int, n_pitches: int) -> np.ndarray:
    off, onset, sustain, reonset, offset = range(5)
    states = np.zeros((grid.n_frames, n_pitches), dtype=np.uint8)
    by_pitch: dict[int, list[tuple[int, int]]] = {}
    for col, a, b in _quantize(notes, grid, min_pitch, n_pitches):
        by_pitch.setdefault(col, []).append((a, b))

    for col, spans in by_pitch.items():
        spans.sort()
        column = states[:, col]
        prev_end = -1
        for i, (a, b) in enumerate(spans):
            # Truncate at the next onset on the same key.
            if i + 1 < len(spans):
                b = min(b, spans[i + 1][0])
            b = max(a, b)
            column[a] = reonset if prev_end >= a else onset
            if b > a:
                column[a + 1:b] = sustain
                if b < grid.n_frames:
                    column[b] = offset
                prev_end = b
            else:
                prev_end = -1
    return states


def encode_states(perf, rep: Representation | str, grid: FrameGrid,
                  min_pitch: int = MIN_PITCH, n_pitches: int = N_KEYS) -> StateRoll:
    """Label every frame and pitch of ``grid`` with a note state.

    ``perf`` is anything with a ``notes`` sequence of :class:`NoteEvent`
    (usually a pedal-elongated :class:`notestate.midi.Performance`) or a
    plain list of notes.
    """
    rep = Representation.parse(rep)
    notes = getattr(perf, "notes", perf)
    five = _encode_five(notes, grid, min_pitch, n_pitches)
    return StateRoll(grid, rep, _PROJECTION[rep][five], min_pitch)


def count_binary_merges(perf, grid: FrameGrid, min_pitch: int = MIN_PITCH,
                        n_pitches: int = N_KEYS) -> int:
    """Number of same-key note pairs a binary roll cannot tell apart.

    These are consecutive notes on one key where the second starts on the
    frame the first ends (or while it still sounds).
    """
    notes = getattr(perf, "notes", perf)
    by_pitch: dict[int, list[tuple[int, int]]] = {}
    for col, a, b in _quantize(notes, grid, min_pitch, n_pitches):
        by_pitch.setdefault(col, []).append((a, b))
    merges = 0
    for spans in by_pitch.values():
        spans.sort()
        for (a0, b0), (a1, _) in zip(spans, spans[1:]):
            end = min(b0, a1) if b0 > a0 else a0 + 1
            if a1 > a0 and end >= a1:
                merges += 1
    return merges

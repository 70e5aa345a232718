"""From state probabilities to state rolls, and from state rolls to notes."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .noterep import MIN_PITCH, FrameGrid, NoteEvent, Representation, StateRoll

DEFAULT_VELOCITY = 64


@dataclass(frozen=True)
class ProbTensor:
    grid: FrameGrid
    rep: Representation
    probs: np.ndarray = field(repr=False)
    min_pitch: int = MIN_PITCH

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 3 or probs.shape[2] != self.rep.n_states:
            raise ValueError(f"probs must be (T, P, {self.rep.n_states}), got {probs.shape}")
        if probs.shape[0] != self.grid.n_frames:
            raise ValueError(f"{probs.shape[0]} frames but grid has {self.grid.n_frames}")
        if probs.size and (probs.min() < 0 or probs.max() > 1 or
                           not np.allclose(probs.sum(axis=-1), 1.0, rtol=0, atol=1e-6)):
            raise ValueError("each (frame, pitch) row must be a probability distribution")
        object.__setattr__(self, "probs", probs)

    @property
    def n_pitches(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class BeamParams:
    trigger_threshold: float = 0.2
    lookahead: int = 5
    states_per_frame: int = 2

    def __post_init__(self):
        if not 0 < self.trigger_threshold <= 0.5:
            raise ValueError("trigger_threshold must be in (0, 0.5]")
        if self.lookahead < 1:
            raise ValueError("lookahead must be >= 1")
        if self.states_per_frame < 2:
            raise ValueError("states_per_frame must be >= 2")


class StepScorer(Protocol):
    """Incremental access to an autoregressive model for beam rescoring.

    ``step(state, t, prev)`` takes the recurrent state entering frame ``t``
    (batch size 1 or ``B``) and the previous frame's states ``prev`` of
    shape ``(B, n_pitches)``, and returns log-probabilities of shape
    ``(B, n_pitches, S)`` at frame ``t`` together with the state leaving
    frame ``t``.
    """

    def start(self): ...

    def step(self, state, t: int, prev: np.ndarray): ...


def greedy_decode(pt: ProbTensor) -> StateRoll:
    """Per-cell argmax; ties go to the lowest state index."""
    return StateRoll(pt.grid, pt.rep, np.argmax(pt.probs, axis=-1), pt.min_pitch)


def _top_states(row: np.ndarray, k: int) -> np.ndarray:
    # stable sort keeps the lower index first among equal probabilities
    return np.argsort(-row, kind="stable")[:k]


def beam_decode(pt: ProbTensor, bp: BeamParams, scorer: StepScorer) -> StateRoll:
    """Pitch-wise beam search around low-confidence cells.

    Frames are scanned in order and pitches ascending within a frame.
    Where the runner-up state of a cell is more probable than
    ``bp.trigger_threshold``, every path through the top states of that
    pitch over the next ``bp.lookahead`` frames is rescored by the model
    with all other pitches held at their current (greedy or already
    committed) states; the best path is committed and frozen. Cells no
    trigger reaches keep their greedy state.
    """
    roll = np.argmax(pt.probs, axis=-1).astype(np.int64)
    n_frames, n_pitches, _ = pt.probs.shape
    frozen = np.zeros(roll.shape, dtype=bool)
    k = bp.states_per_frame
    state = scorer.start()
    prev = np.zeros(n_pitches, dtype=np.int64)

    for t in range(n_frames):
        for p in range(n_pitches):
            if frozen[t, p]:
                continue
            top = _top_states(pt.probs[t, p], k)
            if pt.probs[t, p, top[1]] <= bp.trigger_threshold:
                continue
            end = min(t + bp.lookahead, n_frames)
            options = [_top_states(pt.probs[u, p], k) for u in range(t, end)]
            # first candidate is the all-top-1 path, so ties favour greedy
            paths = np.array(list(itertools.product(*options)), dtype=np.int64)
            scores = score_paths(scorer, state, roll, prev, t, p, paths)
            best = int(np.argmax(scores))
            roll[t:end, p] = paths[best]
            frozen[t:end, p] = True
        _, state = scorer.step(state, t, prev[None, :])
        prev = roll[t].copy()

    return StateRoll(pt.grid, pt.rep, roll, pt.min_pitch)


def score_paths(scorer: StepScorer, state, roll: np.ndarray, prev: np.ndarray,
                t: int, pitch: int, paths: np.ndarray) -> np.ndarray:
    """Summed log-probability of each candidate path for ``pitch`` from frame ``t``.

    ``state`` is the recurrent state entering frame ``t`` and ``prev`` the
    states at frame ``t - 1``; frames after ``t`` take the other pitches
    from ``roll``.
    """
    n_paths, length = paths.shape
    rows = np.arange(n_paths)
    scores = np.zeros(n_paths)
    prev_b = np.repeat(prev[None, :], n_paths, axis=0)
    for i in range(length):
        logp, state = scorer.step(state, t + i, prev_b)
        scores += logp[rows, pitch, paths[:, i]]
        prev_b = np.repeat(roll[t + i][None, :], n_paths, axis=0)
        prev_b[:, pitch] = paths[:, i]
    return scores


def states_to_notes(roll: StateRoll, velocity: int = DEFAULT_VELOCITY) -> list[NoteEvent]:
    """Read notes off a state roll.

    A note opens on ``onset``, ``on`` or ``re-onset`` and closes on the
    next ``offset`` or ``off``. A note-starting state while a note is open
    ends that note and starts a new one, except ``on`` which just
    continues (binary rolls cannot mark restrikes). ``sustain`` with no
    open note and a stray ``offset`` are ignored.
    """
    names = roll.rep.states
    starts = np.array([n in ("onset", "re-onset") for n in names])
    on = names.index("on") if "on" in names else -1
    ends = np.array([n in ("off", "offset") for n in names])
    grid = roll.grid
    notes = []
    for col in range(roll.n_pitches):
        column = roll.states[:, col]
        pitch = roll.min_pitch + col
        open_at = -1
        for t, s in enumerate(column):
            if ends[s]:
                if open_at >= 0:
                    notes.append((open_at, t, pitch))
                    open_at = -1
            elif starts[s] or (s == on and open_at < 0):
                if open_at >= 0:
                    notes.append((open_at, t, pitch))
                open_at = t
        if open_at >= 0:
            notes.append((open_at, len(column), pitch))
    notes.sort()
    return [NoteEvent(pitch, grid.time_of(a), grid.time_of(b), velocity) for a, b, pitch in notes]

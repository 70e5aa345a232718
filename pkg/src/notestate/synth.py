"""Synthetic performances and pseudo-acoustic features for desk-scale experiments.

Features are rendered straight into a mel-like bin space: each note adds a
harmonic template with an exponentially decaying envelope, and the attack
frame adds an extra pitch-specific burst plus a broadband transient. No
waveform is ever synthesized.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .features import FeatureMatrix
from .midi import Performance, PedalInterval, elongate_offsets
from .noterep import FrameGrid, NoteEvent


@dataclass(frozen=True)
class SynthConfig:
    n_pitches: int = 16
    min_pitch: int = 60
    duration: float = 8.0
    note_rate: float = 4.0          # mean note arrivals per second
    min_note: float = 0.1           # note length range before pedal, seconds
    max_note: float = 0.8
    max_polyphony: int = 4
    repeat_prob: float = 0.3        # chance a new note reuses a recently played key
    min_repeat_gap: float = 0.03    # silence between a key's release and its restrike
    pedal_prob: float = 0.5         # chance each pedal slot is actually pressed
    pedal_length: tuple[float, float] = (0.5, 2.0)
    pedal_gap: tuple[float, float] = (0.2, 1.0)
    n_bins: int = 48
    bins_per_semitone: int = 1
    n_harmonics: int = 4
    attack: float = 1.0             # extra template energy on the onset frame
    transient: float = 0.3          # broadband energy on the onset frame
    decay: float = 0.6              # envelope decay rate, 1/s
    noise: float = 0.1              # std of Gaussian noise added after log compression
    log_floor: float = 1e-3
    sample_rate: int = 16000
    hop: int = 512
    seed: int = 0

    def __post_init__(self):
        for name in ("note_rate", "min_note", "repeat_prob", "pedal_prob", "attack",
                     "transient", "decay", "noise", "min_repeat_gap"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_note < self.min_note:
            raise ValueError("max_note < min_note")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        top = self._fundamental_bin(self.n_pitches - 1) + self._harmonic_offset(self.n_harmonics)
        if top >= self.n_bins:
            raise ValueError(f"n_bins={self.n_bins} too small for the harmonic templates (need > {top})")

    def _fundamental_bin(self, col: int) -> int:
        return 2 + col * self.bins_per_semitone

    def _harmonic_offset(self, h: int) -> int:
        return int(round(12 * np.log2(h) * self.bins_per_semitone))

    @property
    def grid(self) -> FrameGrid:
        return FrameGrid.for_duration(self.duration, self.sample_rate, self.hop)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        d = dict(d)
        for k in ("pedal_length", "pedal_gap"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def harmonic_templates(cfg: SynthConfig) -> np.ndarray:
    """``(n_pitches, n_bins)`` spectral profile per key, harmonic h at 1/h."""
    tpl = np.zeros((cfg.n_pitches, cfg.n_bins))
    for col in range(cfg.n_pitches):
        for h in range(1, cfg.n_harmonics + 1):
            tpl[col, cfg._fundamental_bin(col) + cfg._harmonic_offset(h)] += 1.0 / h
    return tpl


def broadband(cfg: SynthConfig) -> np.ndarray:
    return np.linspace(1.0, 0.5, cfg.n_bins)


def gen_performance(cfg: SynthConfig, seed: int | None = None) -> Performance:
    """Random notes and pedal for one piece (un-elongated, as a MIDI file would hold)."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    end = cfg.duration - 0.05
    last_off = np.full(cfg.n_pitches, -np.inf)
    notes: list[NoteEvent] = []
    recent: list[int] = []

    t = 0.0
    while cfg.note_rate > 0:
        t += rng.exponential(1.0 / cfg.note_rate)
        if t + cfg.min_note > end:
            break
        if recent and rng.random() < cfg.repeat_prob:
            col = recent[int(rng.integers(len(recent)))]
        else:
            col = int(rng.integers(cfg.n_pitches))
        length = rng.uniform(cfg.min_note, cfg.max_note)
        velocity = int(rng.integers(40, 111))
        if t < last_off[col] + cfg.min_repeat_gap:
            continue
        sounding = sum(1 for n in notes if n.onset_time <= t < n.offset_time)
        if sounding >= cfg.max_polyphony:
            continue
        off = min(t + length, end)
        notes.append(NoteEvent(cfg.min_pitch + col, round(t, 6), round(off, 6), velocity))
        last_off[col] = off
        recent = (recent + [col])[-3:]

    pedal = []
    t = 0.0
    while True:
        press = t + rng.uniform(*cfg.pedal_gap)
        release = min(press + rng.uniform(*cfg.pedal_length), cfg.duration)
        if press >= cfg.duration - 0.05:
            break
        if rng.random() < cfg.pedal_prob:
            pedal.append(PedalInterval(round(press, 6), round(release, 6)))
        t = release
    return Performance(tuple(notes), tuple(pedal), cfg.duration)


def render_energy(perf: Performance, cfg: SynthConfig, grid: FrameGrid | None = None) -> np.ndarray:
    """Linear (pre-log) energy ``(n_frames, n_bins)``; a sum of per-note contributions."""
    grid = grid or cfg.grid
    tpl = harmonic_templates(cfg)
    bb = broadband(cfg)
    energy = np.zeros((grid.n_frames, cfg.n_bins))
    for note in perf.notes:
        col = note.pitch - cfg.min_pitch
        if not 0 <= col < cfg.n_pitches:
            raise ValueError(f"pitch {note.pitch} outside synth range")
        a = grid.frame_of(note.onset_time)
        b = max(grid.frame_of(note.offset_time), a + 1)
        b = min(b, grid.n_frames)
        if a >= grid.n_frames:
            continue
        amp = 0.5 + 0.5 * note.velocity / 127
        env = amp * np.exp(-cfg.decay * grid.frame_duration * np.arange(b - a))
        energy[a:b] += env[:, None] * tpl[col][None, :]
        energy[a] += amp * (cfg.attack * tpl[col] + cfg.transient * bb)
    return energy


def render_features(perf: Performance, cfg: SynthConfig, grid: FrameGrid | None = None,
                    seed: int | None = None) -> FeatureMatrix:
    """Log-compressed rendering of ``perf`` (pass the pedal-elongated performance)."""
    grid = grid or cfg.grid
    values = np.log(render_energy(perf, cfg, grid) + cfg.log_floor)
    if cfg.noise > 0:
        rng = np.random.default_rng((cfg.seed if seed is None else seed, 1))
        values = values + cfg.noise * rng.standard_normal(values.shape)
    return FeatureMatrix(grid, values)


@dataclass
class Piece:
    seed: int
    performance: Performance   # as played (pedal not applied to offsets)
    elongated: Performance     # label/render source
    features: FeatureMatrix = field(repr=False)


def make_piece(cfg: SynthConfig, seed: int) -> Piece:
    perf = gen_performance(cfg, seed)
    longer = elongate_offsets(perf)
    return Piece(seed, perf, longer, render_features(longer, cfg, seed=seed))


def make_dataset(cfg: SynthConfig, n_pieces: int, first_seed: int = 0) -> list[Piece]:
    return [make_piece(cfg, first_seed + i) for i in range(n_pieces)]


def template_detector(energy: np.ndarray, cfg: SynthConfig, threshold: float = 0.1) -> np.ndarray:
    """Frame-wise non-negative template fit; returns a boolean (T, n_pitches) activity map."""
    from scipy.optimize import nnls

    atoms = np.vstack([harmonic_templates(cfg), broadband(cfg)[None, :]]).T
    gains = np.array([nnls(atoms, frame)[0][:cfg.n_pitches] for frame in energy])
    return gains > threshold

"""Binary dump and CSV formats for rolls, features and probability tensors.

Every dump starts with a fixed little-endian header::

    offset  size  field
    0       4     magic: b"NSRL" (state roll, uint8 data),
                         b"NSFM" (feature matrix, float32 data),
                         b"NSPT" (probability tensor, float32 data)
    4       1     format version (1)
    5       1     representation code (0 binary, 1 three, 2 four_offset,
                  3 four_reonset, 4 five; 255 for feature matrices)
    6       2     reserved (0)
    8       4     T, number of frames
    12      4     P, number of pitches (feature bins for NSFM)
    16      4     S, number of states (0 for NSFM)
    20      4     lowest MIDI pitch of column 0 (0 for NSFM)
    24      4     sample rate in Hz
    28      4     hop in samples

followed by the row-major data: ``T*P`` bytes for rolls, ``T*P`` float32
for features and ``T*P*S`` float32 for probabilities.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .features import FeatureMatrix
from .noterep import FrameGrid, Representation, StateRoll

HEADER = struct.Struct("<4sBBHIIIIII")
VERSION = 1
ROLL_MAGIC = b"NSRL"
FEATURE_MAGIC = b"NSFM"
PROBS_MAGIC = b"NSPT"
NO_REP = 255


def _pack(magic, rep_code, shape3, min_pitch, grid: FrameGrid, data: np.ndarray) -> bytes:
    t, p, s = shape3
    head = HEADER.pack(magic, VERSION, rep_code, 0, t, p, s, min_pitch, grid.sample_rate, grid.hop)
    return head + np.ascontiguousarray(data).astype(data.dtype.newbyteorder("<"), copy=False).tobytes()


def _unpack(blob: bytes, magic: bytes):
    if len(blob) < HEADER.size:
        raise ValueError("file too short for header")
    m, version, rep_code, _, t, p, s, min_pitch, sr, hop = HEADER.unpack_from(blob)
    if m != magic:
        raise ValueError(f"bad magic {m!r}, expected {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported dump version {version}")
    return rep_code, t, p, s, min_pitch, FrameGrid(sr, hop, t), memoryview(blob)[HEADER.size:]


def dump_roll(roll: StateRoll) -> bytes:
    return _pack(ROLL_MAGIC, roll.rep.code, (roll.n_frames, roll.n_pitches, roll.rep.n_states),
                 roll.min_pitch, roll.grid, roll.states.astype(np.uint8))


def load_roll_bytes(blob: bytes) -> StateRoll:
    rep_code, t, p, s, min_pitch, grid, body = _unpack(blob, ROLL_MAGIC)
    rep = Representation.from_code(rep_code)
    if s != rep.n_states:
        raise ValueError("state count does not match representation")
    states = np.frombuffer(body, dtype=np.uint8, count=t * p).reshape(t, p)
    return StateRoll(grid, rep, states.copy(), min_pitch)


def dump_features(fm: FeatureMatrix) -> bytes:
    return _pack(FEATURE_MAGIC, NO_REP, (fm.n_frames, fm.n_bins, 0), 0, fm.grid,
                 fm.values.astype(np.float32))


def load_features_bytes(blob: bytes) -> FeatureMatrix:
    _, t, f, _, _, grid, body = _unpack(blob, FEATURE_MAGIC)
    values = np.frombuffer(body, dtype="<f4", count=t * f).reshape(t, f)
    return FeatureMatrix(grid, values.astype(np.float32))


def dump_probs(pt) -> bytes:
    t, p, s = pt.probs.shape
    return _pack(PROBS_MAGIC, pt.rep.code, (t, p, s), pt.min_pitch, pt.grid,
                 pt.probs.astype(np.float32))


def load_probs_bytes(blob: bytes):
    from .decode import ProbTensor

    rep_code, t, p, s, min_pitch, grid, body = _unpack(blob, PROBS_MAGIC)
    probs = np.frombuffer(body, dtype="<f4", count=t * p * s).reshape(t, p, s)
    return ProbTensor(grid, Representation.from_code(rep_code), probs.astype(np.float64), min_pitch)


def save_roll(path, roll: StateRoll) -> None:
    Path(path).write_bytes(dump_roll(roll))


def load_roll(path) -> StateRoll:
    return load_roll_bytes(Path(path).read_bytes())


def save_features(path, fm: FeatureMatrix) -> None:
    Path(path).write_bytes(dump_features(fm))


def load_features(path) -> FeatureMatrix:
    return load_features_bytes(Path(path).read_bytes())


def save_probs(path, pt) -> None:
    Path(path).write_bytes(dump_probs(pt))


def load_probs(path):
    return load_probs_bytes(Path(path).read_bytes())


def write_roll_csv(path, roll: StateRoll, include_off: bool = False) -> None:
    """Rows of ``frame,pitch,state_name``; ``off`` cells are skipped by default."""
    names = roll.rep.states
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "pitch", "state"])
        for t, col in zip(*np.nonzero(np.ones_like(roll.states) if include_off else roll.states)):
            w.writerow([int(t), roll.min_pitch + int(col), names[roll.states[t, col]]])


def read_roll_csv(path, rep, grid: FrameGrid, n_pitches: int, min_pitch: int) -> StateRoll:
    rep = Representation.parse(rep)
    states = np.zeros((grid.n_frames, n_pitches), dtype=np.uint8)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            states[int(row["frame"]), int(row["pitch"]) - min_pitch] = rep.index(row["state"])
    return StateRoll(grid, rep, states, min_pitch)


def write_notes_csv(path, notes) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["onset_s", "offset_s", "pitch"])
        for n in notes:
            w.writerow([f"{n.onset_time:.6f}", f"{n.offset_time:.6f}", n.pitch])

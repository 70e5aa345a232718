import struct

import numpy as np
import pytest

from notestate.decode import ProbTensor
from notestate.features import FeatureMatrix
from notestate.io import (dump_features, dump_probs, dump_roll, load_features, load_probs, load_roll,
                          load_roll_bytes, read_roll_csv, save_features, save_probs, save_roll,
                          write_notes_csv, write_roll_csv)
from notestate.noterep import FrameGrid, NoteEvent, Representation, StateRoll, encode_states

GRID = FrameGrid(16000, 512, 40)


def sample_roll(rep="five"):
    notes = [NoteEvent(60, 0.1, 0.5), NoteEvent(60, 0.5, 0.9), NoteEvent(72, 0.3, 1.2)]
    return encode_states(notes, rep, GRID)


@pytest.mark.parametrize("rep", list(Representation))
def test_roll_round_trip(tmp_path, rep):
    roll = sample_roll(rep)
    save_roll(tmp_path / "r.bin", roll)
    back = load_roll(tmp_path / "r.bin")
    assert back.rep is rep and back.grid == roll.grid and back.min_pitch == roll.min_pitch
    np.testing.assert_array_equal(back.states, roll.states)


def test_roll_header_layout():
    blob = dump_roll(sample_roll())
    magic, version, code, _, t, p, s, low, sr, hop = struct.unpack_from("<4sBBHIIIIII", blob)
    assert (magic, version, code, t, p, s, low, sr, hop) == (b"NSRL", 1, 4, 40, 88, 5, 21, 16000, 512)
    assert len(blob) == 32 + 40 * 88


def test_roll_bad_magic_and_short():
    blob = dump_roll(sample_roll())
    with pytest.raises(ValueError):
        load_roll_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        load_roll_bytes(blob[:10])


def test_features_round_trip(tmp_path):
    values = np.random.default_rng(0).standard_normal((40, 229)).astype(np.float32)
    fm = FeatureMatrix(GRID, values)
    save_features(tmp_path / "f.bin", fm)
    back = load_features(tmp_path / "f.bin")
    np.testing.assert_array_equal(back.values, values)
    assert back.grid == GRID
    assert dump_features(fm)[:4] == b"NSFM"


def test_probs_round_trip(tmp_path):
    raw = np.random.default_rng(0).random((40, 88, 5))
    pt = ProbTensor(GRID, Representation.FIVE, raw / raw.sum(-1, keepdims=True))
    save_probs(tmp_path / "p.bin", pt)
    back = load_probs(tmp_path / "p.bin")
    np.testing.assert_allclose(back.probs, pt.probs, atol=1e-7)
    assert back.rep is Representation.FIVE
    assert dump_probs(pt)[:4] == b"NSPT"


def test_roll_csv_round_trip(tmp_path):
    roll = sample_roll()
    write_roll_csv(tmp_path / "r.csv", roll)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "frame,pitch,state"
    assert "3,60,onset" in lines
    back = read_roll_csv(tmp_path / "r.csv", "five", GRID, 88, 21)
    np.testing.assert_array_equal(back.states, roll.states)


def test_notes_csv(tmp_path):
    write_notes_csv(tmp_path / "n.csv", [NoteEvent(60, 0.096, 0.5)])
    assert (tmp_path / "n.csv").read_text().splitlines() == ["onset_s,offset_s,pitch", "0.096000,0.500000,60"]


def test_stateroll_is_read_only():
    roll = sample_roll()
    with pytest.raises(ValueError):
        roll.states[0, 0] = 1
    assert isinstance(roll, StateRoll)

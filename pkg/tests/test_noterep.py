import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from notestate.decode import states_to_notes
from notestate.midi import Performance, PedalInterval, elongate_offsets
from notestate.noterep import (FrameGrid, NoteEvent, Representation, StateRoll, count_binary_merges,
                               encode_states, state_set)

GRID = FrameGrid(16000, 512, 64)
DUR = GRID.frame_duration


def at(frame):
    """Time in the middle of ``frame``, so quantization is unambiguous."""
    return (frame + 0.5) * DUR


def column(roll, pitch):
    return [roll.rep.states[s] for s in roll.states[:, pitch - roll.min_pitch]]


def test_state_sets():
    assert state_set("five") == ["off", "onset", "sustain", "re-onset", "offset"]
    assert state_set(Representation.BINARY) == ["off", "on"]
    assert state_set("three") == ["off", "onset", "sustain"]
    assert state_set("four_offset") == ["off", "onset", "sustain", "offset"]
    assert state_set("four-reonset") == ["off", "onset", "sustain", "re-onset"]
    for rep in Representation:
        assert rep.states[0] == "off"
        assert rep.states[1] in ("on", "onset")
    with pytest.raises(ValueError):
        Representation.parse("six")


def test_frame_grid_defaults():
    assert FrameGrid().frame_duration == 0.032
    assert FrameGrid().frame_of(3 * 0.032) == 3
    assert FrameGrid.for_duration(1.0).n_frames == 32


def test_single_note_five_and_binary():
    note = NoteEvent(60, 10 * DUR, 20 * DUR)
    five = column(encode_states([note], "five", GRID), 60)
    assert five[10] == "onset"
    assert five[11:20] == ["sustain"] * 9
    assert five[20] == "offset"
    assert set(five[:10] + five[21:]) == {"off"}

    binary = column(encode_states([note], "binary", GRID), 60)
    assert binary[10:20] == ["on"] * 10
    assert set(binary[:10] + binary[20:]) == {"off"}


def test_other_pitches_stay_off():
    roll = encode_states([NoteEvent(60, 10 * DUR, 20 * DUR)], "five", GRID)
    mask = np.ones(roll.n_pitches, bool)
    mask[60 - 21] = False
    assert not roll.states[:, mask].any()


def simulate_frames(perf, grid, pitch):
    """Frame-by-frame key/pedal simulation of one key, labelled with five states.

    Works on the raw (un-elongated) performance: a note keeps sounding after
    its key is released while the pedal is down, and stops when the pedal
    lifts or the key is struck again.
    """
    notes = [n for n in perf.notes if n.pitch == pitch]
    pedal = [(grid.frame_of(iv.press_time), grid.frame_of(iv.release_time)) for iv in perf.pedal]
    onsets = {grid.frame_of(n.onset_time): grid.frame_of(n.offset_time) for n in notes}
    labels = []
    active = False
    key_up_at = None
    for t in range(grid.n_frames):
        pedal_down = any(a <= t < b for a, b in pedal)
        if t in onsets:
            labels.append("re-onset" if active else "onset")
            active, key_up_at = True, onsets[t]
        elif active and t >= key_up_at and not pedal_down:
            labels.append("offset")
            active = False
        elif active:
            labels.append("sustain")
        else:
            labels.append("off")
    return labels


def test_reonset_under_pedal_matches_simulation():
    # first key released at frame 14, pedal holds it until frame 30,
    # the key is struck again at frame 18
    perf = Performance(
        (NoteEvent(60, at(10), at(14)), NoteEvent(60, at(18), at(24))),
        (PedalInterval(at(12), at(30)),),
        duration=at(40),
    )
    roll = encode_states(elongate_offsets(perf), "five", GRID)
    got = column(roll, 60)
    assert got[18] == "re-onset"
    assert got == simulate_frames(perf, GRID, 60)


@st.composite
def frame_aligned_performances(draw):
    """Single-key performances on frame midpoints, keyed by integer frames."""
    n = draw(st.integers(1, 5))
    t = draw(st.integers(0, 5))
    notes = []
    for _ in range(n):
        length = draw(st.integers(1, 6))
        notes.append(NoteEvent(64, at(t), at(t + length)))
        t += length + draw(st.integers(1, 6))
    pedal = []
    p = draw(st.integers(0, 6))
    while p < 55:
        length = draw(st.integers(1, 12))
        if draw(st.booleans()):
            pedal.append(PedalInterval(at(p), at(min(p + length, 60))))
        p += length + draw(st.integers(1, 6))
    return Performance(tuple(notes), tuple(pedal), duration=at(62))


@given(frame_aligned_performances())
@settings(max_examples=200, deadline=None)
def test_encoder_matches_frame_simulation(perf):
    roll = encode_states(elongate_offsets(perf), "five", GRID)
    assert column(roll, 64) == simulate_frames(perf, GRID, 64)


def test_projection_maps():
    perf = Performance(
        (NoteEvent(60, at(10), at(14)), NoteEvent(60, at(18), at(24))),
        (PedalInterval(at(12), at(30)),), duration=at(40))
    perf = elongate_offsets(perf)
    col = {rep: column(encode_states(perf, rep, GRID), 60) for rep in Representation}
    assert col[Representation.FIVE][18] == "re-onset"
    assert col[Representation.FOUR_REONSET][18] == "re-onset"
    assert col[Representation.THREE][18] == "onset"
    assert col[Representation.FOUR_OFFSET][18] == "onset"
    assert col[Representation.FOUR_OFFSET][30] == "offset"
    assert col[Representation.THREE][30] == "off"
    assert col[Representation.BINARY][10:30] == ["on"] * 20


def test_coinciding_offset_and_onset_becomes_reonset():
    notes = [NoteEvent(60, 10 * DUR, 20 * DUR), NoteEvent(60, 20 * DUR, 25 * DUR)]
    assert column(encode_states(notes, "five", GRID), 60)[20] == "re-onset"
    assert column(encode_states(notes, "three", GRID), 60)[20] == "onset"
    assert column(encode_states(notes, "four_offset", GRID), 60)[20] == "onset"


def test_zero_length_note_gets_onset_frame():
    note = NoteEvent(60, 10 * DUR + 0.001, 10 * DUR + 0.01)
    col = column(encode_states([note], "five", GRID), 60)
    assert col[10] == "onset"
    assert col[11] == "off"


def test_note_outside_grid_raises():
    with pytest.raises(ValueError):
        encode_states([NoteEvent(60, 70 * DUR, 71 * DUR)], "five", GRID)
    with pytest.raises(ValueError):
        encode_states([NoteEvent(60, 1.0, 1.5)], "five", GRID, min_pitch=70, n_pitches=8)


def test_note_to_end_of_grid():
    col = column(encode_states([NoteEvent(60, 60 * DUR, 64 * DUR)], "five", GRID), 60)
    assert col[60:] == ["onset", "sustain", "sustain", "sustain"]


def test_stateroll_validation():
    with pytest.raises(ValueError):
        StateRoll(GRID, Representation.THREE, np.full((64, 88), 3))
    with pytest.raises(ValueError):
        StateRoll(GRID, Representation.THREE, np.zeros((10, 88)))


@st.composite
def quantized_performances(draw, max_pitches=4):
    """Non-overlapping (after quantization) notes on a few keys, on exact frame times."""
    notes = []
    for pitch in draw(st.lists(st.integers(60, 60 + max_pitches - 1), min_size=1,
                               max_size=max_pitches, unique=True)):
        t = draw(st.integers(0, 4))
        for _ in range(draw(st.integers(1, 5))):
            length = draw(st.integers(1, 8))
            if t + length > 63:
                break
            notes.append(NoteEvent(pitch, t * DUR, (t + length) * DUR))
            t += length + draw(st.integers(0, 4))
    return Performance(tuple(notes), duration=64 * DUR)


def frames_of(notes):
    return sorted((n.pitch, GRID.frame_of(n.onset_time), GRID.frame_of(n.offset_time)) for n in notes)


@given(quantized_performances())
@settings(max_examples=200, deadline=None)
def test_round_trip_all_multi_state_reps(perf):
    for rep in ("five", "four_offset", "four_reonset", "three"):
        decoded = states_to_notes(encode_states(perf, rep, GRID))
        assert frames_of(decoded) == frames_of(perf.notes), rep


@given(quantized_performances())
@settings(max_examples=100, deadline=None)
def test_binary_round_trip_merges_adjacent_notes(perf):
    merged = []
    for pitch, a, b in frames_of(perf.notes):
        if merged and merged[-1][0] == pitch and merged[-1][2] == a:
            merged[-1] = (pitch, merged[-1][1], b)
        else:
            merged.append((pitch, a, b))
    decoded = states_to_notes(encode_states(perf, "binary", GRID))
    assert frames_of(decoded) == sorted(merged)
    assert count_binary_merges(perf, GRID) == len(perf.notes) - len(merged)


@given(quantized_performances())
@settings(max_examples=100, deadline=None)
def test_five_projects_to_three(perf):
    five = encode_states(perf, "five", GRID)
    mapped = np.array([0, 1, 2, 1, 0])[five.states]
    np.testing.assert_array_equal(mapped, encode_states(perf, "three", GRID).states)


# off, onset, sustain, re-onset, offset -> one letter each
GRAMMAR = re.compile(r"(?:O|(?:N|R)S*F?)*")


@given(frame_aligned_performances())
@settings(max_examples=200, deadline=None)
def test_columns_follow_state_grammar(perf):
    roll = encode_states(elongate_offsets(perf), "five", GRID)
    word = "".join("ONSRF"[s] for s in roll.states[:, 64 - 21])
    assert GRAMMAR.fullmatch(word), word
    # re-onset only right after a sounding state
    for i, ch in enumerate(word):
        if ch == "R":
            assert word[i - 1] in "NSR"
        if ch == "S":
            assert word[i - 1] in "NSR"
        if ch == "F":
            assert word[i - 1] in "NSR"

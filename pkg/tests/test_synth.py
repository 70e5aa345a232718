from dataclasses import replace

import numpy as np
import pytest

from notestate.metrics import PRF
from notestate.midi import Performance, elongate_offsets
from notestate.noterep import NoteEvent, encode_states
from notestate.synth import (SynthConfig, gen_performance, harmonic_templates, make_dataset, make_piece,
                             render_energy, render_features, template_detector)

CFG = SynthConfig()


def test_deterministic():
    assert gen_performance(CFG, 3) == gen_performance(CFG, 3)
    a, b = make_piece(CFG, 3), make_piece(CFG, 3)
    np.testing.assert_array_equal(a.features.values, b.features.values)
    assert gen_performance(CFG, 3) != gen_performance(CFG, 4)


def test_no_pedal_means_no_elongation():
    cfg = replace(CFG, pedal_prob=0.0)
    for seed in range(10):
        perf = gen_performance(cfg, seed)
        assert perf.pedal == ()
        assert elongate_offsets(perf) == perf


def test_dense_pedal_gives_reonsets():
    cfg = replace(CFG, pedal_prob=1.0, repeat_prob=0.8)
    for seed in range(100):
        perf = elongate_offsets(gen_performance(cfg, seed))
        roll = encode_states(perf, "five", cfg.grid, cfg.min_pitch, cfg.n_pitches)
        assert roll.count("re-onset") >= 1, seed


def test_generated_notes_are_valid():
    for seed in range(20):
        perf = gen_performance(CFG, seed)
        assert perf.notes
        for n in perf.notes:
            assert CFG.min_pitch <= n.pitch < CFG.min_pitch + CFG.n_pitches
            assert 0 <= n.onset_time < n.offset_time <= CFG.duration


def test_empty_piece_is_floor():
    cfg = replace(CFG, noise=0.0)
    fm = render_features(Performance((), (), cfg.duration), cfg)
    np.testing.assert_allclose(fm.values, np.float32(np.log(cfg.log_floor)))
    assert fm.n_frames == cfg.grid.n_frames


def test_onset_frame_is_loudest():
    note = NoteEvent(64, 0.5, 1.5)
    energy = render_energy(Performance((note,), (), CFG.duration), CFG)
    a, b = CFG.grid.frame_of(0.5), CFG.grid.frame_of(1.5)
    totals = energy.sum(axis=1)
    assert np.all(totals[a] > totals[a + 1:b])
    assert np.all(np.diff(totals[a + 1:b]) < 0)


def test_superposition():
    n1, n2 = NoteEvent(62, 0.2, 1.0), NoteEvent(67, 0.5, 1.4)
    def render(*notes):
        return render_energy(Performance(notes, (), CFG.duration), CFG)
    np.testing.assert_allclose(render(n1, n2), render(n1) + render(n2), rtol=1e-12)


def test_templates_place_fundamental():
    tpl = harmonic_templates(CFG)
    assert tpl.shape == (16, 48)
    assert np.all(tpl.argmax(axis=1) == np.arange(16) + 2)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        SynthConfig(noise=-1)
    with pytest.raises(ValueError):
        SynthConfig(n_bins=20)
    assert SynthConfig.from_dict(CFG.to_dict()) == CFG
    assert CFG.hash() == SynthConfig().hash() != replace(CFG, seed=1).hash()


def test_template_detector_learnability_floor():
    scores = []
    for piece in make_dataset(CFG, 5, 500):
        energy = render_energy(piece.elongated, CFG)
        est = template_detector(energy, CFG)
        ref = encode_states(piece.elongated, "binary", CFG.grid, CFG.min_pitch, CFG.n_pitches).sounding()
        hits = int(np.count_nonzero(est & ref))
        scores.append(PRF.from_counts(hits, int(ref.sum()), int(est.sum())).f1)
    assert np.mean(scores) > 0.9

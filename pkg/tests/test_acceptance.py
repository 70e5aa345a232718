"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Criteria 3 and 4 train four toy models on the synthetic corpus (about
five minutes each on one CPU core); deselect them with ``-m "not slow"``.
"""

import functools
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from notestate.decode import BeamParams, ProbTensor, beam_decode, greedy_decode, states_to_notes
from notestate.features import FeatureMatrix
from notestate.metrics import (average_scores, calibration_from_samples, candidate_pairs, evaluate,
                               frame_metrics, match_notes)
from notestate.midi import elongate_offsets
from notestate.model import ModelConfig, TrainConfig, build_model, infer, parameter_count, train
from notestate.noterep import FrameGrid, NoteEvent, Representation, count_binary_merges, encode_states
from notestate.synth import SynthConfig, gen_performance, make_dataset

from oracles import (MarkovScorer, brute_force_matching, confident_probs, exhaustive_beam, frame_oracle,
                     gradient_check, random_probs, random_rolls, randomize_norm_stats, single_trigger_case)

SYNTH = SynthConfig()
MULTI_STATE = ("five", "four_offset", "four_reonset", "three")


def criterion(number):
    def mark(fn):
        fn.criterion = number
        return fn
    return mark


# --- 1: round trip ---------------------------------------------------------------------

def quantized(notes, grid):
    return sorted((n.pitch, grid.frame_of(n.onset_time), grid.frame_of(n.offset_time)) for n in notes)


def merge_touching(frames):
    """Binary oracle: same-key notes where one ends on the frame the next starts become one."""
    merged = []
    for pitch, a, b in frames:
        if merged and merged[-1][0] == pitch and merged[-1][2] == a:
            merged[-1] = (pitch, merged[-1][1], b)
        else:
            merged.append((pitch, a, b))
    return merged


@criterion(1)
def test_round_trip_exactness(report):
    grid, lo, n = SYNTH.grid, SYNTH.min_pitch, SYNTH.n_pitches
    start = time.perf_counter()
    failures, binary_lost, unexplained = [], 0, 0
    for seed in range(1000):
        played = gen_performance(SYNTH, seed)
        perf = elongate_offsets(played)
        expect = quantized(perf.notes, grid)
        # precondition: non-overlapping and non-empty after quantization
        assert all(b > a for _, a, b in expect)
        assert all(x[0] != y[0] or y[1] >= x[2] for x, y in zip(expect, expect[1:]))
        for rep in MULTI_STATE:
            if quantized(states_to_notes(encode_states(perf, rep, grid, lo, n)), grid) != expect:
                failures.append((seed, rep))
        got = quantized(states_to_notes(encode_states(perf, "binary", grid, lo, n)), grid)
        if got != merge_touching(expect):
            failures.append((seed, "binary"))
        lost = len(expect) - len(got)
        binary_lost += lost
        assert count_binary_merges(perf, grid, lo, n) == lost
        # every merged pair touches only because the pedal lengthened the first note
        played_end = {(x.pitch, x.onset_time): grid.frame_of(x.offset_time) for x in played.notes}
        by_key = sorted(perf.notes, key=lambda x: (x.pitch, x.onset_time))
        for a, b in zip(by_key, by_key[1:]):
            if a.pitch == b.pitch and grid.frame_of(a.offset_time) == grid.frame_of(b.onset_time):
                unexplained += played_end[(a.pitch, a.onset_time)] >= grid.frame_of(b.onset_time)
    seconds = time.perf_counter() - start
    ok = not failures and unexplained == 0 and seconds < 30
    detail = (f"1000 performances, {len(failures)} mismatches, binary lost {binary_lost} notes "
              f"(all pedal-overlapped: {unexplained == 0}), {seconds:.1f}s")
    assert report(1, ok, detail), failures[:5]


# --- 2: gradients ----------------------------------------------------------------------

@criterion(2)
def test_gradient_correctness(report):
    start = time.perf_counter()
    errors, kinks = gradient_check(ModelConfig.toy(), seed=11, probes_per_group=50)
    seconds = time.perf_counter() - start
    worst = max(errors)
    ok = len(errors) >= 200 and worst < 1e-4 and seconds < 120
    assert report(2, ok, f"{len(errors)} probes ({kinks} kink redraws), max rel err {worst:.2e}, {seconds:.1f}s")


# --- 3 and 4: end-to-end learning --------------------------------------------------------

HYPER = TrainConfig(steps=9000, batch_size=16, segment_frames=64, lr=1e-3, log_every=0, seed=0)
# Pedal-heavy corpus: about 30% of notes are re-struck under the pedal, the share
# of notes the reported Binary model loses against Three (1 - 0.628 / 0.904).
PEDAL_HEAVY = replace(SYNTH, pedal_prob=1.0, repeat_prob=0.8)


@functools.lru_cache(maxsize=None)
def corpus():
    return make_dataset(PEDAL_HEAVY, 200, 0), make_dataset(PEDAL_HEAVY, 20, 10_000)


def labels(piece, rep):
    return encode_states(piece.elongated, rep, piece.features.grid, PEDAL_HEAVY.min_pitch, PEDAL_HEAVY.n_pitches)


@functools.lru_cache(maxsize=None)
def trained(rep, autoregressive=True):
    """Train a toy model and score it on the held-out pieces; returns (scores, seconds)."""
    torch.set_num_threads(1)
    train_set, test_set = corpus()
    start = time.perf_counter()
    cfg = ModelConfig.toy(rep, autoregressive=autoregressive)
    model = train([(p.features, labels(p, rep)) for p in train_set], cfg, HYPER).model
    per_piece = []
    for piece in test_set:
        est = greedy_decode(infer(piece.features, model))
        per_piece.append(evaluate(labels(piece, rep), est, list(piece.elongated.notes), states_to_notes(est)))
    return average_scores(per_piece), time.perf_counter() - start


@pytest.mark.slow
@criterion(3)
def test_end_to_end_learning(report):
    five, seconds = trained("five")
    binary, _ = trained("binary")
    three, _ = trained("three")
    gap = min(five.onset.f1, three.onset.f1) - binary.onset.f1
    test_set = corpus()[1]
    merged = sum(count_binary_merges(p.elongated, p.features.grid, PEDAL_HEAVY.min_pitch, PEDAL_HEAVY.n_pitches)
                 for p in test_set) / sum(len(p.elongated.notes) for p in test_set)
    ok = five.onset.f1 >= 0.90 and five.frame.f1 >= 0.85 and seconds < 600 and gap >= 0.05
    detail = (f"Five-AR onset F1 {five.onset.f1:.4f}, frame F1 {five.frame.f1:.4f} in {seconds:.0f}s; "
              f"onset F1 Binary {binary.onset.f1:.4f} / Three {three.onset.f1:.4f} (gap {gap:.4f}, "
              f"{merged:.0%} of test notes merge under Binary)")
    assert report(3, ok, detail)


@pytest.mark.slow
@criterion(4)
def test_autoregressive_effect(report):
    ar, _ = trained("five")
    flat, _ = trained("five", autoregressive=False)
    ok = ar.offset.f1 > flat.offset.f1
    detail = f"note-with-offset F1 AR {ar.offset.f1:.4f} vs non-AR {flat.offset.f1:.4f}"
    assert report(4, ok, detail)


# --- 5: decoder ---------------------------------------------------------------------------

def tensor(probs):
    return ProbTensor(FrameGrid(n_frames=probs.shape[0]), Representation.FIVE, probs, min_pitch=60)


@criterion(5)
def test_decoder_equivalences(report):
    rng = np.random.default_rng(5)
    confident_ok = half_ok = True
    for case in range(20):
        floor = rng.uniform(0.9, 1.0)
        pt = tensor(confident_probs(rng, 20, 8, 5, floor=floor))
        scorer = MarkovScorer(case, 20, 8, 5)
        # a runner-up is at most 0.1, below every threshold tried
        for thr in (0.1, 0.2, 0.3, 0.5):
            confident_ok &= np.array_equal(beam_decode(pt, BeamParams(thr, 3), scorer).states,
                                           greedy_decode(pt).states)
        pt = tensor(random_probs(rng, 20, 8, 5, sharp=0.3))
        half_ok &= np.array_equal(beam_decode(pt, BeamParams(0.5, 5), scorer).states, greedy_decode(pt).states)

    matches = 0
    for case in range(100):
        lookahead = case % 3 + 1
        probs, t0, p0 = single_trigger_case(rng, 8, 4, 5)
        pt = tensor(probs)
        scorer = MarkovScorer(500 + case, 8, 4, 5)
        got = beam_decode(pt, BeamParams(0.2, lookahead), scorer).states
        greedy = greedy_decode(pt).states.astype(np.int64)
        matches += np.array_equal(got, exhaustive_beam(probs, greedy, scorer, t0, p0, lookahead))
    ok = confident_ok and half_ok and matches == 100
    detail = (f"confident rows == greedy: {confident_ok}; threshold 0.5 == greedy: {half_ok}; "
              f"exhaustive oracle {matches}/100")
    assert report(5, ok, detail)


# --- 6: metrics ------------------------------------------------------------------------

def random_notes(rng, n):
    notes = []
    for _ in range(n):
        on = round(float(rng.integers(0, 30)) * 0.01, 2)
        notes.append(NoteEvent(int(rng.integers(60, 63)), on, round(on + float(rng.integers(1, 40)) * 0.01, 2)))
    return notes


@criterion(6)
def test_metrics_oracle(report):
    rng = np.random.default_rng(6)
    wrong = 0
    for case in range(10_000):
        ref = random_notes(rng, int(rng.integers(0, 9)))
        est = random_notes(rng, int(rng.integers(0, 9)))
        with_offset = bool(case % 2)
        ok = candidate_pairs(ref, est, with_offset=with_offset)
        pairs = match_notes(ref, est, with_offset=with_offset)
        valid = all(ok[i, j] for i, j in pairs) and len({j for _, j in pairs}) == len(pairs)
        wrong += not valid or len(pairs) != brute_force_matching(ok)
    frames_equal = 0
    for _ in range(20):
        ref, est = random_rolls(rng)
        m = frame_metrics(ref, est)
        frames_equal += (m.precision, m.recall, m.f1) == frame_oracle(ref, est)
    passed = wrong == 0 and frames_equal == 20
    assert report(6, passed, f"matching mismatches {wrong}/10000; frame metrics bitwise equal {frames_equal}/20")


# --- 7: calibration ----------------------------------------------------------------------

@criterion(7)
def test_calibration(report):
    rng = np.random.default_rng(7)
    conf = rng.uniform(0, 1, 100_000)
    calibrated = calibration_from_samples(conf, rng.uniform(0, 1, 100_000) < conf).ece
    over = calibration_from_samples(np.full(100_000, 0.9), np.arange(100_000) % 2 == 0).ece
    ok = calibrated <= 0.02 and abs(over - 0.4) <= 1e-9
    assert report(7, ok, f"calibrated ECE {calibrated:.4f}; overconfident ECE {over:.12f}")


# --- 8: parameters -------------------------------------------------------------------------

@criterion(8)
def test_parameter_bookkeeping(report):
    paper = parameter_count(ModelConfig.paper())
    small = parameter_count(ModelConfig.small())
    ok = abs(paper - 14.6e6) / 14.6e6 < 0.05 and abs(small - 6.1e6) / 6.1e6 < 0.10
    assert report(8, ok, f"Five-AR {paper:,} (vs 14.6M); small {small:,} (vs 6.1M)")


# --- 9: causality --------------------------------------------------------------------------

@criterion(9)
def test_causality(report):
    rng = np.random.default_rng(9)
    model = build_model(ModelConfig.toy(), seed=9)
    randomize_norm_stats(model, rng)
    model.eval()
    grid = FrameGrid(n_frames=40)
    values = rng.standard_normal((40, 48)).astype(np.float32)
    base = infer(FeatureMatrix(grid, values), model).probs
    changed = 0
    for _ in range(100):
        t = int(rng.integers(0, 36))
        moved = values.copy()
        moved[t + 4] += rng.normal(0, 3, 48).astype(np.float32)
        probs = infer(FeatureMatrix(grid, moved), model).probs
        changed += not np.array_equal(probs[:t + 1], base[:t + 1])
    assert report(9, changed == 0, f"{100 - changed}/100 perturbations of frame t+4 left frames <= t bitwise unchanged")

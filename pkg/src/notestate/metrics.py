"""Frame/note transcription metrics and confidence calibration."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .noterep import Representation, StateRoll

ONSET_TOLERANCE = 0.05
OFFSET_RATIO = 0.2
OFFSET_MIN_TOLERANCE = 0.05
# Distances are rounded before the tolerance test so that e.g. 1.05 - 1.0
# counts as exactly 50 ms.
N_DECIMALS = 4
N_CALIBRATION_BINS = 20


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> PRF:
        denom = precision + recall
        return cls(precision, recall, 2 * precision * recall / denom if denom > 0 else 0.0)

    @classmethod
    def from_counts(cls, n_hit: int, n_ref: int, n_est: int) -> PRF:
        precision = n_hit / n_est if n_est else 0.0
        recall = n_hit / n_ref if n_ref else 0.0
        return cls.from_pr(precision, recall)

    def as_dict(self) -> dict:
        return asdict(self)


def frame_metrics(ref: StateRoll, est: StateRoll) -> PRF:
    """Cell-wise precision/recall over sounding states (on, onset, sustain, re-onset)."""
    if ref.states.shape != est.states.shape or ref.min_pitch != est.min_pitch:
        raise ValueError(f"roll shapes differ: {ref.states.shape} vs {est.states.shape}")
    if (ref.grid.sample_rate, ref.grid.hop) != (est.grid.sample_rate, est.grid.hop):
        raise ValueError("rolls use different frame grids")
    r = ref.sounding()
    e = est.sounding()
    hits = int(np.count_nonzero(r & e))
    return PRF.from_counts(hits, int(np.count_nonzero(r)), int(np.count_nonzero(e)))


def _as_arrays(notes):
    on = np.array([n.onset_time for n in notes], dtype=np.float64)
    off = np.array([n.offset_time for n in notes], dtype=np.float64)
    pitch = np.array([n.pitch for n in notes], dtype=np.int64)
    return on, off, pitch


def candidate_pairs(ref, est, onset_tol: float = ONSET_TOLERANCE,
                    with_offset: bool = False, offset_ratio: float = OFFSET_RATIO,
                    offset_min_tol: float = OFFSET_MIN_TOLERANCE) -> np.ndarray:
    """Boolean ``(len(ref), len(est))`` matrix of feasible note pairs."""
    r_on, r_off, r_pitch = _as_arrays(ref)
    e_on, e_off, e_pitch = _as_arrays(est)
    ok = r_pitch[:, None] == e_pitch[None, :]
    ok &= np.round(np.abs(r_on[:, None] - e_on[None, :]), N_DECIMALS) <= onset_tol
    if with_offset:
        tol = np.maximum(offset_ratio * (r_off - r_on), offset_min_tol)
        ok &= np.round(np.abs(r_off[:, None] - e_off[None, :]), N_DECIMALS) <= tol[:, None]
    return ok


def match_notes(ref, est, **kwargs) -> list[tuple[int, int]]:
    """Maximum bipartite matching over feasible pairs, as (ref, est) index pairs."""
    ok = candidate_pairs(ref, est, **kwargs)
    if not ok.any():
        return []
    match = maximum_bipartite_matching(csr_matrix(ok.astype(np.int8)), perm_type="column")
    return [(i, int(j)) for i, j in enumerate(match) if j >= 0]


def note_onset_metrics(ref, est, tol: float = ONSET_TOLERANCE) -> PRF:
    return PRF.from_counts(len(match_notes(ref, est, onset_tol=tol)), len(ref), len(est))


def note_offset_metrics(ref, est, onset_tol: float = ONSET_TOLERANCE,
                        offset_ratio: float = OFFSET_RATIO,
                        offset_min_tol: float = OFFSET_MIN_TOLERANCE) -> PRF:
    """Note-with-offset score: onset within ``onset_tol`` and offset within
    ``max(offset_min_tol, offset_ratio * reference duration)``."""
    hits = match_notes(ref, est, onset_tol=onset_tol, with_offset=True,
                       offset_ratio=offset_ratio, offset_min_tol=offset_min_tol)
    return PRF.from_counts(len(hits), len(ref), len(est))


def piecewise_average(per_piece) -> PRF:
    """Unweighted mean of P, R and F over pieces (F is averaged, not recomputed)."""
    per_piece = list(per_piece)
    if not per_piece:
        raise ValueError("no pieces to average")
    n = len(per_piece)
    return PRF(sum(m.precision for m in per_piece) / n,
               sum(m.recall for m in per_piece) / n,
               sum(m.f1 for m in per_piece) / n)


@dataclass
class TranscriptionScores:
    frame: PRF
    onset: PRF
    offset: PRF

    def as_dict(self) -> dict:
        return {"frame": self.frame.as_dict(), "note_onset": self.onset.as_dict(),
                "note_with_offset": self.offset.as_dict()}


def evaluate(ref_roll: StateRoll, est_roll: StateRoll, ref_notes, est_notes) -> TranscriptionScores:
    return TranscriptionScores(frame_metrics(ref_roll, est_roll),
                               note_onset_metrics(ref_notes, est_notes),
                               note_offset_metrics(ref_notes, est_notes))


def average_scores(scores) -> TranscriptionScores:
    scores = list(scores)
    return TranscriptionScores(piecewise_average(s.frame for s in scores),
                               piecewise_average(s.onset for s in scores),
                               piecewise_average(s.offset for s in scores))


def format_table(rows: dict[str, TranscriptionScores]) -> str:
    """Plain-text table with frame / note onset / note-with-offset columns."""
    head1 = f"{'':<16}{'Frame':^27}{'Note Onset':^27}{'Note with Offset':^27}"
    head2 = f"{'model':<16}" + "".join(f"{'P':>9}{'R':>9}{'F1':>9}" for _ in range(3))
    lines = [head1, head2, "-" * len(head2)]
    for name, s in rows.items():
        cells = "".join(f"{m.precision:9.4f}{m.recall:9.4f}{m.f1:9.4f}"
                        for m in (s.frame, s.onset, s.offset))
        lines.append(f"{name:<16}{cells}")
    return "\n".join(lines)


def write_scores_json(path, rows: dict[str, TranscriptionScores]) -> None:
    Path(path).write_text(json.dumps({k: v.as_dict() for k, v in rows.items()}, indent=2))


def write_scores_csv(path, rows: dict[str, TranscriptionScores]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "metric", "precision", "recall", "f1"])
        for name, s in rows.items():
            for metric, m in s.as_dict().items():
                w.writerow([name, metric, m["precision"], m["recall"], m["f1"]])


# --------------------------------------------------------------------------
# calibration

@dataclass(frozen=True)
class CalibrationTable:
    edges: np.ndarray = field(repr=False)
    confidence: np.ndarray = field(repr=False)  # mean confidence per bin (nan if empty)
    accuracy: np.ndarray = field(repr=False)    # empirical accuracy per bin (nan if empty)
    count: np.ndarray = field(repr=False)
    ece: float = 0.0

    @property
    def total(self) -> int:
        return int(self.count.sum())


def calibration_from_samples(confidence, correct, n_bins: int = N_CALIBRATION_BINS) -> CalibrationTable:
    """Bin (confidence, correct) pairs into ``n_bins`` equal-width bins over [0, 1]."""
    conf = np.asarray(confidence, dtype=np.float64).ravel()
    corr = np.asarray(correct, dtype=np.float64).ravel()
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.floor(conf * n_bins).astype(np.int64), 0, n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    corr_sum = np.bincount(idx, weights=corr, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(count > 0, conf_sum / count, np.nan)
        acc = np.where(count > 0, corr_sum / count, np.nan)
    total = count.sum()
    used = count > 0
    ece = float(np.sum(count[used] / total * np.abs(acc[used] - mean_conf[used]))) if total else 0.0
    return CalibrationTable(edges, mean_conf, acc, count, ece)


def calibration(pt, ref: StateRoll, by_state: bool = False):
    """Confidence diagram of a probability tensor against reference states.

    Confidence is the top probability of each (frame, pitch) cell and a
    prediction is correct when its argmax equals the reference state. With
    ``by_state`` a dict keyed by predicted state name is returned instead.
    """
    if pt.probs.shape[:2] != ref.states.shape:
        raise ValueError("probability tensor and reference roll differ in shape")
    if pt.rep is not ref.rep:
        raise ValueError(f"representations differ: {pt.rep.value} vs {ref.rep.value}")
    conf = pt.probs.max(axis=-1)
    pred = pt.probs.argmax(axis=-1)
    correct = pred == ref.states
    if not by_state:
        return calibration_from_samples(conf, correct)
    return {name: calibration_from_samples(conf[pred == i], correct[pred == i])
            for i, name in enumerate(pt.rep.states)}


def write_calibration_csv(path, table: CalibrationTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "count", "mean_confidence", "accuracy"])
        for i in range(len(table.count)):
            w.writerow([f"{table.edges[i]:.2f}", f"{table.edges[i + 1]:.2f}", int(table.count[i]),
                        "" if np.isnan(table.confidence[i]) else f"{table.confidence[i]:.6f}",
                        "" if np.isnan(table.accuracy[i]) else f"{table.accuracy[i]:.6f}"])
        w.writerow(["ece", "", table.total, f"{table.ece:.6f}", ""])


def reliability_svg(table: CalibrationTable, title: str = "", size: int = 320) -> str:
    """Reliability diagram: accuracy bars per bin and a dashed diagonal."""
    m = 40
    w = size - 2 * m

    def x(v):
        return m + v * w

    def y(v):
        return size - m - v * w

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}" font-family="sans-serif" font-size="10">',
             f'<rect x="{m}" y="{m}" width="{w}" height="{w}" fill="none" stroke="#888"/>']
    bw = w / len(table.count)
    for i, acc in enumerate(table.accuracy):
        if table.count[i] == 0:
            continue
        parts.append(f'<rect x="{x(table.edges[i]):.2f}" y="{y(acc):.2f}" width="{bw:.2f}" '
                     f'height="{acc * w:.2f}" fill="#3b6fb6" stroke="#1d3c66" stroke-width="0.5"/>')
    parts.append(f'<line x1="{x(0)}" y1="{y(0)}" x2="{x(1)}" y2="{y(1)}" stroke="black" '
                 f'stroke-dasharray="4 3"/>')
    for v in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{x(v):.1f}" y="{size - m + 14}" text-anchor="middle">{v:g}</text>')
        parts.append(f'<text x="{m - 6}" y="{y(v) + 3:.1f}" text-anchor="end">{v:g}</text>')
    parts.append(f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle">confidence</text>')
    parts.append(f'<text x="12" y="{size / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 12 {size / 2})">accuracy</text>')
    label = f"{title} ECE={table.ece:.4f}".strip()
    parts.append(f'<text x="{size / 2}" y="{m - 12}" text-anchor="middle">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def sounding_roll(roll: StateRoll) -> StateRoll:
    """Binary on/off view of a roll (used when comparing rolls of different representations)."""
    return StateRoll(roll.grid, Representation.BINARY, roll.sounding().astype(np.uint8), roll.min_pitch)

"""Standard MIDI File reading/writing and sustain-pedal offset elongation."""

from __future__ import annotations

import bisect
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

from .noterep import MAX_PITCH, MIN_PITCH, NoteEvent

PEDAL_CC = 64
PEDAL_THRESHOLD = 64
DEFAULT_TICKS_PER_BEAT = 480
DEFAULT_TEMPO = 500000  # microseconds per quarter note (120 bpm)


class MidiParseError(ValueError):
    """Malformed SMF data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class PedalInterval:
    press_time: float
    release_time: float

    def __post_init__(self):
        if not self.release_time > self.press_time:
            raise ValueError(f"pedal release {self.release_time} must follow press {self.press_time}")

    def holds(self, time: float) -> bool:
        return self.press_time <= time < self.release_time


def _note_order(note: NoteEvent):
    return (note.onset_time, note.pitch, note.offset_time)


@dataclass(frozen=True)
class Performance:
    notes: tuple[NoteEvent, ...] = ()
    pedal: tuple[PedalInterval, ...] = ()
    duration: float = 0.0
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        notes = tuple(sorted(self.notes, key=_note_order))
        pedal = tuple(sorted(self.pedal, key=lambda iv: iv.press_time))
        for a, b in zip(pedal, pedal[1:]):
            if b.press_time < a.release_time:
                raise ValueError("pedal intervals overlap")
        end = max([n.offset_time for n in notes] + [iv.release_time for iv in pedal] + [0.0])
        object.__setattr__(self, "notes", notes)
        object.__setattr__(self, "pedal", pedal)
        if self.duration < end:
            object.__setattr__(self, "duration", end)


# --------------------------------------------------------------------------
# pedal elongation

def elongate_offsets(perf: Performance) -> Performance:
    """Extend note offsets held by the sustain pedal.

    A note released while the pedal is down (press <= offset < release)
    keeps sounding until the pedal is lifted or the same key is struck
    again, whichever comes first. Offsets only ever grow.
    """
    presses = [iv.press_time for iv in perf.pedal]
    next_onset: dict[int, list[float]] = {}
    for note in perf.notes:
        next_onset.setdefault(note.pitch, []).append(note.onset_time)

    out = []
    for note in perf.notes:
        offset = note.offset_time
        i = bisect.bisect_right(presses, offset) - 1
        if i >= 0 and perf.pedal[i].holds(offset):
            target = perf.pedal[i].release_time
            onsets = next_onset[note.pitch]
            j = bisect.bisect_right(onsets, note.onset_time)
            if j < len(onsets):
                target = min(target, onsets[j])
            offset = max(offset, min(target, perf.duration))
        out.append(note if offset == note.offset_time else replace(note, offset_time=offset))
    return Performance(tuple(out), perf.pedal, perf.duration, perf.warnings)


# --------------------------------------------------------------------------
# reading

class _Reader:
    def __init__(self, data: bytes, pos: int = 0, end: int | None = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def need(self, n: int):
        if self.pos + n > self.end:
            raise MidiParseError("unexpected end of data", self.pos)

    def u8(self) -> int:
        self.need(1)
        self.pos += 1
        return self.data[self.pos - 1]

    def take(self, n: int) -> bytes:
        self.need(n)
        self.pos += n
        return self.data[self.pos - n:self.pos]

    def varlen(self) -> int:
        value = 0
        for _ in range(4):
            b = self.u8()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MidiParseError("variable-length quantity longer than 4 bytes", self.pos)


def _read_track(data: bytes, start: int, end: int, track_idx: int):
    """Return a list of (tick, order, kind, payload) events."""
    r = _Reader(data, start, end)
    tick = 0
    status = None
    events = []
    seq = 0
    while r.pos < end:
        tick += r.varlen()
        b = r.u8()
        if b == 0xFF:
            mtype = r.u8()
            payload = r.take(r.varlen())
            if mtype == 0x51:
                if len(payload) != 3:
                    raise MidiParseError("bad tempo meta event", r.pos)
                events.append((tick, track_idx, seq, "tempo", int.from_bytes(payload, "big")))
            elif mtype == 0x2F:
                events.append((tick, track_idx, seq, "end", None))
                break
            seq += 1
            continue
        if b in (0xF0, 0xF7):
            r.take(r.varlen())
            status = None
            continue
        if b & 0x80:
            status = b
            first = r.u8()
        else:
            if status is None:
                raise MidiParseError("running status without a previous status byte", r.pos - 1)
            first = b
        kind = status & 0xF0
        channel = status & 0x0F
        if kind in (0xC0, 0xD0):
            seq += 1
            continue
        second = r.u8()
        if kind == 0x90 and second > 0:
            events.append((tick, track_idx, seq, "on", (channel, first, second)))
        elif kind in (0x80, 0x90):
            events.append((tick, track_idx, seq, "off", (channel, first)))
        elif kind == 0xB0 and first == PEDAL_CC:
            events.append((tick, track_idx, seq, "pedal", second))
        elif not 0x80 <= kind <= 0xE0:
            raise MidiParseError(f"invalid status byte 0x{status:02X}", r.pos - 2)
        seq += 1
    return events


def parse_midi(data: bytes) -> Performance:
    """Parse SMF format 0/1 bytes into a :class:`Performance`.

    Note-on with velocity 0 counts as note-off. A CC64 value >= 64 presses
    the pedal and < 64 lifts it. Notes left hanging at the end of the file
    are closed there and reported in ``Performance.warnings``.
    """
    if isinstance(data, (str, Path)):
        data = Path(data).read_bytes()
    r = _Reader(data)
    if r.take(4) != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    hlen = struct.unpack(">I", r.take(4))[0]
    if hlen < 6:
        raise MidiParseError("header chunk too short", 4)
    fmt, ntrks, division = struct.unpack(">HHH", r.take(6))
    r.pos = 8 + hlen
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        fps = 256 - (division >> 8)
        smpte_seconds_per_tick = 1.0 / (fps * (division & 0xFF))
    else:
        smpte_seconds_per_tick = None
        if division == 0:
            raise MidiParseError("zero ticks per quarter note", 12)

    events = []
    for idx in range(ntrks):
        chunk_start = r.pos
        if r.pos >= len(data):
            raise MidiParseError(f"expected {ntrks} tracks, found {idx}", r.pos)
        cid = r.take(4)
        clen = struct.unpack(">I", r.take(4))[0]
        if r.pos + clen > len(data):
            raise MidiParseError("chunk extends past end of file", chunk_start)
        if cid == b"MTrk":
            events.extend(_read_track(data, r.pos, r.pos + clen, idx))
        r.pos += clen
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    # tick -> seconds with the tempo map
    tempo = DEFAULT_TEMPO
    last_tick, last_sec = 0, 0.0

    def seconds(tick: int) -> float:
        if smpte_seconds_per_tick is not None:
            return tick * smpte_seconds_per_tick
        return last_sec + (tick - last_tick) * tempo / 1e6 / division

    open_notes: dict[int, tuple[float, int]] = {}
    notes: list[NoteEvent] = []
    pedal: list[PedalInterval] = []
    pedal_down: float | None = None
    warnings: list[str] = []
    end_time = 0.0

    def close(pitch: int, time: float):
        onset, vel = open_notes.pop(pitch)
        if not MIN_PITCH <= pitch <= MAX_PITCH:
            warnings.append(f"dropped note {pitch} outside the 88-key range")
        elif time > onset:
            notes.append(NoteEvent(pitch, onset, time, vel))

    for tick, _, _, kind, payload in events:
        now = seconds(tick)
        end_time = max(end_time, now)
        if kind == "tempo":
            last_sec, last_tick, tempo = now, tick, payload
        elif kind == "on":
            _, pitch, vel = payload
            if pitch in open_notes:
                close(pitch, now)
            open_notes[pitch] = (now, vel)
        elif kind == "off":
            _, pitch = payload
            if pitch in open_notes:
                close(pitch, now)
        elif kind == "pedal":
            if payload >= PEDAL_THRESHOLD and pedal_down is None:
                pedal_down = now
            elif payload < PEDAL_THRESHOLD and pedal_down is not None:
                if now > pedal_down:
                    pedal.append(PedalInterval(pedal_down, now))
                pedal_down = None

    for pitch in sorted(open_notes):
        warnings.append(f"note {pitch} left on; closed at end of track ({end_time:.3f}s)")
        close(pitch, end_time)
    if pedal_down is not None and end_time > pedal_down:
        pedal.append(PedalInterval(pedal_down, end_time))
    return Performance(tuple(notes), tuple(pedal), end_time, tuple(warnings))


def read_midi(path) -> Performance:
    return parse_midi(Path(path).read_bytes())


# --------------------------------------------------------------------------
# writing

def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def write_midi(notes, pedal=(), ticks_per_beat: int = DEFAULT_TICKS_PER_BEAT,
               tempo: int = DEFAULT_TEMPO) -> bytes:
    """Serialize notes (and optional pedal intervals) as a format-0 SMF."""
    ticks_per_second = ticks_per_beat * 1e6 / tempo

    def tick(t: float) -> int:
        return int(round(t * ticks_per_second))

    # order at equal ticks: note-off, pedal up, pedal down, note-on
    events = []
    for note in notes:
        if not MIN_PITCH <= note.pitch <= MAX_PITCH:
            raise ValueError(f"pitch {note.pitch} outside the 88-key range")
        on, off = tick(note.onset_time), tick(note.offset_time)
        off = max(off, on + 1)
        events.append((on, 3, bytes([0x90, note.pitch, note.velocity])))
        events.append((off, 0, bytes([0x80, note.pitch, 0])))
    for iv in pedal:
        events.append((tick(iv.press_time), 2, bytes([0xB0, PEDAL_CC, 127])))
        events.append((tick(iv.release_time), 1, bytes([0xB0, PEDAL_CC, 0])))
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    body = bytearray(b"\x00\xFF\x51\x03" + tempo.to_bytes(3, "big"))
    now = 0
    for t, _, msg in events:
        body += _varlen(t - now) + msg
        now = t
    body += b"\x00\xFF\x2F\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, ticks_per_beat)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def save_midi(path, notes, pedal=()) -> None:
    Path(path).write_bytes(write_midi(notes, pedal))

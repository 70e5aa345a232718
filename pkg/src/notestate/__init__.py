"""Multi-state autoregressive piano transcription toolkit."""

from .noterep import FrameGrid, NoteEvent, Representation, StateRoll, encode_states, state_set
from .midi import Performance, PedalInterval, elongate_offsets, parse_midi, write_midi
from .decode import BeamParams, ProbTensor, beam_decode, greedy_decode, states_to_notes

__all__ = [
    "BeamParams", "FrameGrid", "NoteEvent", "PedalInterval", "Performance", "ProbTensor",
    "Representation", "StateRoll", "beam_decode", "elongate_offsets", "encode_states",
    "greedy_decode", "parse_midi", "state_set", "states_to_notes", "write_midi",
]

__version__ = "0.1.0"

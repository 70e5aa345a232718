"""Command-line interface.

Subcommands: ``encode``, ``synth``, ``train``, ``infer``, ``decode``,
``eval`` and ``calib``. Every run logs its fully resolved configuration.
Defaults can be overlaid from a JSON or TOML file (``--config``) and from
``$NOTESTATE_CONFIG_DIR/<subcommand>.{toml,json}``; explicit flags win.

Exit codes: 0 success, 1 runtime failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("notestate")

CONFIG_DIR_ENV = "NOTESTATE_CONFIG_DIR"


class InputError(Exception):
    """Bad or missing input file (exit code 2)."""


def _load(fn, path, what="file"):
    try:
        return fn(path)
    except FileNotFoundError:
        raise InputError(f"{what} not found: {path}") from None
    except (OSError, ValueError) as err:
        raise InputError(f"cannot read {what} {path}: {err}") from None


def _read_config_file(path: Path) -> dict:
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:   # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def _overlay(command: str, explicit: str | None) -> dict:
    """Defaults from the config dir and from ``--config``, later ones winning.

    A file may hold flat keys or a table per subcommand.
    """
    paths = []
    env_dir = os.environ.get(CONFIG_DIR_ENV)
    if env_dir:
        for suffix in (".toml", ".json"):
            candidate = Path(env_dir) / f"{command}{suffix}"
            if candidate.exists():
                paths.append(candidate)
    if explicit:
        paths.append(Path(explicit))
    merged: dict = {}
    for path in paths:
        data = _load(_read_config_file, path, "config")
        section = data.get(command, data)
        merged.update({k.replace("-", "_"): v for k, v in section.items() if not isinstance(v, dict)})
    return merged


# --------------------------------------------------------------------------
# subcommands

def cmd_encode(args) -> int:
    from .io import save_roll, write_roll_csv
    from .midi import elongate_offsets, read_midi
    from .noterep import FrameGrid, Representation, count_binary_merges, encode_states

    perf = _load(read_midi, args.midi, "MIDI file")
    for warning in perf.warnings:
        log.warning("%s: %s", args.midi, warning)
    if not args.no_pedal:
        perf = elongate_offsets(perf)
    grid = FrameGrid.for_duration(perf.duration, args.sample_rate, args.hop)
    rep = Representation.parse(args.rep)
    roll = encode_states(perf, rep, grid)
    out = Path(args.out or Path(args.midi).with_suffix(f".{rep.value}.roll"))
    save_roll(out, roll)
    if args.csv:
        write_roll_csv(args.csv, roll)
    reonsets = encode_states(perf, "five", grid).count("re-onset")
    print(f"{out}: T={roll.n_frames} notes={len(perf.notes)} re-onsets={reonsets}")
    if rep is Representation.BINARY:
        merged = count_binary_merges(perf, grid)
        if merged:
            log.warning("binary encoding merges %d overlapped same-key note pair(s)", merged)
    return 0


def cmd_synth(args) -> int:
    from .io import save_features, save_roll
    from .midi import save_midi
    from .noterep import encode_states
    from .synth import SynthConfig, make_piece

    cfg = SynthConfig(n_pitches=args.n_pitches, duration=args.duration, noise=args.noise,
                      pedal_prob=args.pedal_prob, repeat_prob=args.repeat_prob, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pieces = []
    for i in range(args.n_pieces):
        seed = args.first_seed + i
        piece = make_piece(cfg, seed)
        stem = f"piece{seed:05d}"
        save_midi(out / f"{stem}.mid", piece.performance.notes, piece.performance.pedal)
        save_features(out / f"{stem}.feat", piece.features)
        roll = encode_states(piece.elongated, "five", cfg.grid, cfg.min_pitch, cfg.n_pitches)
        save_roll(out / f"{stem}.five.roll", roll)
        pieces.append({"seed": seed, "midi": f"{stem}.mid", "features": f"{stem}.feat",
                       "roll": f"{stem}.five.roll"})
    manifest = {"config": cfg.to_dict(), "config_hash": cfg.hash(), "pieces": pieces}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(pieces)} pieces to {out} (config {cfg.hash()})")
    return 0


def _read_manifest(path):
    from .io import load_features, load_roll

    manifest = _load(lambda p: json.loads(Path(p).read_text()), path, "manifest")
    root = Path(path).parent
    data = []
    for entry in manifest["pieces"]:
        fm = _load(load_features, root / entry["features"], "features")
        roll = _load(load_roll, root / entry["roll"], "roll")
        data.append((fm, roll))
    return manifest, data


def _model_config(args):
    from .model import PRESETS

    overrides = {}
    if args.rep:
        overrides["rep"] = args.rep
    if args.no_ar:
        overrides["autoregressive"] = False
    if args.lstm_layers:
        overrides["lstm_layers"] = args.lstm_layers
    return PRESETS[args.preset](**overrides)


def cmd_train(args) -> int:
    import torch

    from .model import TrainConfig, save_checkpoint, train, write_loss_csv

    torch.set_num_threads(max(1, args.threads))
    manifest, data = _read_manifest(args.manifest)
    cfg = _model_config(args)
    first_fm, first_roll = data[0]
    if (cfg.n_pitches, cfg.min_pitch, cfg.n_bins) != (first_roll.n_pitches, first_roll.min_pitch, first_fm.n_bins):
        synth_cfg = manifest.get("config", {})
        cfg = replace(cfg, n_pitches=data[0][1].n_pitches, min_pitch=data[0][1].min_pitch,
                      n_bins=data[0][0].n_bins)
        log.info("model sized to the data: %d pitches from %s, %d bins", cfg.n_pitches,
                 synth_cfg.get("min_pitch", cfg.min_pitch), cfg.n_bins)
    data = [(fm, roll.project(cfg.rep)) for fm, roll in data]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hyper = TrainConfig(steps=args.steps, batch_size=args.batch_size, segment_frames=args.segment_frames,
                        lr=args.lr, grad_clip=args.grad_clip, seed=args.seed, log_every=args.log_every,
                        checkpoint_every=args.checkpoint_every, checkpoint_dir=str(out / "checkpoints"))
    log.info("model config %s", json.dumps(cfg.to_dict()))
    result = train(data, cfg, hyper)
    save_checkpoint(out / "model.ckpt", result.model, {"steps": args.steps, "seed": args.seed,
                                                        "manifest": str(args.manifest)})
    write_loss_csv(out / "loss.csv", result.curve)
    print(f"trained {args.steps} steps, final loss {result.losses[-1]:.5f}; wrote {out / 'model.ckpt'}")
    return 0


def _load_model(path):
    from .model import load_checkpoint

    model, _ = _load(load_checkpoint, path, "checkpoint")
    return model


def cmd_infer(args) -> int:
    from .io import load_features, load_roll, save_probs

    model = _load_model(args.checkpoint)
    fm = _load(load_features, args.features, "features")
    roll = None
    if args.mode == "teacher":
        if not args.roll:
            raise InputError("--mode teacher needs --roll")
        roll = _load(load_roll, args.roll, "roll")
        roll = _compatible(roll, model.cfg.representation)
    from .model import infer

    pt = infer(fm, model, mode=args.mode, roll=roll)
    save_probs(args.out, pt)
    print(f"{args.out}: T={pt.probs.shape[0]} P={pt.probs.shape[1]} S={pt.probs.shape[2]}")
    return 0


def _compatible(roll, rep):
    """Project a five-state roll onto ``rep``; any other mismatch is an error."""
    if roll.rep is rep:
        return roll
    if roll.rep.value == "five":
        return roll.project(rep)
    raise InputError(f"roll uses {roll.rep.value} but the model predicts {rep.value}")


def cmd_decode(args) -> int:
    from .decode import BeamParams, beam_decode, greedy_decode, states_to_notes
    from .io import load_features, load_probs, save_roll, write_notes_csv
    from .midi import save_midi

    pt = _load(load_probs, args.probs, "probability tensor")
    if args.mode == "greedy":
        roll = greedy_decode(pt)
    else:
        bp = BeamParams(args.beam_threshold, args.lookahead)
        if bp.trigger_threshold >= 0.5:
            roll = greedy_decode(pt)    # the runner-up can never exceed 0.5
        else:
            if not (args.checkpoint and args.features):
                raise InputError("--mode beam needs --checkpoint and --features for rescoring")
            from .model import ModelScorer

            model = _load_model(args.checkpoint)
            if model.cfg.representation is not pt.rep:
                raise InputError(f"checkpoint predicts {model.cfg.rep} but probabilities are {pt.rep.value}")
            fm = _load(load_features, args.features, "features")
            roll = beam_decode(pt, bp, ModelScorer(model, fm))
    save_roll(args.out, roll)
    notes = states_to_notes(roll)
    if args.midi:
        save_midi(args.midi, notes)
    if args.notes_csv:
        write_notes_csv(args.notes_csv, notes)
    print(f"{args.out}: {len(notes)} notes")
    return 0


def _notes_or_roll(path):
    """Notes plus a roll (``None`` for MIDI input) for a MIDI file or a state-roll dump."""
    from .decode import states_to_notes
    from .io import load_roll
    from .midi import elongate_offsets, read_midi

    if Path(path).suffix.lower() in (".mid", ".midi"):
        perf = elongate_offsets(_load(read_midi, path, "MIDI file"))
        return list(perf.notes), perf.duration, None
    roll = _load(load_roll, path, "roll")
    return states_to_notes(roll), None, roll


def cmd_eval(args) -> int:
    from .metrics import evaluate, format_table, write_scores_csv, write_scores_json
    from .noterep import MIN_PITCH, N_KEYS, FrameGrid, encode_states

    ref_notes, ref_dur, ref_roll = _notes_or_roll(args.ref)
    est_notes, est_dur, est_roll = _notes_or_roll(args.est)
    like = ref_roll if ref_roll is not None else est_roll
    if like is None:
        grid = FrameGrid.for_duration(max(ref_dur, est_dur), args.sample_rate, args.hop)
        min_pitch, n_pitches = MIN_PITCH, N_KEYS
    else:
        grid, min_pitch, n_pitches = like.grid, like.min_pitch, like.n_pitches
    if ref_roll is None:
        ref_roll = encode_states(ref_notes, "five", grid, min_pitch, n_pitches)
    if est_roll is None:
        est_roll = encode_states(est_notes, "five", grid, min_pitch, n_pitches)
    if ref_roll.states.shape != est_roll.states.shape:
        raise InputError(f"rolls differ in shape: {ref_roll.states.shape} vs {est_roll.states.shape}")
    rows = {args.name: evaluate(ref_roll, est_roll, ref_notes, est_notes)}
    print(format_table(rows))
    if args.json:
        write_scores_json(args.json, rows)
    if args.csv:
        write_scores_csv(args.csv, rows)
    return 0


def cmd_calib(args) -> int:
    from .io import load_probs, load_roll
    from .metrics import calibration, reliability_svg, write_calibration_csv

    pt = _load(load_probs, args.probs, "probability tensor")
    ref = _compatible(_load(load_roll, args.ref, "roll"), pt.rep)
    table = calibration(pt, ref)
    write_calibration_csv(args.csv, table)
    Path(args.svg).write_text(reliability_svg(table, args.title))
    if args.by_state:
        for name, sub in calibration(pt, ref, by_state=True).items():
            stem = Path(args.csv)
            write_calibration_csv(stem.with_name(f"{stem.stem}.{name}{stem.suffix}"), sub)
    print(f"ECE={table.ece:.4f} over {table.total} cells")
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="notestate", description="Multi-state piano transcription toolkit.")
    parser.add_argument("--config", help="JSON or TOML file with default flag values")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging and full tracebacks")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = sub.choices

    def grid_flags(p):
        p.add_argument("--sample-rate", type=int, default=16000)
        p.add_argument("--hop", type=int, default=512)

    p = sub.add_parser("encode", help="MIDI file -> state roll")
    p.add_argument("midi")
    p.add_argument("--rep", default="five")
    p.add_argument("--out")
    p.add_argument("--csv", help="also write the roll as CSV")
    p.add_argument("--no-pedal", action="store_true", help="skip sustain-pedal elongation")
    grid_flags(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-pieces", type=int, default=10)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--n-pitches", type=int, default=16)
    p.add_argument("--duration", type=float, default=8.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--pedal-prob", type=float, default=0.5)
    p.add_argument("--repeat-prob", type=float, default=0.3, help="chance a note re-strikes a recent key")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a synth manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--preset", choices=["toy", "small", "paper"], default="toy")
    p.add_argument("--rep")
    p.add_argument("--no-ar", action="store_true", help="non-autoregressive ablation")
    p.add_argument("--lstm-layers", type=int)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--segment-frames", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="features -> state probabilities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["free", "teacher"], default="free")
    p.add_argument("--roll", help="reference roll for teacher-forced inference")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("decode", help="state probabilities -> state roll and notes")
    p.add_argument("--probs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["greedy", "beam"], default="greedy")
    p.add_argument("--beam-threshold", type=float, default=0.2)
    p.add_argument("--lookahead", type=int, default=5)
    p.add_argument("--checkpoint")
    p.add_argument("--features")
    p.add_argument("--midi", help="also write the decoded notes as MIDI")
    p.add_argument("--notes-csv")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score an estimate against a reference")
    p.add_argument("ref", help="MIDI file or state roll")
    p.add_argument("est", help="MIDI file or state roll")
    p.add_argument("--name", default="model")
    p.add_argument("--json")
    p.add_argument("--csv")
    grid_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("calib", help="confidence calibration of a probability tensor")
    p.add_argument("--probs", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--svg", required=True)
    p.add_argument("--title", default="")
    p.add_argument("--by-state", action="store_true")
    p.set_defaults(func=cmd_calib)
    return parser


def _resolve(parser, argv):
    """Parse ``argv`` with config-file values installed as defaults."""
    args = parser.parse_args(argv)
    overlay = _overlay(args.command, args.config)
    if not overlay:
        return args
    sub = parser.subcommands[args.command]
    top_keys = {a.dest for a in parser._actions}
    sub_keys = {a.dest for a in sub._actions}
    unknown = sorted(set(overlay) - top_keys - sub_keys - {"command", "config"})
    if unknown:
        raise InputError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    parser.set_defaults(**{k: v for k, v in overlay.items() if k in top_keys})
    sub.set_defaults(**{k: v for k, v in overlay.items() if k in sub_keys})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args = _resolve(parser, argv)
        logging.getLogger().setLevel(logging.DEBUG if args.verbose else logging.WARNING)
        log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
        resolved = {k: v for k, v in vars(args).items() if k != "func"}
        log.info("resolved config %s", json.dumps(resolved, sort_keys=True, default=str))
        np.random.seed(args.seed)
        return args.func(args)
    except InputError as err:
        log.error("%s", err)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as err:   # noqa: BLE001 - report, do not dump a traceback
        log.error("%s: %s", type(err).__name__, err)
        if logging.getLogger().isEnabledFor(logging.DEBUG):
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())

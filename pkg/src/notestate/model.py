"""Autoregressive multi-state CRNN.

A convolutional acoustic model turns a 7-frame window of features into a
latent vector per frame. A unidirectional LSTM stack reads that vector
together with a small learned embedding of every pitch's previous state and
feeds one softmax head per pitch. Training uses teacher forcing; inference
feeds back the argmax states.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .decode import ProbTensor
from .features import FeatureMatrix
from .noterep import MIN_PITCH, N_KEYS, FrameGrid, Representation, StateRoll

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    n_pitches: int = N_KEYS
    min_pitch: int = MIN_PITCH
    n_bins: int = 229
    rep: str = "five"
    conv_channels: tuple[int, int, int] = (48, 48, 96)
    fc_acoustic: int = 768
    lstm_width: int = 768
    lstm_layers: int = 2
    embed_dim: int = 2
    autoregressive: bool = True
    dropout: float = 0.25
    context: int = 7
    batch_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "rep", Representation.parse(self.rep).value)
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        widths = (self.n_pitches, self.n_bins, self.fc_acoustic, self.lstm_width,
                  self.lstm_layers, self.embed_dim, *self.conv_channels)
        if min(widths) < 1:
            raise ValueError("all widths must be >= 1")
        if len(self.conv_channels) != 3:
            raise ValueError("conv_channels needs three entries")
        if self.context < 1 or self.context % 2 == 0:
            raise ValueError("context (receptive field) must be odd")
        if self.n_bins < 4:
            raise ValueError("n_bins must be >= 4 (two 2x frequency poolings)")

    @property
    def representation(self) -> Representation:
        return Representation(self.rep)

    @property
    def n_states(self) -> int:
        return self.representation.n_states

    @property
    def time_kernels(self) -> tuple[int, int, int]:
        """Time extent of the three conv kernels; they add up to ``context``."""
        half = (self.context - 1) // 2
        parts = [half // 3 + (1 if i < half % 3 else 0) for i in range(3)]
        return tuple(2 * h + 1 for h in parts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        if "conv_channels" in d:
            d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)

    @classmethod
    def paper(cls, rep="five", **kw) -> ModelConfig:
        return cls(rep=rep, **kw)

    @classmethod
    def small(cls, rep="five", **kw) -> ModelConfig:
        return cls(rep=rep, lstm_width=256, **kw)

    @classmethod
    def toy(cls, rep="five", **kw) -> ModelConfig:
        base = dict(n_pitches=16, min_pitch=60, n_bins=48, conv_channels=(8, 8, 16),
                    fc_acoustic=64, lstm_width=64, lstm_layers=2, dropout=0.0)
        base.update(kw)
        return cls(rep=rep, **base)


PRESETS = {"paper": ModelConfig.paper, "small": ModelConfig.small, "toy": ModelConfig.toy}


class NoteStateModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.conv_channels
        k1, k2, k3 = cfg.time_kernels
        self.register_buffer("input_mean", torch.zeros(()))
        self.register_buffer("input_scale", torch.ones(()))

        def block(cin, cout, k):
            norm = [nn.BatchNorm2d(cout)] if cfg.batch_norm else []
            return [nn.Conv2d(cin, cout, (k, 3), padding=(0, 1)), *norm, nn.ReLU()]

        self.conv = nn.Sequential(
            *block(1, c1, k1), *block(c1, c2, k2),
            nn.MaxPool2d((1, 2)), nn.Dropout(cfg.dropout),
            *block(c2, c3, k3),
            nn.MaxPool2d((1, 2)), nn.Dropout(cfg.dropout),
        )
        self.fc = nn.Linear(c3 * (cfg.n_bins // 4), cfg.fc_acoustic)
        self.fc_drop = nn.Dropout(cfg.dropout)
        lstm_in = cfg.fc_acoustic
        if cfg.autoregressive:
            # one table shared by all pitches
            self.embed = nn.Embedding(cfg.n_states, cfg.embed_dim)
            lstm_in += cfg.embed_dim * cfg.n_pitches
        else:
            self.embed = None
        self.lstm = nn.LSTM(lstm_in, cfg.lstm_width, cfg.lstm_layers, batch_first=True)
        self.head = nn.Linear(cfg.lstm_width, cfg.n_pitches * cfg.n_states)

    # acoustic model -------------------------------------------------------

    def acoustic(self, x: torch.Tensor, pad: bool = True) -> torch.Tensor:
        """``(B, T, F)`` features -> ``(B, T', fc_acoustic)``.

        With ``pad`` the normalized input is zero-padded by ``context // 2``
        frames on both sides so ``T' == T``; otherwise ``T' = T - context + 1``.
        """
        x = (x - self.input_mean) / self.input_scale
        if pad:
            half = self.cfg.context // 2
            x = F.pad(x, (0, 0, half, half))
        h = self.conv(x.unsqueeze(1))                      # (B, C, T', F/4)
        h = h.permute(0, 2, 1, 3).flatten(2)               # (B, T', C*F/4)
        return self.fc_drop(F.relu(self.fc(h)))

    # autoregressive part ---------------------------------------------------

    def lstm_input(self, h_a: torch.Tensor, prev: torch.Tensor | None) -> torch.Tensor:
        if self.embed is None:
            return h_a
        emb = self.embed(prev).flatten(-2)                 # (..., P*E)
        return torch.cat([h_a, emb], dim=-1)

    def logits(self, h_l: torch.Tensor) -> torch.Tensor:
        out = self.head(h_l)
        return out.unflatten(-1, (self.cfg.n_pitches, self.cfg.n_states))

    def forward(self, x: torch.Tensor, roll: torch.Tensor | None = None) -> torch.Tensor:
        """Teacher-forced logits ``(B, T, P, S)``.

        ``roll`` holds the ground-truth states ``(B, T, P)``; frame ``t``
        sees the states of frame ``t - 1`` (all ``off`` before the start).
        """
        h_a = self.acoustic(x)
        prev = None
        if self.embed is not None:
            if roll is None:
                raise ValueError("autoregressive model needs the previous states")
            prev = torch.cat([torch.zeros_like(roll[:, :1]), roll[:, :-1]], dim=1)
        h_l, _ = self.lstm(self.lstm_input(h_a, prev))
        return self.logits(h_l)

    def step(self, h_a: torch.Tensor, prev: torch.Tensor | None, state=None):
        """One frame: ``h_a`` ``(B, fc)``, ``prev`` ``(B, P)`` -> logits ``(B, P, S)``, state."""
        inp = self.lstm_input(h_a, prev).unsqueeze(1)
        h_l, state = self.lstm(inp, state)
        return self.logits(h_l[:, 0]), state

    def initial_state(self, batch: int = 1):
        shape = (self.cfg.lstm_layers, batch, self.cfg.lstm_width)
        p = self.head.weight
        return (p.new_zeros(shape), p.new_zeros(shape))

    def set_normalization(self, mean: float, scale: float) -> None:
        self.input_mean.fill_(float(mean))
        self.input_scale.fill_(float(scale) if scale > 0 else 1.0)


def parameter_count(cfg: ModelConfig) -> int:
    model = NoteStateModel(cfg)
    return sum(p.numel() for p in model.parameters())


def build_model(cfg: ModelConfig, seed: int = 0) -> NoteStateModel:
    torch.manual_seed(seed)
    return NoteStateModel(cfg)


# --------------------------------------------------------------------------
# operations on numpy values

def _tensor(a, model: NoteStateModel) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=model.head.weight.dtype)


@torch.no_grad()
def acoustic_forward(x_window, model: NoteStateModel) -> np.ndarray:
    """Latent vector for the centre frame of a ``(context, n_bins)`` window."""
    x_window = np.asarray(x_window)
    expect = (model.cfg.context, model.cfg.n_bins)
    if x_window.shape != expect:
        raise ValueError(f"window shape {x_window.shape} != {expect}")
    model.eval()
    return model.acoustic(_tensor(x_window, model)[None], pad=False)[0, 0].numpy()


def _check_one_hot(prev_y: np.ndarray, n_pitches: int, n_states: int) -> np.ndarray:
    prev_y = np.asarray(prev_y)
    if prev_y.shape != (n_pitches, n_states):
        raise ValueError(f"previous outputs must be ({n_pitches}, {n_states}) one-hots")
    if not (np.all((prev_y == 0) | (prev_y == 1)) and np.all(prev_y.sum(axis=1) == 1)):
        raise ValueError("previous outputs are not valid one-hot rows")
    return prev_y.argmax(axis=1)


@dataclass
class RecurrentState:
    h: torch.Tensor
    c: torch.Tensor
    prev_y: np.ndarray  # (P, S) one-hots fed at the next step

    @classmethod
    def initial(cls, model: NoteStateModel) -> RecurrentState:
        h, c = model.initial_state(1)
        prev = np.zeros((model.cfg.n_pitches, model.cfg.n_states), dtype=np.int64)
        prev[:, 0] = 1
        return cls(h, c, prev)


@torch.no_grad()
def ar_step(h_a, prev_y, state: RecurrentState, model: NoteStateModel):
    """One autoregressive step. Returns ``(probs (P, S), new_state)``.

    ``prev_y`` are the one-hot states of the previous frame; the returned
    state carries the argmax of the new distribution as its ``prev_y``.
    """
    model.eval()
    idx = _check_one_hot(prev_y, model.cfg.n_pitches, model.cfg.n_states)
    h_a = _tensor(h_a, model)
    if h_a.shape != (model.cfg.fc_acoustic,):
        raise ValueError(f"acoustic vector must have {model.cfg.fc_acoustic} entries")
    prev = torch.as_tensor(idx)[None] if model.embed is not None else None
    logits, (h, c) = model.step(h_a[None], prev, (state.h, state.c))
    probs = torch.softmax(logits[0], dim=-1).numpy()
    nxt = np.zeros_like(state.prev_y)
    nxt[np.arange(len(nxt)), probs.argmax(axis=1)] = 1
    return probs, RecurrentState(h, c, nxt)


def loss(probs, targets, reduction: str = "sum") -> float:
    """Categorical cross entropy ``-sum log p[target]`` over frames and pitches.

    ``targets`` is a :class:`StateRoll` or an integer array matching
    ``probs.shape[:-1]``. Probabilities are clamped at 1e-12.
    """
    states = targets.states if isinstance(targets, StateRoll) else np.asarray(targets)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[:-1] != states.shape:
        raise ValueError(f"probs {probs.shape} do not match targets {states.shape}")
    picked = np.take_along_axis(probs, states[..., None].astype(np.int64), axis=-1)[..., 0]
    terms = -np.log(np.maximum(picked, LOG_CLAMP))
    if reduction == "sum":
        return float(terms.sum())
    if reduction == "mean":
        return float(terms.mean())
    raise ValueError(f"unknown reduction {reduction!r}")


def sequence_loss(model: NoteStateModel, x: torch.Tensor, roll: torch.Tensor,
                  mask: torch.Tensor | None = None, reduction: str = "sum") -> torch.Tensor:
    """Teacher-forced cross entropy of a batch; ``mask`` ``(B, T)`` marks valid frames."""
    logits = model(x, roll)
    logp = F.log_softmax(logits, dim=-1)
    terms = -logp.gather(-1, roll.unsqueeze(-1)).squeeze(-1)   # (B, T, P)
    if mask is not None:
        terms = terms * mask.unsqueeze(-1)
    total = terms.sum()
    if reduction == "sum":
        return total
    n = (mask.sum() if mask is not None else terms.shape[0] * terms.shape[1]) * terms.shape[2]
    return total / n


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    segment_frames: int = 312          # ~10 s at 32 ms per frame
    lr: float = 6e-4
    lr_decay: float = 0.02             # multiplicative drop applied every decay_every steps
    decay_every: int = 10000
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = None
    reduction: str = "mean"
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def lr_at(self, step: int) -> float:
        return self.lr * (1.0 - self.lr_decay) ** (step // self.decay_every)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: NoteStateModel
    curve: list[tuple[int, float, float]] = field(default_factory=list)  # (step, loss, lr)

    @property
    def losses(self) -> list[float]:
        return [c[1] for c in self.curve]


def _stack_dataset(dataset, cfg: ModelConfig):
    feats, rolls = [], []
    for fm, roll in dataset:
        values = fm.values if isinstance(fm, FeatureMatrix) else np.asarray(fm)
        states = roll.states if isinstance(roll, StateRoll) else np.asarray(roll)
        if isinstance(roll, StateRoll) and roll.rep is not cfg.representation:
            raise ValueError(f"roll uses {roll.rep.value}, model expects {cfg.rep}")
        if values.shape[1] != cfg.n_bins or states.shape[1] != cfg.n_pitches:
            raise ValueError("dataset dimensions do not match the model config")
        if values.shape[0] != states.shape[0]:
            raise ValueError("features and roll lengths differ")
        feats.append(np.asarray(values, dtype=np.float32))
        rolls.append(np.asarray(states, dtype=np.int64))
    return feats, rolls


def train(dataset, cfg: ModelConfig, hyper: TrainConfig = TrainConfig(),
          model: NoteStateModel | None = None) -> TrainResult:
    """Teacher-forced Adam training on random segments of ``(features, roll)`` pairs."""
    if not dataset:
        raise ValueError("empty dataset")
    feats, rolls = _stack_dataset(dataset, cfg)
    torch.manual_seed(hyper.seed)
    rng = np.random.default_rng(hyper.seed)
    if model is None:
        model = NoteStateModel(cfg)
        allv = np.concatenate([f.ravel() for f in feats])
        model.set_normalization(allv.mean(), allv.std())
    opt = torch.optim.Adam(model.parameters(), lr=hyper.lr, betas=hyper.betas, eps=hyper.eps)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=hyper.decay_every, gamma=1.0 - hyper.lr_decay)
    seg = hyper.segment_frames
    result = TrainResult(model)
    model.train()

    for step in range(hyper.steps):
        xb = np.zeros((hyper.batch_size, seg, cfg.n_bins), dtype=np.float32)
        yb = np.zeros((hyper.batch_size, seg, cfg.n_pitches), dtype=np.int64)
        mb = np.zeros((hyper.batch_size, seg), dtype=np.float32)
        for i in range(hyper.batch_size):
            k = int(rng.integers(len(feats)))
            n = len(feats[k])
            start = int(rng.integers(n - seg + 1)) if n > seg else 0
            stop = min(start + seg, n)
            xb[i, :stop - start] = feats[k][start:stop]
            yb[i, :stop - start] = rolls[k][start:stop]
            mb[i, :stop - start] = 1.0
        lr = opt.param_groups[0]["lr"]
        loss_t = sequence_loss(model, torch.from_numpy(xb), torch.from_numpy(yb),
                               torch.from_numpy(mb), hyper.reduction)
        value = loss_t.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step} (lr={lr:g})")
        opt.zero_grad()
        loss_t.backward()
        if hyper.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), hyper.grad_clip)
        opt.step()
        sched.step()
        result.curve.append((step, value, lr))
        if hyper.log_every and step % hyper.log_every == 0:
            log.info("step %d loss %.5f lr %.3g", step, value, lr)
        if hyper.checkpoint_every and hyper.checkpoint_dir and (step + 1) % hyper.checkpoint_every == 0:
            Path(hyper.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(hyper.checkpoint_dir) / f"step{step + 1:07d}.ckpt", model)
    model.eval()
    return result


def write_loss_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for step, value, lr in curve:
            w.writerow([step, f"{value:.6f}", f"{lr:.6g}"])


# --------------------------------------------------------------------------
# inference

def _features_tensor(features, model: NoteStateModel) -> tuple[torch.Tensor, FrameGrid]:
    if isinstance(features, FeatureMatrix):
        values, grid = features.values, features.grid
    else:
        values = np.asarray(features)
        grid = FrameGrid(n_frames=len(values))
    if values.ndim != 2 or values.shape[1] != model.cfg.n_bins:
        raise ValueError(f"features must be (T, {model.cfg.n_bins}), got {values.shape}")
    return _tensor(values, model)[None], grid


@torch.no_grad()
def infer(features, model: NoteStateModel, mode: str = "free", roll=None) -> ProbTensor:
    """State probabilities for a whole sequence.

    ``mode="free"`` feeds back the argmax states frame by frame;
    ``mode="teacher"`` conditions on the given ``roll`` instead.
    """
    model.eval()
    x, grid = _features_tensor(features, model)
    cfg = model.cfg
    if mode == "teacher":
        if roll is None:
            raise ValueError("teacher-forced inference needs a roll")
        states = roll.states if isinstance(roll, StateRoll) else np.asarray(roll)
        if states.shape != (x.shape[1], cfg.n_pitches):
            raise ValueError("roll shape does not match features")
        logits = model(x, torch.from_numpy(np.array(states, dtype=np.int64))[None])[0]
        probs = torch.softmax(logits, dim=-1).double().numpy()
    elif mode == "free":
        probs = _free_run(model, x)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ProbTensor(grid, cfg.representation, probs, cfg.min_pitch)


def _free_run(model: NoteStateModel, x: torch.Tensor) -> np.ndarray:
    cfg = model.cfg
    h_a = model.acoustic(x)[0]
    n = h_a.shape[0]
    out = np.zeros((n, cfg.n_pitches, cfg.n_states))
    prev = torch.zeros(1, cfg.n_pitches, dtype=torch.long)
    state = model.initial_state(1)
    for t in range(n):
        logits, state = model.step(h_a[t:t + 1], prev if model.embed is not None else None, state)
        p = torch.softmax(logits[0], dim=-1).double().numpy()
        out[t] = p
        prev = torch.as_tensor(p.argmax(axis=1))[None]
    return out


class ModelScorer:
    """Step-wise access to a trained model for beam rescoring (see ``decode.beam_decode``)."""

    def __init__(self, model: NoteStateModel, features):
        model.eval()
        self.model = model
        x, _ = _features_tensor(features, model)
        with torch.no_grad():
            self.h_a = model.acoustic(x)[0]

    def start(self):
        return self.model.initial_state(1)

    @torch.no_grad()
    def step(self, state, t: int, prev: np.ndarray):
        prev = torch.as_tensor(np.asarray(prev), dtype=torch.long)
        batch = prev.shape[0]
        h, c = state
        if h.shape[1] != batch:
            h, c = h.expand(-1, batch, -1).contiguous(), c.expand(-1, batch, -1).contiguous()
        h_a = self.h_a[t:t + 1].expand(batch, -1)
        logits, new_state = self.model.step(h_a, prev if self.model.embed is not None else None, (h, c))
        return F.log_softmax(logits, dim=-1).double().numpy(), new_state


# --------------------------------------------------------------------------
# checkpoints
#
# layout (little endian):
#   b"NSCK"  u16 version  u32 json_len  json (utf-8: {"config": ..., "meta": ...})
#   u32 n_tensors, then per tensor:
#   u16 name_len  name  u8 ndim  u32 dims[ndim]  float32 data

CKPT_MAGIC = b"NSCK"
CKPT_VERSION = 1


def save_checkpoint(path, model: NoteStateModel, meta: dict | None = None) -> None:
    header = json.dumps({"config": model.cfg.to_dict(), "meta": meta or {}}).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(header)), header]
    tensors = model.state_dict()
    parts.append(struct.pack("<I", len(tensors)))
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[NoteStateModel, dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    header = json.loads(blob[pos:pos + hlen])
    pos += hlen
    model = NoteStateModel(ModelConfig.from_dict(header["config"]))
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return model, header.get("meta", {})


def with_rep(cfg: ModelConfig, rep) -> ModelConfig:
    return replace(cfg, rep=Representation.parse(rep).value)

"""Motion-to-spectrogram translator: a 3-D conv encoder, a temporal head and a
2-D transposed-conv decoder, trained with plain MSE on healthy subjects.

Two temporal heads exist. ``Cnn`` applies a 1-D convolution whose kernel
spans the whole frame sequence. ``CnnAttention`` first runs single-head
self-attention (with a learned positional embedding and a residual path)
over the frame embeddings, then the same convolution. Everything else is
shared, including parameter names, so both variants start from identical
encoder and decoder weights for a given seed.
"""
from __future__ import annotations

import dataclasses
import math
import time
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import formats
from . import gradtape as gt
from .dsp import MelConfig, MelSpectrogram, Waveform, melspectrogram, sliding_crops
from .errors import BadCheckpoint, BadConfig, LabelLeakError, ShapeError
from .synthdata import HEALTHY, Manifest, MotionFieldSequence, load_subject

VARIANTS = ("Cnn", "CnnAttention")
LEAK = 0.1
CHECKPOINT_KIND = "translator"


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 8
    grid: Tuple[int, int, int] = (16, 16, 16)
    n_mels: int = 64
    n_time: int = 64
    enc_channels: Tuple[int, ...] = (8, 16, 32)
    dec_channels: Tuple[int, ...] = (64, 32, 16, 8)
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "enc_channels", tuple(int(c) for c in self.enc_channels))
        object.__setattr__(self, "dec_channels", tuple(int(c) for c in self.dec_channels))
        up = 2 ** len(self.dec_channels)
        if self.frames < 1 or len(self.grid) != 3 or min(self.grid) < 1:
            raise BadConfig(f"invalid motion shape: frames={self.frames}, grid={self.grid}")
        if self.n_mels % up or self.n_time % up:
            raise BadConfig(f"n_mels and n_time must be multiples of {up}")
        if self.dtype not in ("float32", "float64"):
            raise BadConfig(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def latent(self) -> int:
        return self.enc_channels[-1]

    @property
    def base(self) -> Tuple[int, int]:
        up = 2 ** len(self.dec_channels)
        return self.n_mels // up, self.n_time // up

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 4
    seed: int = 0
    crops: int = 10
    crop_len: int = 21_000
    variant: str = "Cnn"
    schedule: str = "constant"  # or "cosine": lr anneals to lr_min over the run
    lr_min: float = 0.0

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant" or self.epochs == 1:
            return self.lr
        frac = epoch / (self.epochs - 1)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))

    def validate(self):
        if self.epochs < 1:
            raise BadConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.crops < 1:
            raise BadConfig(f"crops must be >= 1, got {self.crops}")
        if self.batch_size < 1:
            raise BadConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise BadConfig(f"lr must be positive, got {self.lr}")
        if self.variant not in VARIANTS:
            raise BadConfig(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.schedule not in ("constant", "cosine"):
            raise BadConfig(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if not 0 <= self.lr_min <= self.lr:
            raise BadConfig(f"lr_min must be in [0, lr], got {self.lr_min}")
        return self


@dataclass
class TrainHistory:
    loss: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)


@dataclass
class TranslatorModel:
    variant: str
    cfg: ModelConfig
    seed: int
    params: Dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def norm(self) -> Optional[Tuple[float, float]]:
        n = self.meta.get("norm")
        return None if n is None else (float(n[0]), float(n[1]))


@dataclass
class Example:
    """One subject's training pair: a motion sequence and its crop targets."""
    subject_id: str
    label: str
    motion: np.ndarray  # (T, X, Y, Z, 3)
    targets: List[MelSpectrogram]
    audio: Optional[Waveform] = None


# -- construction -----------------------------------------------------------

def param_shapes(variant: str, cfg: ModelConfig) -> Dict[str, Tuple[Tuple[int, ...], int]]:
    """Name -> (shape, fan_in), in a fixed order."""
    if variant not in VARIANTS:
        raise BadConfig(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    shapes = {}
    c_in = 3
    for i, c in enumerate(cfg.enc_channels):
        fan = c_in * 27
        shapes[f"enc{i}.w"] = ((c, c_in, 3, 3, 3), fan)
        shapes[f"enc{i}.b"] = ((c,), fan)
        c_in = c
    d, t = cfg.latent, cfg.frames
    if variant == "CnnAttention":
        shapes["attn.pos"] = ((t, d), d)
        for k in ("q", "k", "v"):
            shapes[f"attn.w{k}"] = ((d, d), d)
    shapes["temporal.w"] = ((t * d, d), t * d)
    shapes["temporal.b"] = ((d,), t * d)
    bh, bw = cfg.base
    c0 = cfg.dec_channels[0]
    shapes["dec.dense.w"] = ((d, c0 * bh * bw), d)
    shapes["dec.dense.b"] = ((c0 * bh * bw,), d)
    chans = list(cfg.dec_channels) + [1]
    for i in range(len(cfg.dec_channels)):
        fan = chans[i] * 16
        shapes[f"dec{i}.w"] = ((chans[i], chans[i + 1], 4, 4), fan)
        shapes[f"dec{i}.b"] = ((chans[i + 1],), fan)
    return shapes


def init_model(variant: str = "Cnn", cfg: ModelConfig = ModelConfig(), seed: int = 0) -> TranslatorModel:
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) weights and biases.

    Every tensor draws from its own stream keyed by (seed, name), so the
    variants share encoder, temporal-conv and decoder weights exactly.
    """
    dtype = np.dtype(cfg.dtype)
    params = {}
    for name, (shape, fan) in param_shapes(variant, cfg).items():
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
        bound = math.sqrt(1.0 / fan)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return TranslatorModel(variant, cfg, int(seed), params, {})


# -- forward ----------------------------------------------------------------

def _check_motion(cfg: ModelConfig, frames: np.ndarray):
    want = (cfg.frames, *cfg.grid, 3)
    if tuple(frames.shape[-5:]) != want:
        raise ShapeError(f"motion shape {tuple(frames.shape)} does not match model input {want}")


def _volumes(cfg: ModelConfig, motion: np.ndarray) -> np.ndarray:
    # channels-leading (3, B*T, X, Y, Z), the layout conv3d works in
    B, T = motion.shape[:2]
    x = motion.reshape(B * T, *motion.shape[2:]).transpose(4, 0, 1, 2, 3)
    return np.ascontiguousarray(x, dtype=cfg.dtype)


def input_patches(model: TranslatorModel, motion: np.ndarray) -> np.ndarray:
    """First-layer patch matrix for a motion batch; reusable across steps."""
    _check_motion(model.cfg, motion)
    return gt.im2col3d(_volumes(model.cfg, motion), 3, stride=2, pad=1)


def forward(model: TranslatorModel, params: Dict[str, gt.Tensor], motion: np.ndarray,
            patches: Optional[np.ndarray] = None) -> gt.Tensor:
    """Batch of motion sequences (B, T, X, Y, Z, 3) -> spectrograms (B, 1, n_mels, n_time)."""
    cfg = model.cfg
    _check_motion(cfg, motion)
    B, T = motion.shape[:2]
    h = gt.Tensor(_volumes(cfg, motion))
    for i in range(len(cfg.enc_channels)):
        h = gt.conv3d(h, params[f"enc{i}.w"], params[f"enc{i}.b"], stride=2, pad=1,
                      cols=patches if i == 0 else None)
        h = gt.leaky_relu(h, LEAK)
    d = cfg.latent
    e = gt.transpose(gt.mean(h, axis=(2, 3, 4)))  # (B*T, d)
    if model.variant == "CnnAttention":
        e = gt.reshape(e, (B, T, d))
        e = gt.add(e, _tile_pos(params["attn.pos"], B))
        flat = gt.reshape(e, (B * T, d))
        q = gt.reshape(gt.matmul(flat, params["attn.wq"]), (B, T, d))
        k = gt.reshape(gt.matmul(flat, params["attn.wk"]), (B, T, d))
        v = gt.reshape(gt.matmul(flat, params["attn.wv"]), (B, T, d))
        scores = gt.mul(gt.matmul(q, gt.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
        e = gt.add(e, gt.matmul(gt.softmax(scores, axis=-1), v))
    z = gt.reshape(e, (B, T * d))
    z = gt.leaky_relu(gt.add(gt.matmul(z, params["temporal.w"]), params["temporal.b"]), LEAK)
    bh, bw = cfg.base
    y = gt.leaky_relu(gt.add(gt.matmul(z, params["dec.dense.w"]), params["dec.dense.b"]), LEAK)
    y = gt.reshape(y, (B, cfg.dec_channels[0], bh, bw))
    last = len(cfg.dec_channels) - 1
    for i in range(last + 1):
        y = gt.conv2d_transpose(y, params[f"dec{i}.w"], params[f"dec{i}.b"], stride=2, pad=1)
        y = gt.sigmoid(y) if i == last else gt.leaky_relu(y, LEAK)
    return y


def _tile_pos(pos: gt.Tensor, B: int) -> gt.Tensor:
    # (T, d) -> (B, T, d) through a matmul with a ones column, keeping the op set small
    T, d = pos.shape
    ones = gt.Tensor(np.ones((B, 1), dtype=pos.dtype))
    return gt.reshape(gt.matmul(ones, gt.reshape(pos, (1, T * d))), (B, T, d))


def _const_params(model: TranslatorModel) -> Dict[str, gt.Tensor]:
    return {k: gt.Tensor(v) for k, v in model.params.items()}


def predict(model: TranslatorModel, motion) -> MelSpectrogram:
    """Deterministic forward pass; values in [0, 1], carrying the training norm."""
    frames = motion.frames if isinstance(motion, MotionFieldSequence) else np.asarray(motion)
    if frames.ndim != 5:
        raise ShapeError(f"expected one motion sequence (T, X, Y, Z, 3), got {frames.shape}")
    out = forward(model, _const_params(model), frames[None])
    return MelSpectrogram(out.data[0, 0].astype(np.float64), model.norm)


def loss_and_grads(model: TranslatorModel, motion: np.ndarray, target: np.ndarray,
                   patches: Optional[np.ndarray] = None):
    """MSE of one batch and its gradient for every parameter."""
    params = {k: gt.Tensor(v, requires_grad=True, name=k) for k, v in model.params.items()}
    with gt.Tape() as tape:
        pred = forward(model, params, motion, patches)
        loss = gt.mse(pred, np.asarray(target, dtype=model.cfg.dtype).reshape(pred.shape))
    grads = gt.backward(tape, loss)
    return loss.item(), {k: grads[t] for k, t in params.items() if t in grads}


# -- data -------------------------------------------------------------------

def prepare_examples(manifest: Manifest, crops: int = 10, crop_len: int = 21_000,
                     mel: MelConfig = MelConfig(), entries=None) -> List[Example]:
    out = []
    for e in (manifest.entries if entries is None else entries):
        motion, audio = load_subject(manifest, e)
        targets = [melspectrogram(c, mel) for c in sliding_crops(audio, crop_len, crops)]
        out.append(Example(e.subject_id, e.label, motion.frames, targets, audio))
    return out


def _check_healthy(items):
    for it in items:
        if it.label != HEALTHY:
            raise LabelLeakError(f"{it.subject_id} is labeled {it.label!r}; the translator trains on healthy subjects only")


# -- training ---------------------------------------------------------------

def train(model: TranslatorModel, data, train_cfg: TrainConfig = TrainConfig(),
          mel: MelConfig = MelConfig(), log=None):
    """Adam on mean MSE over every (subject, crop) pair.

    ``data`` is a healthy-only :class:`Manifest` or a list of
    :class:`Example`. Each step uses up to ``batch_size`` crops of a single
    subject; since those crops share one input, the step's loss equals the
    MSE against their mean target plus a constant, which is what gets
    differentiated. Returns a new model and the per-epoch history.
    """
    train_cfg.validate()
    if isinstance(data, Manifest):
        _check_healthy(data.entries)
        data = prepare_examples(data, train_cfg.crops, train_cfg.crop_len, mel)
    _check_healthy(data)
    # canonical order: the result must not depend on manifest order
    data = sorted(data, key=lambda ex: ex.subject_id)
    if not data:
        raise BadConfig("no training subjects")
    if train_cfg.variant != model.variant:
        raise BadConfig(f"train config asks for {train_cfg.variant}, model is {model.variant}")
    dtype = np.dtype(model.cfg.dtype)

    # per-subject groups of crops: (motion, mean target, constant variance part)
    units = []
    for ex in data:
        _check_motion(model.cfg, ex.motion)
        tg = np.stack([t.values for t in ex.targets[:train_cfg.crops]])
        motion = ex.motion.astype(dtype)[None]
        units.append((motion, tg, input_patches(model, motion)))
    n_pairs = sum(u[1].shape[0] for u in units)

    params = {k: v.copy() for k, v in model.params.items()}
    state = gt.AdamState()
    history = TrainHistory()
    bs = train_cfg.batch_size
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([int(train_cfg.seed) & 0xFFFFFFFF, epoch])
        lr = train_cfg.lr_at(epoch)
        steps = []
        for ui in rng.permutation(len(units)):
            order = rng.permutation(units[ui][1].shape[0])
            steps.extend((ui, order[i:i + bs]) for i in range(0, order.size, bs))
        steps = [steps[i] for i in rng.permutation(len(steps))]
        total = 0.0
        for ui, idx in steps:
            motion, tg, patches = units[ui]
            sel = tg[idx]
            mean_t = sel.mean(axis=0)
            const = float(((sel - mean_t) ** 2).mean())
            cur = dataclasses.replace(model, params=params)
            loss, grads = loss_and_grads(cur, motion, mean_t[None, None], patches)
            params, state = gt.adam_step(params, grads, state, lr=lr)
            total += (loss + const) * idx.size
        history.loss.append(total / n_pairs)
        history.seconds.append(time.perf_counter() - t0)
        if log is not None:
            log(epoch, history.loss[-1])

    norms = np.array([t.norm for ex in data for t in ex.targets[:train_cfg.crops]], dtype=np.float64)
    meta = {
        "train": dataclasses.asdict(train_cfg),
        "subjects": [ex.subject_id for ex in data],
        "loss": list(history.loss),
        "norm": [float(v) for v in norms.mean(axis=0)],
        "mel": mel.fingerprint(),
    }
    return TranslatorModel(model.variant, model.cfg, model.seed, params, meta), history


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(model: TranslatorModel, path):
    header = {"kind": CHECKPOINT_KIND, "variant": model.variant, "seed": model.seed,
              "cfg": dataclasses.asdict(model.cfg), "meta": model.meta,
              "order": list(model.params)}
    formats.save_container(path, header, model.params)


def load_checkpoint(path) -> TranslatorModel:
    header, tensors = formats.load_container(path)
    if header.get("kind") != CHECKPOINT_KIND:
        raise BadCheckpoint(f"container kind is {header.get('kind')!r}, expected {CHECKPOINT_KIND!r}")
    try:
        cfg = ModelConfig.from_dict(header["cfg"])
        variant = header["variant"]
        expected = param_shapes(variant, cfg)
        params = {k: tensors[k] for k in header["order"]}
    except (KeyError, TypeError, BadConfig) as exc:
        raise BadCheckpoint(f"checkpoint header is incomplete ({exc})") from exc
    for name, (shape, _) in expected.items():
        if name not in params or params[name].shape != shape:
            raise BadCheckpoint(f"checkpoint tensor {name!r} is missing or has the wrong shape")
    if set(params) != set(expected):
        raise BadCheckpoint("checkpoint holds unexpected tensors")
    return TranslatorModel(variant, cfg, int(header["seed"]), params, header["meta"])

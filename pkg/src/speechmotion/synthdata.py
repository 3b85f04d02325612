"""Synthetic paired (motion field, waveform) subjects.

Both modalities are driven by one latent articulatory gesture. Healthy
subjects map gesture envelopes to formant trajectories through a fixed
coupling matrix; patients get a perturbed coupling plus a slowly drifting
phase offset between motion and audio. Either modality on its own is drawn
from the same distribution for both cohorts, so the anomaly only shows up
when the two are read together.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import formats
from .dsp import Waveform
from .errors import BadConfig, BadManifest, InvalidSeverity, IoError

HEALTHY = "healthy"
PATIENT = "patient"
PHRASES = ("a geese", "a souk")

# Fixed global coupling and the direction a patient's coupling is pushed in.
BASE_COUPLING = np.array([[0.50, 0.15], [-0.15, 0.50]])
COUPLING_SHIFT = np.array([[0.0, 1.4], [1.4, 0.0]])

# Blob direction per articulator (unit vectors).
BLOB_DIRECTIONS = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, -1.0]]) / math.sqrt(2.0)
# Candidate blob centre pairs as fractions of the grid extent.
CENTER_SETS = (
    ((0.35, 0.45, 0.40), (0.65, 0.55, 0.60)),
    ((0.40, 0.35, 0.55), (0.60, 0.65, 0.45)),
    ((0.45, 0.55, 0.35), (0.55, 0.40, 0.65)),
)


@dataclass(frozen=True)
class SynthConfig:
    frames: int = 8
    grid: Tuple[int, int, int] = (16, 16, 16)
    blob_sigma: float = 3.0  # voxels at a 16-voxel grid, scaled with grid size
    motion_noise: float = 0.02
    sample_rate: int = 10_000
    n_samples: int = 24_000
    f0: float = 100.0
    bandwidths: Tuple[float, float] = (90.0, 120.0)
    audio_gain: float = 0.5
    audio_noise: float = 0.002
    n_healthy: int = 12
    n_patients: int = 3
    severity: float = 0.5
    jitter_scale: float = 3.0  # radians of motion/audio phase drift at severity 1
    seed: int = 0

    def validate(self):
        if self.frames < 2:
            raise BadConfig(f"need at least 2 frames, got {self.frames}")
        if len(self.grid) != 3 or min(self.grid) < 4:
            raise BadConfig(f"grid must be three sizes >= 4, got {self.grid}")
        if self.n_healthy < 0 or self.n_patients < 0:
            raise BadConfig("subject counts must be non-negative")
        if self.severity < 0:
            raise InvalidSeverity(f"severity must be >= 0, got {self.severity}")
        if self.sample_rate <= 0 or self.n_samples < 1:
            raise BadConfig("sample_rate and n_samples must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("grid", "bandwidths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class GestureLatent:
    amplitudes: Tuple[float, float]
    center_index: int
    frequencies: Tuple[float, float]  # cycles per utterance
    phase: float

    def __post_init__(self):
        if not all(0.2 <= a <= 1.0 for a in self.amplitudes):
            raise BadConfig(f"amplitudes must lie in [0.2, 1], got {self.amplitudes}")
        if not all(0.5 <= f <= 2.0 for f in self.frequencies):
            raise BadConfig(f"frequencies must lie in [0.5, 2], got {self.frequencies}")
        if not 0.0 <= self.phase < 2 * math.pi:
            raise BadConfig(f"phase must lie in [0, 2pi), got {self.phase}")


@dataclass(frozen=True)
class MotionFieldSequence:
    frames: np.ndarray  # (T, X, Y, Z, 3) float32
    frame_rate: float = 1.0
    subject_id: str = ""

    def __post_init__(self):
        f = self.frames
        if f.ndim != 5 or f.shape[-1] != 3 or f.shape[0] < 2:
            raise BadConfig(f"motion frames must be (T>=2, X, Y, Z, 3), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise BadConfig("motion field contains non-finite values")


@dataclass
class SubjectRecord:
    subject_id: str
    label: str
    motion: MotionFieldSequence
    audio: Waveform
    latent: GestureLatent
    anomaly_severity: float = 0.0
    phrase: str = PHRASES[0]

    def __post_init__(self):
        if (self.label == HEALTHY) != (self.anomaly_severity == 0):
            raise InvalidSeverity(
                f"{self.subject_id}: label {self.label!r} with severity {self.anomaly_severity}")


@dataclass
class ManifestEntry:
    subject_id: str
    label: str
    motion: str
    audio: str
    phrase: str


@dataclass
class Manifest:
    entries: List[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [e.subject_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise BadManifest("duplicate subject ids in manifest")
        for e in self.entries:
            if e.label not in (HEALTHY, PATIENT):
                raise BadManifest(f"{e.subject_id}: unknown label {e.label!r}")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    @property
    def healthy(self) -> List[ManifestEntry]:
        return [e for e in self.entries if e.label == HEALTHY]

    @property
    def patients(self) -> List[ManifestEntry]:
        return [e for e in self.entries if e.label == PATIENT]

    def subset(self, ids) -> "Manifest":
        keep = set(ids)
        return Manifest([e for e in self.entries if e.subject_id in keep], self.root)

    def to_json(self) -> str:
        return json.dumps([asdict(e) for e in self.entries], indent=2)

    def save(self, path):
        try:
            Path(path).write_text(self.to_json() + "\n")
        except OSError as exc:
            raise IoError(f"cannot write manifest ({exc.strerror})", path) from exc

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise IoError(f"cannot read manifest ({exc.strerror})", path) from exc
        except json.JSONDecodeError as exc:
            raise BadManifest(f"{path}: invalid JSON ({exc})") from exc
        try:
            entries = [ManifestEntry(**e) for e in raw]
        except TypeError as exc:
            raise BadManifest(f"{path}: malformed entry ({exc})") from exc
        m = cls(entries, path.parent)
        for e in m.entries:
            for rel in (e.motion, e.audio):
                if not m.resolve(rel).exists():
                    raise IoError("manifest references a missing file", m.resolve(rel))
        return m


def subject_stream(seed: int, subject_id: str) -> np.random.SeedSequence:
    """Per-subject seed sequence; independent of generation order."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(subject_id.encode("utf-8"))])


def draw_latent(rng: np.random.Generator) -> GestureLatent:
    a = rng.uniform(0.2, 1.0, size=2)
    idx = int(rng.integers(len(CENTER_SETS)))
    f = rng.uniform(0.5, 2.0, size=2)
    phi = float(rng.uniform(0.0, 2 * math.pi))
    return GestureLatent((float(a[0]), float(a[1])), idx, (float(f[0]), float(f[1])), phi % (2 * math.pi))


def blob_centers(g: GestureLatent, grid) -> np.ndarray:
    return np.array(CENTER_SETS[g.center_index]) * (np.array(grid) - 1)


def render_motion(g: GestureLatent, cfg: SynthConfig = SynthConfig(), noise_seed=0,
                  subject_id: str = "") -> MotionFieldSequence:
    cfg.validate()
    T = cfg.frames
    X, Y, Z = cfg.grid
    sigma = cfg.blob_sigma * X / 16.0
    rng = np.random.default_rng(noise_seed)
    xs, ys, zs = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij")
    out = np.zeros((T, X, Y, Z, 3), dtype=np.float32)
    t = np.arange(T)
    for j, c in enumerate(blob_centers(g, cfg.grid)):
        d2 = (xs - c[0]) ** 2 + (ys - c[1]) ** 2 + (zs - c[2]) ** 2
        profile = np.exp(-d2 / (2 * sigma ** 2)).astype(np.float32)
        env = g.amplitudes[j] * np.sin(2 * np.pi * g.frequencies[j] * t / T + g.phase)
        for ti in range(T):
            out[ti] += (env[ti] * profile)[..., None] * BLOB_DIRECTIONS[j].astype(np.float32)
    for ti in range(T):
        out[ti] += np.float32(cfg.motion_noise) * rng.standard_normal(out.shape[1:], dtype=np.float32)
    return MotionFieldSequence(out, frame_rate=T / (cfg.n_samples / cfg.sample_rate), subject_id=subject_id)


def envelopes(g: GestureLatent, cfg: SynthConfig, phase_offset=None) -> np.ndarray:
    """Envelope pair ``s(tau)`` on the audio time axis, shape (2, n_samples)."""
    tau = np.arange(cfg.n_samples) / cfg.n_samples  # utterance-relative time
    off = 0.0 if phase_offset is None else phase_offset
    return np.stack([g.amplitudes[j] * np.sin(2 * np.pi * g.frequencies[j] * tau + g.phase + off)
                     for j in range(2)])


def _resonate(x: np.ndarray, freqs: np.ndarray, bandwidth: float, sr: int) -> np.ndarray:
    """Two-pole resonator with per-sample centre frequency and unity DC gain."""
    if bandwidth <= 0:
        raise BadConfig(f"resonator bandwidth must be positive, got {bandwidth}")
    r = math.exp(-math.pi * bandwidth / sr)
    if r >= 1.0:
        raise BadConfig(f"resonator pole radius {r} is not < 1")
    a1 = 2.0 * r * np.cos(2.0 * np.pi * freqs / sr)
    a2 = -r * r
    b = 1.0 - a1 - a2
    y = np.empty_like(x)
    y1 = y2 = 0.0
    for n in range(x.size):
        yn = b[n] * x[n] + a1[n] * y1 + a2 * y2
        y[n] = yn
        y2, y1 = y1, yn
    return y


def formant_tracks(g: GestureLatent, coupling: np.ndarray, cfg: SynthConfig, phase_offset=None):
    s = envelopes(g, cfg, phase_offset)
    cs = np.asarray(coupling) @ s
    nyq = cfg.sample_rate / 2
    f1 = np.clip(300.0 + 400.0 * cs[0], 60.0, nyq - 100.0)
    f2 = np.clip(900.0 + 800.0 * cs[1], 200.0, nyq - 100.0)
    return f1, f2


def render_audio(g: GestureLatent, coupling, cfg: SynthConfig = SynthConfig(), noise_seed=0,
                 phase_offset=None) -> Waveform:
    """Impulse train at ``f0`` through two cascaded formant resonators."""
    cfg.validate()
    coupling = np.asarray(coupling, dtype=np.float64)
    if coupling.shape != (2, 2) or not np.all(np.isfinite(coupling)):
        raise BadConfig(f"coupling must be a finite 2x2 matrix, got {coupling!r}")
    sr, n = cfg.sample_rate, cfg.n_samples
    src = np.zeros(n)
    period = sr / cfg.f0
    src[np.floor(np.arange(0, n, period)).astype(int)] = 1.0
    f1, f2 = formant_tracks(g, coupling, cfg, phase_offset)
    y = _resonate(src, f1, cfg.bandwidths[0], sr)
    y = _resonate(y, f2, cfg.bandwidths[1], sr)
    y = cfg.audio_gain * (y - y.mean())
    rng = np.random.default_rng(noise_seed)
    y += rng.normal(0.0, cfg.audio_noise, size=n)
    return Waveform(y, sr)


def phase_drift(rng: np.random.Generator, n: int) -> np.ndarray:
    """Smooth zero-start drift built from three low harmonics, peak |.| = 1."""
    tau = np.arange(n) / n
    b = rng.uniform(0.5, 1.0, size=3) * rng.choice([-1.0, 1.0], size=3)
    psi = rng.uniform(0, 2 * np.pi, size=3)
    eta = sum(b[m] * (np.sin(2 * np.pi * (m + 1) * tau + psi[m]) - np.sin(psi[m])) for m in range(3))
    return eta / np.max(np.abs(eta))


def sample_subject(seed: int, label: str, cfg: SynthConfig = SynthConfig(),
                   subject_id: str = "S000", phrase: Optional[str] = None) -> SubjectRecord:
    """Draw one subject; identical (seed, subject_id) gives identical latents
    whatever the label, so healthy/patient twins share their motion."""
    if label not in (HEALTHY, PATIENT):
        raise BadConfig(f"label must be {HEALTHY!r} or {PATIENT!r}, got {label!r}")
    if label == PATIENT and cfg.severity <= 0:
        raise InvalidSeverity("a patient needs severity > 0")
    ss_latent, ss_motion, ss_audio, ss_patient = subject_stream(seed, subject_id).spawn(4)
    g = draw_latent(np.random.default_rng(ss_latent))
    motion = render_motion(g, cfg, np.random.default_rng(ss_motion), subject_id)
    if label == HEALTHY:
        coupling, offset, severity = BASE_COUPLING, None, 0.0
    else:
        severity = float(cfg.severity)
        coupling = BASE_COUPLING + severity * COUPLING_SHIFT
        offset = severity * cfg.jitter_scale * phase_drift(np.random.default_rng(ss_patient), cfg.n_samples)
    audio = render_audio(g, coupling, cfg, np.random.default_rng(ss_audio), offset)
    return SubjectRecord(subject_id, label, motion, audio, g, severity, phrase or PHRASES[0])


def cohort_ids(cfg: SynthConfig):
    return ([(f"H{i:03d}", HEALTHY) for i in range(cfg.n_healthy)]
            + [(f"P{i:03d}", PATIENT) for i in range(cfg.n_patients)])


def make_dataset(cfg: SynthConfig, out_dir) -> Manifest:
    """Write motion files, WAVs and ``manifest.json`` under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    try:
        (out / "motion").mkdir(parents=True, exist_ok=True)
        (out / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create dataset directory ({exc.strerror})", out) from exc
    entries = []
    for i, (sid, label) in enumerate(cohort_ids(cfg)):
        phrase = PHRASES[i % 2]
        rec = sample_subject(cfg.seed, label, cfg, sid, phrase)
        mpath, apath = f"motion/{sid}.mfld", f"audio/{sid}.wav"
        formats.save_motion(out / mpath, rec.motion.frames)
        formats.write_wav(out / apath, rec.audio.samples, rec.audio.sample_rate)
        entries.append(ManifestEntry(sid, label, mpath, apath, phrase))
    manifest = Manifest(entries, out)
    manifest.save(out / "manifest.json")
    return manifest


def load_subject(manifest: Manifest, entry: ManifestEntry):
    """``(MotionFieldSequence, Waveform)`` for one manifest entry."""
    frames = formats.load_motion(manifest.resolve(entry.motion))
    samples, sr = formats.read_wav(manifest.resolve(entry.audio))
    return MotionFieldSequence(frames, subject_id=entry.subject_id), Waveform(samples, sr)

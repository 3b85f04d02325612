"""Audio-side signal processing.

STFT/iSTFT with weighted overlap-add, an HTK-style mel filterbank, log-mel
spectrograms scaled to [0, 1], mel inversion (non-negative least squares
against the filterbank, then Griffin-Lim) and evenly spaced crop augmentation.

Every function here is pure; nothing caches state between calls.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from scipy import optimize

from .errors import BadConfig, DegenerateNormalization, InputTooShort, MissingMetadata


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size < 1:
            raise BadConfig(f"waveform must be 1-D and non-empty, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise BadConfig("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise BadConfig(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class ComplexSpectrogram:
    bins: np.ndarray  # (n_fft // 2 + 1, n_frames), complex
    n_fft: int
    hop: int
    window: str = "hann"
    pad_mode: str = "reflect"
    sample_rate: Optional[int] = None

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


@dataclass(frozen=True)
class MelConfig:
    sr: int = 10_000
    n_fft: int = 1024
    hop: int = 328
    n_mels: int = 64
    n_time: int = 64
    fmin: float = 40.0
    fmax: float = 1000.0
    eps: float = 1e-10

    def fingerprint(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_fft // 2 + 1)
    edges_hz: np.ndarray  # (n_mels + 2,) left edge, peaks, right edge


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # (n_mels, n_time)
    norm: Optional[Tuple[float, float]] = None  # (min, max) of log-energies
    config: Optional[MelConfig] = None

    @property
    def shape(self):
        return self.values.shape

    def log_energies(self) -> np.ndarray:
        """Undo the [0, 1] scaling; needs the normalization record."""
        if self.norm is None:
            raise MissingMetadata("mel-spectrogram carries no normalization record")
        lo, hi = self.norm
        return lo + np.asarray(self.values, dtype=np.float64) * (hi - lo)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _hann(n: int) -> np.ndarray:
    # periodic Hann, the STFT convention
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def _check_fft_size(n_fft: int, hop: int):
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise BadConfig(f"n_fft must be a power of two, got {n_fft}")
    if hop < 1 or hop > n_fft:
        raise BadConfig(f"hop must lie in [1, n_fft], got hop={hop}, n_fft={n_fft}")


def _check_nola(n_fft: int, hop: int):
    # overlap-add is invertible iff the squared window never sums to zero
    w2 = _hann(n_fft) ** 2
    n_shift = -(-n_fft // hop)
    wss = np.zeros(hop)
    for k in range(n_shift):
        seg = w2[k * hop:(k + 1) * hop]
        wss[:seg.size] += seg
    if wss.min() < 1e-10:
        raise BadConfig(f"hann window with n_fft={n_fft}, hop={hop} does not overlap-add invertibly")


def stft(w: Waveform, n_fft: int = 1024, hop: int = 256, pad_mode: str = "reflect") -> ComplexSpectrogram:
    """Centered Hann-windowed STFT.

    Frame ``t`` is centered on sample ``t * hop``; the signal is padded by
    ``n_fft // 2`` on both sides using ``pad_mode`` ("reflect" or "constant").
    Output has ``1 + len(w) // hop`` frames.
    """
    _check_fft_size(n_fft, hop)
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    sr = w.sample_rate if isinstance(w, Waveform) else None
    if x.size < n_fft:
        raise InputTooShort(f"signal has {x.size} samples, n_fft is {n_fft}")
    if pad_mode not in ("reflect", "constant"):
        raise BadConfig(f"unknown pad_mode {pad_mode!r}")
    half = n_fft // 2
    xp = np.pad(x, half, mode=pad_mode)
    n_frames = 1 + x.size // hop
    frames = np.lib.stride_tricks.sliding_window_view(xp, n_fft)[::hop][:n_frames]
    bins = np.fft.rfft(frames * _hann(n_fft), axis=1).T
    return ComplexSpectrogram(bins=bins, n_fft=n_fft, hop=hop, pad_mode=pad_mode, sample_rate=sr)


def istft(s: ComplexSpectrogram, length: Optional[int] = None) -> Waveform:
    """Least-squares inverse of :func:`stft` by weighted overlap-add.

    Without ``length`` the output has ``hop * (n_frames - 1)`` samples, which
    maps back onto exactly ``n_frames`` frames under :func:`stft`.
    """
    n_fft, hop = s.n_fft, s.hop
    _check_fft_size(n_fft, hop)
    _check_nola(n_fft, hop)
    win = _hann(n_fft)
    n_frames = s.bins.shape[1]
    frames = np.fft.irfft(s.bins.T, n=n_fft, axis=1) * win
    total = n_fft + hop * (n_frames - 1)
    y = np.zeros(total)
    wss = np.zeros(total)
    w2 = win ** 2
    for t in range(n_frames):
        y[t * hop:t * hop + n_fft] += frames[t]
        wss[t * hop:t * hop + n_fft] += w2
    nz = wss > 1e-10
    y[nz] /= wss[nz]
    half = n_fft // 2
    out_len = hop * (n_frames - 1) if length is None else int(length)
    y = y[half:half + out_len]
    if y.size < out_len:
        y = np.pad(y, (0, out_len - y.size))
    return Waveform(y, s.sample_rate or 1)


def mel_filterbank(n_mels: int = 64, n_fft: int = 1024, sr: float = 10_000,
                   fmin: float = 40.0, fmax: float = 1000.0) -> MelFilterbank:
    """Triangular filters with peaks equally spaced in HTK mel, each peak scaled to 1."""
    if n_mels < 2:
        raise BadConfig(f"n_mels must be >= 2, got {n_mels}")
    if not (0 <= fmin < fmax):
        raise BadConfig(f"need 0 <= fmin < fmax, got fmin={fmin}, fmax={fmax}")
    if fmax > sr / 2:
        raise BadConfig(f"fmax={fmax} exceeds Nyquist {sr / 2}")
    return _mel_filterbank_cached(int(n_mels), int(n_fft), float(sr), float(fmin), float(fmax))


@lru_cache(maxsize=16)
def _mel_filterbank_cached(n_mels, n_fft, sr, fmin, fmax) -> MelFilterbank:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    peaks = weights.max(axis=1)
    if np.any(peaks <= 0):
        empty = int(np.argmin(peaks))
        raise BadConfig(f"mel filter {empty} covers no FFT bin; raise n_fft or lower n_mels")
    weights /= peaks[:, None]
    weights.setflags(write=False)
    edges.setflags(write=False)
    return MelFilterbank(weights=weights, edges_hz=edges)


def _filterbank_for(cfg: MelConfig) -> MelFilterbank:
    return mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sr, cfg.fmin, cfg.fmax)


def log_mel_energies(w: Waveform, cfg: MelConfig = MelConfig(), n_time: Optional[int] = None) -> np.ndarray:
    """``log(eps + filterbank @ |stft|**2)`` before any normalization.

    Keeps the first ``n_time`` frames (``cfg.n_time`` by default; pass ``-1``
    to keep them all).
    """
    if w.sample_rate != cfg.sr:
        raise BadConfig(f"waveform is {w.sample_rate} Hz, config expects {cfg.sr} Hz")
    spec = stft(w, cfg.n_fft, cfg.hop, pad_mode="reflect")
    power = np.abs(spec.bins) ** 2
    n_time = cfg.n_time if n_time is None else n_time
    if n_time != -1:
        if power.shape[1] < n_time:
            raise InputTooShort(
                f"{len(w)} samples give {power.shape[1]} frames at hop {cfg.hop}, need {n_time}")
        power = power[:, :n_time]
    return np.log(cfg.eps + _filterbank_for(cfg).weights @ power)


def melspectrogram(w: Waveform, cfg: MelConfig = MelConfig()) -> MelSpectrogram:
    """Log-mel spectrogram min-max scaled to [0, 1], shape ``(n_mels, n_time)``.

    A 21,000-sample crop at hop 328 yields 65 centered frames; the trailing
    one is dropped so the default output is 64x64.
    """
    logm = log_mel_energies(w, cfg)
    lo, hi = float(logm.min()), float(logm.max())
    if not hi > lo:
        raise DegenerateNormalization("all log-mel energies are equal; cannot scale to [0, 1]")
    values = (logm - lo) / (hi - lo)
    return MelSpectrogram(values=values, norm=(lo, hi), config=cfg)


def consistency_residual(x: np.ndarray, mag: np.ndarray, n_fft: int, hop: int) -> float:
    """``|| |STFT(x)| - mag ||_2`` over the full two-sided spectrum.

    One-sided bins other than DC and Nyquist stand for two conjugate bins,
    hence the weight of 2 on their squared error.
    """
    spec = stft(np.asarray(x), n_fft, hop, pad_mode="constant").bins
    diff2 = (np.abs(spec) - mag) ** 2
    weights = np.full(diff2.shape[0], 2.0)
    weights[0] = weights[-1] = 1.0
    return float(np.sqrt(np.sum(weights[:, None] * diff2)))


def griffin_lim(mag: np.ndarray, n_fft: int, hop: int, iterations: int = 60,
                seed: int = 0, init: str = "zeros", sample_rate: int = 1,
                return_residuals: bool = False):
    """Phase recovery for a one-sided magnitude spectrogram.

    Zero padding is used for frame centering here (not reflect): with it the
    overlap-add inverse is the exact least-squares projection, which keeps the
    consistency residual non-increasing from one iteration to the next.
    """
    if iterations < 0:
        raise BadConfig(f"iterations must be >= 0, got {iterations}")
    mag = np.asarray(mag, dtype=np.float64)
    if init == "zeros":
        phase = np.ones_like(mag, dtype=np.complex128)
    elif init == "random":
        rng = np.random.default_rng(seed)
        phase = np.exp(2j * np.pi * rng.random(mag.shape))
    else:
        raise BadConfig(f"unknown init {init!r}")

    def inverse(spec):
        return istft(ComplexSpectrogram(spec, n_fft, hop, pad_mode="constant", sample_rate=sample_rate)).samples

    x = inverse(mag * phase)
    residuals = []
    for _ in range(iterations):
        spec = stft(x, n_fft, hop, pad_mode="constant").bins
        if return_residuals:
            residuals.append(_residual_from_spec(spec, mag))
        a = np.abs(spec)
        phase = np.where(a > 0, spec / np.where(a > 0, a, 1.0), 1.0)
        x = inverse(mag * phase)
    if return_residuals:
        residuals.append(_residual_from_spec(stft(x, n_fft, hop, pad_mode="constant").bins, mag))
        return Waveform(x, sample_rate), residuals
    return Waveform(x, sample_rate)


def _residual_from_spec(spec, mag):
    diff2 = (np.abs(spec) - mag) ** 2
    weights = np.full(diff2.shape[0], 2.0)
    weights[0] = weights[-1] = 1.0
    return float(np.sqrt(np.sum(weights[:, None] * diff2)))


def mel_to_magnitude(m: MelSpectrogram, cfg: Optional[MelConfig] = None) -> np.ndarray:
    """Linear-frequency magnitude estimate from a normalized mel-spectrogram.

    Each frame's power spectrum is the non-negative least-squares solution
    against the filterbank; bins no filter touches stay at zero.
    """
    cfg = cfg or m.config or MelConfig()
    if m.norm is None:
        raise MissingMetadata("cannot invert a mel-spectrogram without its normalization record")
    mel_power = np.maximum(np.exp(m.log_energies()) - cfg.eps, 0.0)
    fb = _filterbank_for(cfg).weights
    cols = np.flatnonzero(fb.sum(axis=0) > 0)
    sub = fb[:, cols]
    power = np.zeros((fb.shape[1], mel_power.shape[1]))
    for t in range(mel_power.shape[1]):
        power[cols, t] = optimize.nnls(sub, mel_power[:, t])[0]
    return np.sqrt(power)


def invert_mel(m: MelSpectrogram, iterations: int = 60, seed: int = 0, init: str = "random",
               cfg: Optional[MelConfig] = None, return_residuals: bool = False):
    """Waveform whose mel-spectrogram approximates ``m``.

    Output length is ``hop * (n_time - 1)``, which :func:`melspectrogram`
    maps back onto ``n_time`` frames.
    """
    cfg = cfg or m.config or MelConfig()
    mag = mel_to_magnitude(m, cfg)
    return griffin_lim(mag, cfg.n_fft, cfg.hop, iterations, seed=seed, init=init,
                       sample_rate=cfg.sr, return_residuals=return_residuals)


def crop_offsets(n: int, crop_len: int, count: int) -> List[int]:
    if count < 1:
        raise BadConfig(f"count must be >= 1, got {count}")
    if n < crop_len:
        raise InputTooShort(f"waveform has {n} samples, crop length is {crop_len}")
    slack = n - crop_len
    if count == 1:
        return [0]
    return [int(np.floor(i * slack / (count - 1) + 0.5)) for i in range(count)]


def sliding_crops(w: Waveform, crop_len: int = 21_000, count: int = 10) -> List[Waveform]:
    """``count`` crops of ``crop_len`` samples, first at 0 and last flush with the end."""
    return [Waveform(w.samples[o:o + crop_len], w.sample_rate)
            for o in crop_offsets(len(w), crop_len, count)]

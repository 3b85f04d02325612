"""Synthesis-fidelity metrics: 2-D Pearson correlation, log-spectral distance
and ``pesq_lite``, a small intrusive waveform-quality score.

``pesq_lite`` borrows the outline of PESQ (level alignment, time alignment,
symmetric and asymmetric disturbance, a 1.0 to 4.5 output range) but none of
its psychoacoustic model. Its numbers are only comparable with each other.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np
from scipy import signal

from .dsp import MelConfig, MelSpectrogram, Waveform, log_mel_energies
from .errors import BadConfig, DegenerateReference, DegenerateVariance, ShapeError

PESQ_SYM_WEIGHT = 0.35
PESQ_ASYM_WEIGHT = 0.11
PESQ_MAX_LAG_S = 0.25
# mel energies more than this far (dB) below the reference peak are floored
PESQ_FLOOR_DB = 60.0
PESQ_RANGE = (1.0, 4.5)


@dataclass
class MetricReport:
    subject_id: str
    crop_index: int
    corr2d: float
    lsd_db: float
    pesq_lite: float

    def __post_init__(self):
        vals = (self.corr2d, self.lsd_db, self.pesq_lite)
        if not all(math.isfinite(v) for v in vals):
            raise BadConfig(f"non-finite metric in {self}")
        if not -1.0 <= self.corr2d <= 1.0 or self.lsd_db < 0:
            raise BadConfig(f"metric out of range in {self}")
        if not PESQ_RANGE[0] <= self.pesq_lite <= PESQ_RANGE[1]:
            raise BadConfig(f"pesq_lite out of range in {self}")


CSV_FIELDS = ("subject_id", "crop_index", "corr2d", "lsd_db", "pesq_lite")


def write_reports_csv(path, reports: Iterable[MetricReport]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in reports:
            w.writerow([r.subject_id, r.crop_index, repr(r.corr2d), repr(r.lsd_db), repr(r.pesq_lite)])


def read_reports_csv(path):
    with open(path, newline="") as fh:
        return [MetricReport(row["subject_id"], int(row["crop_index"]), float(row["corr2d"]),
                             float(row["lsd_db"]), float(row["pesq_lite"]))
                for row in csv.DictReader(fh)]


def _values(m):
    return np.asarray(m.values if isinstance(m, MelSpectrogram) else m, dtype=np.float64)


def corr2d(a, b) -> float:
    """Pearson correlation over all entries of two equal-shape matrices."""
    x, y = _values(a), _values(b)
    if x.shape != y.shape:
        raise ShapeError(f"corr2d shape mismatch: {x.shape} vs {y.shape}")
    dx = x.ravel() - x.mean()
    dy = y.ravel() - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateVariance("corr2d is undefined for a constant matrix")
    # sqrt of the product (not product of sqrts) makes corr2d(A, A) exactly 1
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def log_spectral_distance(a, b) -> float:
    """RMS difference of natural-log energies, in dB.

    ``MelSpectrogram`` arguments are de-normalized first; plain arrays are
    taken to already hold log-energies.
    """
    la = a.log_energies() if isinstance(a, MelSpectrogram) else np.asarray(a, dtype=np.float64)
    lb = b.log_energies() if isinstance(b, MelSpectrogram) else np.asarray(b, dtype=np.float64)
    if la.shape != lb.shape:
        raise ShapeError(f"lsd shape mismatch: {la.shape} vs {lb.shape}")
    return float(np.sqrt(np.mean((la - lb) ** 2)) * 10.0 / math.log(10.0))


def _best_lag(ref: np.ndarray, deg: np.ndarray, max_lag: int) -> int:
    """Lag ``k`` maximizing the normalized correlation of ref[n] with deg[n + k].

    Normalizing by the energy of the overlapping spans keeps periodic
    signals from snapping to the lag with the longest overlap.
    """
    xc = signal.correlate(deg, ref, mode="full", method="fft")
    zero = ref.size - 1
    lags = np.arange(-min(max_lag, ref.size - 1), min(max_lag, deg.size - 1) + 1)
    cr = np.concatenate([[0.0], np.cumsum(ref * ref)])
    cd = np.concatenate([[0.0], np.cumsum(deg * deg)])
    start = np.maximum(0, -lags)
    stop = np.minimum(ref.size, deg.size - lags)
    e_ref = cr[stop] - cr[start]
    e_deg = cd[stop + lags] - cd[start + lags]
    denom = np.sqrt(np.maximum(e_ref * e_deg, 1e-300))
    score = xc[zero + lags] / denom
    # near-ties (periodic signals) resolve to the smallest shift
    tied = np.flatnonzero(score >= score.max() - 1e-9)
    return int(lags[tied[np.argmin(np.abs(lags[tied]))]])


def _rms(x):
    return float(np.sqrt(np.mean(x * x)))


def pesq_lite(ref: Waveform, deg: Waveform, cfg: Optional[MelConfig] = None) -> float:
    """Score in [1.0, 4.5]; 4.5 means no measurable disturbance.

    Steps: global time alignment by cross-correlation (lag within
    +-0.25 s), RMS level alignment over the overlapping span, log-mel frames
    of both signals with energies floored 60 dB below the reference peak,
    then ``4.5 - 0.35 * d_sym - 0.11 * d_asym`` clipped to the MOS range.
    """
    if ref.sample_rate != deg.sample_rate:
        raise BadConfig(f"sample rates differ: {ref.sample_rate} vs {deg.sample_rate}")
    sr = ref.sample_rate
    cfg = cfg or MelConfig(sr=sr, fmax=min(1000.0, sr / 2))
    if cfg.sr != sr:
        raise BadConfig(f"metric config expects {cfg.sr} Hz, signals are {sr} Hz")
    if len(ref) < sr or len(deg) < sr:
        raise BadConfig("pesq_lite needs at least one second of audio on both sides")
    r, d = ref.samples, deg.samples
    if _rms(r) == 0.0:
        raise DegenerateReference("reference signal is silent")

    lag = _best_lag(r, d, int(round(PESQ_MAX_LAG_S * sr)))
    if lag >= 0:
        d = d[lag:]
    else:
        r = r[-lag:]
    n = min(r.size, d.size)
    r, d = r[:n], d[:n]
    if n < cfg.n_fft:
        raise BadConfig("signals overlap by less than one analysis frame after alignment")
    rd = _rms(d)
    d = d * (_rms(r) / rd) if rd > 0 else d

    lr = log_mel_energies(Waveform(r, sr), cfg, n_time=-1)
    ld = log_mel_energies(Waveform(d, sr), cfg, n_time=-1)
    floor = lr.max() - PESQ_FLOOR_DB * math.log(10.0) / 10.0
    lr = np.maximum(lr, floor)
    ld = np.maximum(ld, floor)
    diff = ld - lr
    d_sym = float(np.mean(np.abs(diff)))
    d_asym = float(np.mean(np.maximum(diff, 0.0)))
    score = 4.5 - PESQ_SYM_WEIGHT * d_sym - PESQ_ASYM_WEIGHT * d_asym
    return float(min(PESQ_RANGE[1], max(PESQ_RANGE[0], score)))

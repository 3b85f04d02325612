"""Closed-form ridge regression from pooled per-frame motion statistics to
spectrogram pixels.

It is the learnability yardstick for the synthetic corpus: if a linear map
from a dozen summary numbers per frame cannot reproduce healthy spectrograms,
no translator result on that corpus means much.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .dsp import MelSpectrogram
from .errors import BadConfig, LabelLeakError, ShapeError
from .synthdata import HEALTHY


def motion_statistics(frames: np.ndarray) -> np.ndarray:
    """Per-frame channel means and mean absolute displacements, plus a bias term."""
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim != 5 or f.shape[-1] != 3:
        raise ShapeError(f"motion must be (T, X, Y, Z, 3), got {f.shape}")
    return np.concatenate([f.mean(axis=(1, 2, 3)).ravel(), np.abs(f).mean(axis=(1, 2, 3)).ravel(), [1.0]])


@dataclass
class RidgeOracle:
    weights: np.ndarray  # (n_features, n_mels * n_time)
    shape: Tuple[int, int]
    norm: Tuple[float, float]
    lam: float

    def predict(self, frames) -> MelSpectrogram:
        x = motion_statistics(frames)
        if x.size != self.weights.shape[0]:
            raise ShapeError(f"motion gives {x.size} statistics, oracle expects {self.weights.shape[0]}")
        return MelSpectrogram(np.clip(x @ self.weights, 0.0, 1.0).reshape(self.shape), self.norm)


def fit_ridge(examples: Sequence, lam: float = 1e-2) -> RidgeOracle:
    """Fit on healthy examples; each target is the subject's mean crop spectrogram."""
    if lam < 0:
        raise BadConfig(f"ridge penalty must be >= 0, got {lam}")
    if not examples:
        raise BadConfig("ridge oracle needs at least one training subject")
    for ex in examples:
        if ex.label != HEALTHY:
            raise LabelLeakError(f"{ex.subject_id} is labeled {ex.label!r}; the oracle trains on healthy subjects only")
    X = np.stack([motion_statistics(ex.motion) for ex in examples])
    T = np.stack([np.mean([t.values for t in ex.targets], axis=0).ravel() for ex in examples])
    W = np.linalg.solve(X.T @ X + lam * np.eye(X.shape[1]), X.T @ T)
    norm = np.mean([t.norm for ex in examples for t in ex.targets], axis=0)
    return RidgeOracle(W, examples[0].targets[0].shape, (float(norm[0]), float(norm[1])), float(lam))

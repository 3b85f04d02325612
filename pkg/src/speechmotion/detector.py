"""One-class nu-SVM over reconstruction-quality features.

The dual

    min_a  1/2 a' K a    s.t.  0 <= a_i <= 1/(nu n),  sum a_i = 1

is solved by SMO with second-order working-set selection. Points with
decision value ``f(x) = sum_i a_i k(x_i, x) - rho < 0`` fall outside the
learned support of the healthy training data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from . import formats
from .dsp import MelSpectrogram, Waveform
from .errors import BadCheckpoint, BadConfig, ConvergenceError, ShapeError, TooFewSamples
from .metrics import corr2d, log_spectral_distance

N_BAND_GROUPS = 8
FEATURE_DIM = 2 + 2 * N_BAND_GROUPS
KKT_TOL = 1e-6
MAX_PAIR_UPDATES = 100_000


def feature_names():
    names = ["corr2d", "lsd_db"]
    for g in range(N_BAND_GROUPS):
        names += [f"band{g}_mae", f"band{g}_err_std"]
    return names


def extract_features(pred: MelSpectrogram, target: MelSpectrogram,
                     ref_wave: Optional[Waveform] = None, pred_wave: Optional[Waveform] = None,
                     mode: str = "quality") -> np.ndarray:
    """18-dim reconstruction-quality vector for one (prediction, target) pair.

    Layout: corr2d, lsd_db, then per group of consecutive mel bands the mean
    absolute error and the error std. ``mode="raw"`` returns the flattened
    prediction instead. The waveforms are accepted for interface symmetry
    with the metric reports; no feature uses them.
    """
    p = np.asarray(pred.values, dtype=np.float64)
    t = np.asarray(target.values, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ in shape")
    if mode == "raw":
        return p.ravel().copy()
    if mode != "quality":
        raise BadConfig(f"unknown feature mode {mode!r}")
    if p.shape[0] % N_BAND_GROUPS:
        raise ShapeError(f"{p.shape[0]} mel bands do not split into {N_BAND_GROUPS} groups")
    err = (p - t).reshape(N_BAND_GROUPS, -1)
    out = np.empty(FEATURE_DIM)
    out[0] = corr2d(p, t)
    out[1] = log_spectral_distance(pred, target)
    out[2::2] = np.abs(err).mean(axis=1)
    out[3::2] = err.std(axis=1)
    return out


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    # differences, not the |a|^2 + |b|^2 - 2ab expansion: k(x, x) is exactly 1
    return np.exp(-gamma * cdist(a, b, "sqeuclidean"))


def linear_kernel(a, b, gamma=None):
    return np.atleast_2d(a) @ np.atleast_2d(b).T


KERNELS = {"rbf": rbf_kernel, "linear": linear_kernel}


@dataclass
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    keep: np.ndarray  # bool mask; zero-variance dimensions are dropped

    @classmethod
    def fit(cls, x: np.ndarray) -> "StandardizationStats":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        keep = std > 1e-12
        return cls(mean, np.where(keep, std, 1.0), keep)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.mean.size:
            raise ShapeError(f"feature dimension {x.shape[1]} != trained dimension {self.mean.size}")
        return ((x - self.mean) / self.std)[:, self.keep]


@dataclass
class OcSvmModel:
    support_vectors: np.ndarray  # standardized training points, all of them
    alpha: np.ndarray
    rho: float
    gamma: float
    nu: float
    stats: StandardizationStats
    kernel: str = "rbf"
    info: dict = field(default_factory=dict)

    def gram(self) -> np.ndarray:
        return KERNELS[self.kernel](self.support_vectors, self.support_vectors, self.gamma)

    @property
    def upper_bound(self) -> float:
        return 1.0 / (self.nu * self.alpha.size)

    def objective(self) -> float:
        return 0.5 * float(self.alpha @ self.gram() @ self.alpha)


def _resolve_gamma(gamma, xs: np.ndarray) -> float:
    if gamma == "auto" or gamma is None:
        var = float(xs.var())
        return 1.0 / (xs.shape[1] * var) if var > 0 else 1.0
    gamma = float(gamma)
    if not gamma > 0:
        raise BadConfig(f"gamma must be > 0 or 'auto', got {gamma}")
    return gamma


def smo_one_class(K: np.ndarray, nu: float, tol: float = KKT_TOL, max_iter: int = MAX_PAIR_UPDATES):
    """Solve the one-class dual for Gram matrix ``K``.

    Returns ``(alpha, rho, info)``; ``info`` holds the final maximal KKT
    violation and the number of pair updates.
    """
    n = K.shape[0]
    C = 1.0 / (nu * n)
    # uniform start is always feasible and keeps exchangeable points symmetric
    alpha = np.full(n, 1.0 / n)
    G = K @ alpha
    diag = np.diag(K)
    eps_bound = 1e-12 * C
    it = 0
    while True:
        up = alpha < C - eps_bound  # may increase
        low = alpha > eps_bound  # may decrease
        if not up.any() or not low.any():
            gap = 0.0
            break
        # first index: most negative gradient among those that can grow
        g_up = np.where(up, -G, -np.inf)
        i = int(np.argmax(g_up))
        m_up = g_up[i]
        g_low = np.where(low, -G, np.inf)
        gap = m_up - float(g_low.min())
        if gap <= tol:
            break
        if it >= max_iter:
            raise ConvergenceError(
                f"SMO stopped after {it} pair updates with KKT violation {gap:.3e}", violation=gap)
        # second index by the largest guaranteed objective decrease
        b = m_up + G
        quad = diag[i] + diag - 2.0 * K[i]
        quad = np.where(quad > 1e-12, quad, 1e-12)
        cand = low & (b > 0)
        gain = np.where(cand, b * b / quad, -np.inf)
        j = int(np.argmax(gain))
        # move t of mass from j to i
        t = b[j] / quad[j]
        t = min(t, C - alpha[i], alpha[j])
        alpha[i] += t
        alpha[j] -= t
        G += t * (K[:, i] - K[:, j])
        it += 1
    alpha = np.clip(alpha, 0.0, C)
    alpha /= alpha.sum()
    alpha, rho = _polish(K, alpha, C, tol)
    return alpha, rho, {"kkt_violation": float(gap), "pair_updates": it}


def _rho_from(G, alpha, C):
    eps = 1e-12 * C
    free = (alpha > eps) & (alpha < C - eps)
    if free.any():
        return float(G[free].mean())
    at_upper = alpha >= C - eps
    lb = float(G[at_upper].max()) if at_upper.any() else -np.inf
    ub = float(G[~at_upper].min()) if (~at_upper).any() else np.inf
    if np.isfinite(lb) and np.isfinite(ub):
        return 0.5 * (lb + ub)
    return lb if np.isfinite(lb) else ub


def _polish(K, alpha, C, tol):
    """Re-solve the free variables exactly once SMO has fixed the active set.

    Takes the answer to machine precision so that it no longer depends on
    the order SMO visited the points in. Falls back to the SMO iterate when
    the exact solve leaves the box or breaks the KKT conditions.
    """
    eps = 1e-9 * C
    free = np.flatnonzero((alpha > eps) & (alpha < C - eps))
    upper = np.flatnonzero(alpha >= C - eps)
    if free.size == 0:
        return alpha, _rho_from(K @ alpha, alpha, C)
    fixed = np.zeros_like(alpha)
    fixed[upper] = C
    nf = free.size
    A = np.zeros((nf + 1, nf + 1))
    A[:nf, :nf] = K[np.ix_(free, free)]
    A[:nf, nf] = -1.0
    A[nf, :nf] = 1.0
    rhs = np.concatenate([-(K[free] @ fixed), [1.0 - fixed.sum()]])
    sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    cand = fixed.copy()
    cand[free] = sol[:nf]
    rho = float(sol[nf])
    f = K @ cand - rho
    ok = (cand[free].min() >= 0.0 and cand[free].max() <= C
          and abs(cand.sum() - 1.0) <= 1e-12
          and np.all(f[alpha <= eps] >= -tol) and np.all(f[upper] <= tol))
    if not ok:
        return alpha, _rho_from(K @ alpha, alpha, C)
    return cand, rho


def fit_ocsvm(features, nu: float = 0.1, gamma: Union[float, str] = "auto",
              kernel: str = "rbf") -> OcSvmModel:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be an (n, d) matrix, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise TooFewSamples(f"one-class SVM needs at least 2 training points, got {n}")
    if not 0.0 < nu <= 1.0:
        raise BadConfig(f"nu must lie in (0, 1], got {nu}")
    if kernel not in KERNELS:
        raise BadConfig(f"unknown kernel {kernel!r}")
    stats = StandardizationStats.fit(x)
    xs = stats.apply(x)
    if xs.shape[1] == 0:
        xs = np.zeros((n, 1))
        stats = StandardizationStats(stats.mean, stats.std, stats.keep)
    g = _resolve_gamma(gamma, xs)
    K = KERNELS[kernel](xs, xs, g)
    alpha, rho, info = smo_one_class(K, nu)
    info["dropped_dims"] = [int(i) for i in np.flatnonzero(~stats.keep)]
    return OcSvmModel(xs, alpha, rho, g, float(nu), stats, kernel, info)


def decision(model: OcSvmModel, x) -> Union[float, np.ndarray]:
    """``f(x)``: >= 0 inside the healthy boundary, < 0 outside."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = model.stats.apply(x)
    if model.stats.keep.sum() == 0:
        xs = np.zeros((xs.shape[0], 1))
    f = KERNELS[model.kernel](xs, model.support_vectors, model.gamma) @ model.alpha - model.rho
    return float(f[0]) if single else f


def anomaly_score(model: OcSvmModel, x):
    return -decision(model, x)


def log_relative_score(model: OcSvmModel, x) -> Union[float, np.ndarray]:
    """``log(rho) - log(sum_i alpha_i k(x, sv_i))`` for the RBF kernel.

    A strictly increasing function of the anomaly score ``-f`` (0 on the
    boundary, positive outside) that is scale-free across models. Unlike
    ``-f / rho`` it does not round to a constant once the kernel mass drops
    below float resolution, so far-away points stay ordered by distance.
    The linear kernel has no log form and gets ``-f / rho``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if model.kernel != "rbf":
        r = -np.atleast_1d(decision(model, x)) / model.rho
    else:
        xs = model.stats.apply(x)
        if model.stats.keep.sum() == 0:
            xs = np.zeros((xs.shape[0], 1))
        pos = model.alpha > 0
        log_k = -model.gamma * cdist(xs, model.support_vectors[pos], "sqeuclidean")
        r = math.log(model.rho) - logsumexp(log_k + np.log(model.alpha[pos]), axis=1)
    return float(r[0]) if single else r


def score_subject(model: OcSvmModel, per_crop_features: Sequence) -> float:
    """Median per-crop anomaly score."""
    feats = np.asarray(per_crop_features, dtype=np.float64)
    if feats.size == 0 or len(per_crop_features) == 0:
        raise TooFewSamples("a subject needs at least one crop to score")
    return float(np.median(np.atleast_1d(anomaly_score(model, np.atleast_2d(feats)))))


def kkt_report(model: OcSvmModel, tol: float = 1e-5) -> dict:
    """Dual feasibility, complementarity and the nu-property on the training set."""
    f = model.gram() @ model.alpha - model.rho
    a, C = model.alpha, model.upper_bound
    eps = 1e-10
    at_zero = a <= eps
    at_upper = a >= C - eps
    free = ~at_zero & ~at_upper
    n = a.size
    frac_out = float(np.mean(f < -1e-6))
    frac_sv = float(np.mean(a > 1e-6))
    return {
        "sum_alpha": float(a.sum()),
        "box_ok": bool(a.min() >= -1e-12 and a.max() <= C + 1e-12),
        "zero_ok": bool(np.all(f[at_zero] >= -tol)),
        "upper_ok": bool(np.all(f[at_upper] <= tol)),
        "free_ok": bool(np.all(np.abs(f[free]) <= tol)),
        "frac_outliers": frac_out,
        "frac_support": frac_sv,
        "nu_property": bool(frac_out <= model.nu + 1e-12 and model.nu <= frac_sv + 1e-12),
        "n": n,
    }


def save_model(model: OcSvmModel, path):
    header = {"kind": "ocsvm", "rho": model.rho, "gamma": model.gamma, "nu": model.nu,
              "kernel": model.kernel, "info": model.info}
    tensors = {"support_vectors": model.support_vectors, "alpha": model.alpha,
               "mean": model.stats.mean, "std": model.stats.std,
               "keep": model.stats.keep.astype(np.int64)}
    formats.save_container(path, header, {k: np.asarray(v) for k, v in tensors.items()})


def load_model(path) -> OcSvmModel:
    header, t = formats.load_container(path)
    if header.get("kind") != "ocsvm":
        raise BadCheckpoint(f"{path}: container kind {header.get('kind')!r} is not 'ocsvm'")
    try:
        stats = StandardizationStats(t["mean"], t["std"], t["keep"].astype(bool))
        return OcSvmModel(t["support_vectors"], t["alpha"], header["rho"], header["gamma"],
                          header["nu"], stats, header["kernel"], header.get("info", {}))
    except KeyError as exc:
        raise BadCheckpoint(f"{path}: missing field {exc}") from exc

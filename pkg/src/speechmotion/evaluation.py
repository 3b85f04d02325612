"""Subject-independent leave-one-out evaluation, ROC/AUC and report files.

Each round holds out one healthy subject, trains a translator on the other
healthy subjects, fits the one-class SVM on reconstruction features and
scores the held-out subject plus every patient. Rounds share nothing, so
they can run in worker processes; results are merged by round index.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import detector as det
from .dsp import MelConfig, invert_mel, sliding_crops
from .errors import BadConfig, BadManifest, IoError, RoundFailed, SingleClassError
from .metrics import MetricReport, corr2d, log_spectral_distance, pesq_lite
from .oracle import fit_ridge
from .synthdata import HEALTHY, PATIENT, Manifest
from .translator import (VARIANTS, Example, ModelConfig, TrainConfig, init_model, predict,
                         prepare_examples, train)

log = logging.getLogger(__name__)

FPR_GRID = np.linspace(0.0, 1.0, 101)
BACKENDS = ("translator", "ridge")


@dataclass(frozen=True)
class DetectorConfig:
    nu: float = 0.1
    gamma: Union[float, str] = "auto"
    kernel: str = "rbf"
    feature_mode: str = "quality"
    aggregation: str = "median"
    # "in-sample": fit on the translator's own training subjects;
    # "held-out": withhold `holdout` training subjects from the translator and fit on them
    svm_fit: str = "in-sample"
    holdout: int = 3

    def validate(self):
        if not 0.0 < self.nu <= 1.0:
            raise BadConfig(f"nu must lie in (0, 1], got {self.nu}")
        if not (self.gamma == "auto" or (isinstance(self.gamma, (int, float)) and self.gamma > 0)):
            raise BadConfig(f"gamma must be positive or 'auto', got {self.gamma!r}")
        if self.kernel not in det.KERNELS:
            raise BadConfig(f"unknown kernel {self.kernel!r}")
        if self.feature_mode not in ("quality", "raw"):
            raise BadConfig(f"unknown feature mode {self.feature_mode!r}")
        if self.aggregation not in ("median", "mean"):
            raise BadConfig(f"unknown aggregation {self.aggregation!r}")
        if self.svm_fit not in ("in-sample", "held-out"):
            raise BadConfig(f"svm_fit must be 'in-sample' or 'held-out', got {self.svm_fit!r}")
        if self.holdout < 1:
            raise BadConfig(f"holdout must be >= 1, got {self.holdout}")
        return self


@dataclass(frozen=True)
class EvalConfig:
    out_dir: str = "runs/default"
    jobs: int = 1
    variants: Tuple[str, ...] = ("Cnn",)
    backend: str = "translator"
    gl_iterations: int = 60
    gl_seed: int = 0
    oracle: bool = True
    ridge_lambda: float = 1e-2

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))

    def validate(self):
        if self.jobs < 1:
            raise BadConfig(f"jobs must be >= 1, got {self.jobs}")
        if not self.variants or any(v not in VARIANTS for v in self.variants):
            raise BadConfig(f"variants must be a non-empty subset of {VARIANTS}, got {self.variants}")
        if self.backend not in BACKENDS:
            raise BadConfig(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.gl_iterations < 0:
            raise BadConfig(f"gl_iterations must be >= 0, got {self.gl_iterations}")
        if self.ridge_lambda < 0:
            raise BadConfig(f"ridge_lambda must be >= 0, got {self.ridge_lambda}")
        return self


# -- ROC / AUC --------------------------------------------------------------

@dataclass(frozen=True)
class RocCurve:
    fpr: Tuple[float, ...]
    tpr: Tuple[float, ...]
    thresholds: Tuple[float, ...]

    def tpr_at(self, grid: np.ndarray) -> np.ndarray:
        """TPR on an FPR grid; vertical steps resolve to their top, slopes interpolate."""
        fpr, tpr = np.asarray(self.fpr), np.asarray(self.tpr)
        out = np.empty(len(grid))
        for n, f in enumerate(grid):
            i = int(np.searchsorted(fpr, f, side="right")) - 1
            if i >= len(fpr) - 1 or fpr[i] == f:
                out[n] = tpr[i]
            else:
                t = (f - fpr[i]) / (fpr[i + 1] - fpr[i])
                out[n] = tpr[i] + t * (tpr[i + 1] - tpr[i])
        return out


def _is_patient(label) -> bool:
    if isinstance(label, (bool, np.bool_)):
        return bool(label)
    if label in (PATIENT, 1):
        return True
    if label in (HEALTHY, 0):
        return False
    raise BadConfig(f"unknown label {label!r}")


def roc(scores: Sequence[float], labels: Sequence) -> RocCurve:
    """Sweep every distinct anomaly score as a threshold; patients are positives.

    Equal scores form a single step, which gives a diagonal segment when
    the tie mixes classes.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.array([_is_patient(l) for l in labels], dtype=bool)
    if s.shape != y.shape:
        raise BadConfig(f"{s.size} scores but {y.size} labels")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("ROC needs both healthy and patient scores")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    fpr, tpr, thr = [0.0], [0.0], [math.inf]
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[j] == s[i]:
            j += 1
        tp += int(y[i:j].sum())
        fp += (j - i) - int(y[i:j].sum())
        fpr.append(fp / n_neg)
        tpr.append(tp / n_pos)
        thr.append(float(s[i]))
        i = j
    return RocCurve(tuple(fpr), tuple(tpr), tuple(thr))


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    f, t = curve.fpr, curve.tpr
    return float(sum((f[i + 1] - f[i]) * (t[i + 1] + t[i]) / 2.0 for i in range(len(f) - 1)))


def mann_whitney_auc(scores: Sequence[float], labels: Sequence) -> float:
    """P(patient score > healthy score) + 1/2 P(tie), by explicit pair count."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.array([_is_patient(l) for l in labels], dtype=bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise SingleClassError("AUC needs both healthy and patient scores")
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


def vertical_average(curves: Sequence[RocCurve], grid: np.ndarray = FPR_GRID):
    """Mean and std of TPR across curves at fixed FPR points."""
    tprs = np.stack([c.tpr_at(grid) for c in curves])
    return tprs.mean(axis=0), tprs.std(axis=0)


# -- results ----------------------------------------------------------------

@dataclass
class RoundResult:
    index: int
    heldout: str
    reports: List[MetricReport]
    scores: Dict[str, float]
    baseline: Dict[str, float]  # -median crop Corr2D, the raw-threshold score
    labels: Dict[str, str]
    svm: dict = field(default_factory=dict)
    # median crop log-relative score; comparable across rounds, used for pooling
    relative: Dict[str, float] = field(default_factory=dict)
    train_loss: List[float] = field(default_factory=list)
    seconds: float = 0.0

    def curve(self) -> RocCurve:
        ids = sorted(self.scores)
        return roc([self.scores[i] for i in ids], [self.labels[i] for i in ids])

    def subject_mean(self, sid: str, metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.reports if r.subject_id == sid]))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["reports"] = [dataclasses.asdict(r) for r in self.reports]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoundResult":
        d = dict(d)
        d["reports"] = [MetricReport(**r) for r in d["reports"]]
        return cls(**d)


@dataclass
class EvaluationReport:
    variant: str
    backend: str
    rounds: List[RoundResult]
    oracle_auc: Optional[float] = None
    config: dict = field(default_factory=dict)

    def _pooled(self, use_baseline=False, relative=True):
        scores, labels = [], []
        for r in self.rounds:
            src = r.baseline if use_baseline else (r.relative if relative else r.scores)
            for sid in sorted(src):
                scores.append(src[sid])
                labels.append(r.labels[sid])
        return scores, labels

    @property
    def pooled_curve(self) -> RocCurve:
        return roc(*self._pooled())

    @property
    def pooled_auc(self) -> float:
        return auc(self.pooled_curve)

    @property
    def raw_pooled_auc(self) -> float:
        """Pooled AUC of the raw -f scores; each round's SVM has its own scale."""
        return auc(roc(*self._pooled(relative=False)))

    @property
    def baseline_auc(self) -> float:
        return auc(roc(*self._pooled(use_baseline=True)))

    @property
    def patient_averaged_auc(self) -> float:
        """Each patient's score averaged over rounds, against every held-out healthy score."""
        pids = sorted({sid for r in self.rounds for sid, l in r.labels.items() if l == PATIENT})
        healthy = [r.relative[r.heldout] for r in self.rounds]
        patients = [float(np.mean([r.relative[p] for r in self.rounds])) for p in pids]
        return auc(roc(healthy + patients, [HEALTHY] * len(healthy) + [PATIENT] * len(patients)))

    @property
    def round_aucs(self) -> List[float]:
        return [auc(r.curve()) for r in self.rounds]

    def mean_roc(self):
        return vertical_average([r.curve() for r in self.rounds])

    def cohort_values(self, cohort: str, metric: str) -> List[float]:
        """Per (round, subject) crop-averaged metric for one cohort."""
        out = []
        for r in self.rounds:
            for sid in sorted(r.labels):
                if r.labels[sid] == cohort:
                    out.append(r.subject_mean(sid, metric))
        return out

    def table(self) -> List[dict]:
        rows = []
        for cohort in (HEALTHY, PATIENT):
            row = {"variant": self.variant, "cohort": cohort}
            for m in ("corr2d", "pesq_lite"):
                v = np.asarray(self.cohort_values(cohort, m))
                row["n"] = int(v.size)
                row[f"{m}_mean"] = float(v.mean())
                row[f"{m}_std"] = float(v.std())
            rows.append(row)
        return rows

    def corr2d_gap(self) -> float:
        return float(np.mean(self.cohort_values(HEALTHY, "corr2d")) - np.mean(self.cohort_values(PATIENT, "corr2d")))

    def to_dict(self) -> dict:
        return {"variant": self.variant, "backend": self.backend, "oracle_auc": self.oracle_auc,
                "config": self.config, "rounds": [r.to_dict() for r in self.rounds],
                "pooled_auc": self.pooled_auc, "raw_pooled_auc": self.raw_pooled_auc,
                "baseline_auc": self.baseline_auc,
                "patient_averaged_auc": self.patient_averaged_auc, "round_aucs": self.round_aucs}

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(d["variant"], d["backend"], [RoundResult.from_dict(r) for r in d["rounds"]],
                   d.get("oracle_auc"), d.get("config", {}))


# -- protocol ---------------------------------------------------------------

@dataclass
class _Context:
    examples: List[Example]
    train_cfg: TrainConfig
    det_cfg: DetectorConfig
    eval_cfg: EvalConfig
    mel: MelConfig
    model_cfg: ModelConfig


_WORKER_CTX: Optional[_Context] = None


def _set_worker_ctx(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _worker(args):
    index, variant, backend, with_pesq = args
    return _run_round(_WORKER_CTX, index, variant, backend, with_pesq)


def _fit_predictor(ctx: _Context, train_set: List[Example], variant: str, backend: str):
    if backend == "ridge":
        oracle = fit_ridge(train_set, ctx.eval_cfg.ridge_lambda)
        return oracle.predict, []
    tc = dataclasses.replace(ctx.train_cfg, variant=variant)
    model = init_model(variant, ctx.model_cfg, tc.seed)
    model, hist = train(model, train_set, tc, ctx.mel)
    return (lambda frames: predict(model, frames)), hist.loss


def _features(pred, targets, mode):
    return [det.extract_features(pred, t, mode=mode) for t in targets]


def _run_round(ctx: _Context, index: int, variant: str, backend: str, with_pesq: bool) -> RoundResult:
    t0 = time.perf_counter()
    healthy = [ex for ex in ctx.examples if ex.label == HEALTHY]
    patients = [ex for ex in ctx.examples if ex.label == PATIENT]
    held = healthy[index]
    train_pool = [ex for ex in healthy if ex.subject_id != held.subject_id]
    dc = ctx.det_cfg
    if dc.svm_fit == "held-out":
        if dc.holdout >= len(train_pool):
            raise BadConfig(f"holdout {dc.holdout} leaves no translator training subjects")
        rng = np.random.default_rng([int(ctx.train_cfg.seed) & 0xFFFFFFFF, index])
        pick = set(int(i) for i in rng.choice(len(train_pool), dc.holdout, replace=False))
        svm_set = [ex for i, ex in enumerate(train_pool) if i in pick]
        tr_set = [ex for i, ex in enumerate(train_pool) if i not in pick]
    else:
        tr_set = svm_set = train_pool

    predictor, losses = _fit_predictor(ctx, tr_set, variant, backend)
    feats = [f for ex in svm_set for f in _features(predictor(ex.motion), ex.targets, dc.feature_mode)]
    model = det.fit_ocsvm(feats, dc.nu, dc.gamma, dc.kernel)
    kkt = det.kkt_report(model)
    if not kkt["nu_property"]:
        raise BadConfig(f"nu-property violated on round {index}: {kkt}")

    reports, scores, baseline, labels, relative = [], {}, {}, {}, {}
    for ex in [held] + patients:
        pred = predictor(ex.motion)
        fs = _features(pred, ex.targets, dc.feature_mode)
        crop_scores = np.atleast_1d(det.anomaly_score(model, np.asarray(fs)))
        if dc.aggregation == "median":
            scores[ex.subject_id] = det.score_subject(model, fs)
        else:
            scores[ex.subject_id] = float(np.mean(crop_scores))
        relative[ex.subject_id] = float(np.median(np.atleast_1d(det.log_relative_score(model, np.asarray(fs)))))
        labels[ex.subject_id] = ex.label
        corrs = [corr2d(pred, t) for t in ex.targets]
        baseline[ex.subject_id] = -float(np.median(corrs))
        if not with_pesq:
            continue  # score-only round, used for the oracle yardstick
        pesqs = _pesq_scores(ctx, pred, ex)
        for c, (t, r, q) in enumerate(zip(ex.targets, corrs, pesqs)):
            reports.append(MetricReport(ex.subject_id, c, r, log_spectral_distance(pred, t), q))
    svm_info = {"rho": model.rho, "gamma": model.gamma, "n_support": int((model.alpha > 1e-8).sum()),
                "frac_outliers": kkt["frac_outliers"], "frac_support": kkt["frac_support"],
                "nu_property": kkt["nu_property"], "iterations": model.info.get("iterations")}
    return RoundResult(index, held.subject_id, reports, scores, baseline, labels, svm_info, relative,
                       [float(v) for v in losses], time.perf_counter() - t0)


def _pesq_scores(ctx: _Context, pred, ex: Example) -> List[float]:
    if ex.audio is None:
        raise BadConfig(f"{ex.subject_id}: no waveform available for pesq_lite")
    wave = invert_mel(pred, ctx.eval_cfg.gl_iterations, seed=ctx.eval_cfg.gl_seed, cfg=ctx.mel)
    crops = sliding_crops(ex.audio, ctx.train_cfg.crop_len, len(ex.targets))
    return [pesq_lite(c, wave, ctx.mel) for c in crops]


def _run_rounds(ctx: _Context, variant: str, backend: str, with_pesq: bool) -> List[RoundResult]:
    n = sum(ex.label == HEALTHY for ex in ctx.examples)
    tasks = [(i, variant, backend, with_pesq) for i in range(n)]
    results: List[RoundResult] = []
    if ctx.eval_cfg.jobs == 1:
        for t in tasks:
            try:
                res = _run_round(ctx, *t)
            except Exception as exc:
                raise RoundFailed(t[0], exc) from exc
            log.info("%s/%s round %d/%d (%s) done in %.1fs", variant, backend, t[0] + 1, n,
                     res.heldout, res.seconds)
            results.append(res)
    else:
        with ProcessPoolExecutor(ctx.eval_cfg.jobs, initializer=_set_worker_ctx, initargs=(ctx,)) as pool:
            futures = [pool.submit(_worker, t) for t in tasks]
            for t, fut in zip(tasks, futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    raise RoundFailed(t[0], exc) from exc
    return sorted(results, key=lambda r: r.index)


def check_manifest(manifest: Manifest):
    if len(manifest.healthy) < 3:
        raise BadManifest(f"leave-one-out needs at least 3 healthy subjects, got {len(manifest.healthy)}")
    if len(manifest.patients) < 1:
        raise BadManifest("leave-one-out needs at least one patient for the ROC")


def _context(manifest, train_cfg, detector_cfg, eval_cfg, mel, examples) -> _Context:
    check_manifest(manifest)
    train_cfg.validate()
    detector_cfg.validate()
    eval_cfg.validate()
    if examples is None:
        examples = prepare_examples(manifest, train_cfg.crops, train_cfg.crop_len, mel)
    # subject-id order, so reordering the manifest changes nothing
    examples = sorted(examples, key=lambda ex: ex.subject_id)
    frames = examples[0].motion.shape
    model_cfg = ModelConfig(frames=frames[0], grid=frames[1:4], n_mels=mel.n_mels, n_time=mel.n_time)
    return _Context(examples, train_cfg, detector_cfg, eval_cfg, mel, model_cfg)


def _config_dict(ctx: _Context) -> dict:
    return {"train": dataclasses.asdict(ctx.train_cfg), "detector": dataclasses.asdict(ctx.det_cfg),
            "eval": dataclasses.asdict(ctx.eval_cfg), "dsp": ctx.mel.fingerprint()}


def _oracle_auc(ctx: _Context) -> Optional[float]:
    if not ctx.eval_cfg.oracle or ctx.eval_cfg.backend == "ridge":
        return None
    return EvaluationReport("ridge", "ridge", _run_rounds(ctx, "Cnn", "ridge", False)).pooled_auc


def _variant_report(ctx: _Context, variant: str, oracle_auc) -> EvaluationReport:
    backend = ctx.eval_cfg.backend
    rounds = _run_rounds(ctx, variant, backend, True)
    name = variant if backend == "translator" else "ridge"
    rep = EvaluationReport(name, backend, rounds, oracle_auc, _config_dict(ctx))
    if backend == "ridge":
        rep.oracle_auc = rep.pooled_auc
    return rep


def loo_protocol(manifest: Manifest, train_cfg: TrainConfig = TrainConfig(),
                 detector_cfg: DetectorConfig = DetectorConfig(), out_dir=None, *,
                 eval_cfg: EvalConfig = EvalConfig(), mel: MelConfig = MelConfig(),
                 examples: Optional[List[Example]] = None) -> EvaluationReport:
    """One leave-one-out pass for ``train_cfg.variant``; rendered to ``out_dir`` when given."""
    ctx = _context(manifest, train_cfg, detector_cfg, eval_cfg, mel, examples)
    rep = _variant_report(ctx, train_cfg.variant, _oracle_auc(ctx))
    if out_dir is not None:
        render_report([rep], out_dir)
    return rep


def loo_variants(manifest: Manifest, train_cfg: TrainConfig = TrainConfig(),
                 detector_cfg: DetectorConfig = DetectorConfig(), out_dir=None, *,
                 eval_cfg: EvalConfig = EvalConfig(), mel: MelConfig = MelConfig(),
                 examples: Optional[List[Example]] = None) -> List[EvaluationReport]:
    """Leave-one-out for every variant in ``eval_cfg.variants``, sharing data and the oracle."""
    ctx = _context(manifest, train_cfg, detector_cfg, eval_cfg, mel, examples)
    oracle_auc = _oracle_auc(ctx)
    reports = [_variant_report(ctx, v, oracle_auc) for v in eval_cfg.variants]
    if out_dir is not None:
        render_report(reports, out_dir)
    return reports


# -- rendering --------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _csv(rows: List[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def _write(path: Path, text: str):
    try:
        path.write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write report file ({exc.strerror})", path) from exc


def summary_csv(reports: Sequence[EvaluationReport]) -> str:
    rows = [["variant", "cohort", "n", "corr2d_mean", "corr2d_std", "pesq_lite_mean", "pesq_lite_std"]]
    for rep in reports:
        for r in rep.table():
            rows.append([r["variant"], r["cohort"], r["n"], _fmt(r["corr2d_mean"]), _fmt(r["corr2d_std"]),
                         _fmt(r["pesq_lite_mean"]), _fmt(r["pesq_lite_std"])])
    return _csv(rows)


def metrics_csv(reports: Sequence[EvaluationReport]) -> str:
    rows = [["variant", "round", "subject_id", "label", "crop_index", "corr2d", "lsd_db", "pesq_lite"]]
    for rep in reports:
        for r in rep.rounds:
            for m in r.reports:
                rows.append([rep.variant, r.index, m.subject_id, r.labels[m.subject_id], m.crop_index,
                             _fmt(m.corr2d), _fmt(m.lsd_db), _fmt(m.pesq_lite)])
    return _csv(rows)


def scores_csv(reports: Sequence[EvaluationReport]) -> str:
    rows = [["variant", "round", "heldout", "subject_id", "label", "svm_score", "relative_score",
             "threshold_score"]]
    for rep in reports:
        for r in rep.rounds:
            rel = r.relative
            for sid in sorted(r.scores):
                rows.append([rep.variant, r.index, r.heldout, sid, r.labels[sid],
                             repr(r.scores[sid]), repr(rel[sid]), repr(r.baseline[sid])])
    return _csv(rows)


def auc_csv(reports: Sequence[EvaluationReport]) -> str:
    rows = [["variant", "svm_auc", "raw_svm_auc", "threshold_auc", "patient_averaged_auc", "mean_round_auc",
             "oracle_auc"]]
    for rep in reports:
        oa = "" if rep.oracle_auc is None else _fmt(rep.oracle_auc)
        rows.append([rep.variant, _fmt(rep.pooled_auc), _fmt(rep.raw_pooled_auc), _fmt(rep.baseline_auc),
                     _fmt(rep.patient_averaged_auc),
                     _fmt(float(np.mean(rep.round_aucs))), oa])
    return _csv(rows)


def roc_svg(reports: Sequence[EvaluationReport]) -> str:
    """Static SVG, one panel per variant: mean ROC, +-1 std band, chance diagonal."""
    size, margin = 300, 50
    width = len(reports) * (size + 2 * margin)
    height = size + 2 * margin
    out = [f'<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">']
    for k, rep in enumerate(reports):
        ox = k * (size + 2 * margin) + margin
        oy = margin

        def pt(f, t):
            return f"{ox + f * size:.2f},{oy + (1 - t) * size:.2f}"

        mean, std = rep.mean_roc()
        upper = np.clip(mean + std, 0, 1)
        lower = np.clip(mean - std, 0, 1)
        band = [pt(f, t) for f, t in zip(FPR_GRID, upper)] + [pt(f, t) for f, t in zip(FPR_GRID[::-1], lower[::-1])]
        out.append(f'<g id="panel-{rep.variant}">')
        out.append(f'<rect x="{ox}" y="{oy}" width="{size}" height="{size}" fill="none" stroke="black"/>')
        out.append(f'<polygon class="std-band" points="{" ".join(band)}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>')
        out.append(f'<line class="chance" x1="{ox}" y1="{oy + size}" x2="{ox + size}" y2="{oy}" '
                   f'stroke="gray" stroke-dasharray="5,4"/>')
        curve = " ".join(pt(f, t) for f, t in zip(FPR_GRID, mean))
        out.append(f'<polyline class="mean-roc" points="{curve}" fill="none" stroke="#08519c" stroke-width="2"/>')
        out.append(f'<text x="{ox + size / 2}" y="{oy - 18}" text-anchor="middle">{rep.variant}</text>')
        out.append(f'<text x="{ox + size - 8}" y="{oy + size - 10}" text-anchor="end">'
                   f'AUC = {rep.pooled_auc:.3f} (chance 0.5)</text>')
        out.append(f'<text x="{ox + size / 2}" y="{oy + size + 32}" text-anchor="middle">False positive rate</text>')
        out.append(f'<text x="{ox - 32}" y="{oy + size / 2}" text-anchor="middle" '
                   f'transform="rotate(-90 {ox - 32} {oy + size / 2})">True positive rate</text>')
        for v in (0.0, 0.5, 1.0):
            out.append(f'<text x="{ox + v * size}" y="{oy + size + 15}" text-anchor="middle">{v:.1f}</text>')
            out.append(f'<text x="{ox - 6}" y="{oy + (1 - v) * size + 4}" text-anchor="end">{v:.1f}</text>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def report_json(reports: Sequence[EvaluationReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True) + "\n"


def load_report(path) -> List[EvaluationReport]:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read report ({exc.strerror})", path) from exc
    return [EvaluationReport.from_dict(d) for d in raw]


def render_report(reports, out_dir) -> Dict[str, Path]:
    """Write metrics.csv, summary.csv, scores.csv, auc.csv, roc.svg and report.json."""
    if isinstance(reports, EvaluationReport):
        reports = [reports]
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create report directory ({exc.strerror})", out) from exc
    files = {
        "metrics.csv": metrics_csv(reports),
        "summary.csv": summary_csv(reports),
        "scores.csv": scores_csv(reports),
        "auc.csv": auc_csv(reports),
        "roc.svg": roc_svg(reports),
        "report.json": report_json(reports),
    }
    paths = {}
    for name, text in files.items():
        _write(out / name, text)
        paths[name] = out / name
    return paths

"""Command-line entry point: ``speechmotion <command> [--config FILE] [flags]``.

Flags override config-file fields, which override built-in defaults. Exit
codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import traceback
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from . import detector as det
from . import evaluation as ev
from . import formats
from .config import RunConfig, load_config, write_run_manifest
from .dsp import invert_mel, sliding_crops
from .errors import BadConfig, IoError, SpeechMotionError
from .metrics import MetricReport, corr2d, log_spectral_distance, pesq_lite, write_reports_csv
from .synthdata import HEALTHY, Manifest, load_subject, make_dataset
from .translator import (VARIANTS, ModelConfig, init_model, load_checkpoint, predict, prepare_examples,
                         save_checkpoint, train)

log = logging.getLogger("speechmotion")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    # flags whose default lives in the config spell it out in their help text
    def _get_help_string(self, action):
        if "default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _error_name(exc: BaseException) -> str:
    """``module.ErrorName`` using the innermost package frame that raised it."""
    module = "speechmotion"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        name = frame.f_globals.get("__name__", "")
        if name.startswith("speechmotion.") and name != "speechmotion.cli":
            module = name.split(".", 1)[1]
    return f"{module}.{type(exc).__name__}"


# -- argument definitions ----------------------------------------------------

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="run configuration JSON; flags override its fields")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _train_flags(p: argparse.ArgumentParser):
    p.add_argument("--variant", choices=VARIANTS, help="translator temporal head (config: train.variant, default Cnn)")
    p.add_argument("--epochs", type=int, help="training epochs (config: train.epochs, default 200)")
    p.add_argument("--lr", type=float, help="Adam learning rate (config: train.lr, default 0.001)")
    p.add_argument("--batch-size", type=int, help="crops per step (config: train.batch_size, default 4)")
    p.add_argument("--crops", type=int, help="crops per recording (config: train.crops, default 10)")
    p.add_argument("--seed", type=int, help="training seed (config: train.seed, default 0)")


def _detector_flags(p: argparse.ArgumentParser):
    p.add_argument("--nu", type=float, help="one-class SVM nu (config: detector.nu, default 0.1)")
    p.add_argument("--gamma", help="RBF width or 'auto' (config: detector.gamma, default auto)")
    p.add_argument("--feature-mode", choices=("quality", "raw"),
                   help="per-crop features (config: detector.feature_mode, default quality)")
    p.add_argument("--aggregation", choices=("median", "mean"),
                   help="crop score pooling (config: detector.aggregation, default median)")
    p.add_argument("--svm-fit", choices=("in-sample", "held-out"),
                   help="SVM training features (config: detector.svm_fit, default in-sample)")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="speechmotion", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic cohort", formatter_class=fmt)
    _common(p)
    p.add_argument("--out", default="data/synth", help="dataset directory")
    p.add_argument("--healthy", type=int, help="healthy subjects (config: data.n_healthy, default 12)")
    p.add_argument("--patients", type=int, help="patients (config: data.n_patients, default 3)")
    p.add_argument("--severity", type=float, help="patient coupling shift (config: data.severity, default 0.5)")
    p.add_argument("--seed", type=int, help="corpus seed (config: data.seed, default 0)")

    p = sub.add_parser("train", help="train a translator on the healthy subjects of a manifest", formatter_class=fmt)
    _common(p)
    p.add_argument("--manifest", required=True, help="manifest.json from synth")
    p.add_argument("--out", default="translator.anck", help="checkpoint path")
    p.add_argument("--exclude", nargs="*", default=[], help="healthy subject ids to leave out")
    _train_flags(p)

    p = sub.add_parser("translate", help="predict a spectrogram from one motion file", formatter_class=fmt)
    _common(p)
    p.add_argument("--checkpoint", required=True, help="translator checkpoint")
    p.add_argument("--motion", required=True, help="MFLD motion file")
    p.add_argument("--out", default="prediction.mspc", help="output spectrogram file")
    p.add_argument("--wav", help="also write a Griffin-Lim waveform here")

    p = sub.add_parser("evaluate", help="per-crop metrics of a checkpoint over a manifest", formatter_class=fmt)
    _common(p)
    p.add_argument("--checkpoint", required=True, help="translator checkpoint")
    p.add_argument("--manifest", required=True, help="manifest.json")
    p.add_argument("--out", default="metrics.csv", help="metrics CSV")
    p.add_argument("--no-pesq", action="store_true", help="skip waveform inversion and pesq_lite")

    p = sub.add_parser("detect", help="fit the one-class SVM and score subjects", formatter_class=fmt)
    _common(p)
    p.add_argument("--checkpoint", required=True, help="translator checkpoint")
    p.add_argument("--manifest", required=True, help="manifest.json")
    p.add_argument("--fit", nargs="*", help="subject ids for fitting (default: the checkpoint's training subjects)")
    p.add_argument("--model-out", default="detector.anck", help="fitted SVM path")
    p.add_argument("--out", default="scores.csv", help="anomaly scores CSV")
    _detector_flags(p)

    p = sub.add_parser("loo", help="full leave-one-out protocol", formatter_class=fmt)
    _common(p)
    p.add_argument("--manifest", help="manifest.json (default: synthesize the configured corpus under OUT/data)")
    p.add_argument("--out", help="run directory (config: eval.out_dir, default runs/default)")
    p.add_argument("--variants", nargs="+", choices=VARIANTS, help="backbones (config: eval.variants, default Cnn)")
    p.add_argument("--jobs", type=int, help="parallel rounds (config: eval.jobs, default 1)")
    p.add_argument("--backend", choices=ev.BACKENDS, help="predictor (config: eval.backend, default translator)")
    p.add_argument("--no-oracle", action="store_true", help="skip the ridge-oracle AUC")
    _train_flags(p)
    _detector_flags(p)

    p = sub.add_parser("report", help="re-render report files from a saved report.json", formatter_class=fmt)
    _common(p)
    p.add_argument("--report", required=True, help="report.json written by loo")
    p.add_argument("--out", required=True, help="output directory")
    return parser


# -- config resolution -------------------------------------------------------

def _gamma(value):
    if value is None or value == "auto":
        return value
    try:
        return float(value)
    except ValueError:
        raise UsageError(f"--gamma must be a number or 'auto', got {value!r}") from None


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    g = lambda name: getattr(args, name, None)
    cfg = cfg.override("data", n_healthy=g("healthy"), n_patients=g("patients"), severity=g("severity"),
                       seed=g("seed") if args.command == "synth" else None)
    if args.command != "synth":
        cfg = cfg.override("train", variant=g("variant"), epochs=g("epochs"), lr=g("lr"),
                           batch_size=g("batch_size"), crops=g("crops"), seed=g("seed"))
    cfg = cfg.override("detector", nu=g("nu"), gamma=_gamma(g("gamma")), feature_mode=g("feature_mode"),
                       aggregation=g("aggregation"), svm_fit=g("svm_fit"))
    variants = tuple(g("variants")) if g("variants") else None
    cfg = cfg.override("eval", out_dir=g("out") if args.command == "loo" else None, jobs=g("jobs"),
                       variants=variants, backend=g("backend"), oracle=False if g("no_oracle") else None)
    return cfg.validate()


# -- commands ----------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    m = make_dataset(cfg.data, args.out)
    write_run_manifest(args.out, "synth", cfg, argv=args.argv)
    print(f"wrote {len(m.healthy)} healthy and {len(m.patients)} patient subjects to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    m = Manifest.load(args.manifest)
    skip = set(args.exclude)
    entries = [e for e in m.healthy if e.subject_id not in skip]
    if not entries:
        raise BadConfig("no healthy subjects left to train on")
    examples = prepare_examples(m, cfg.train.crops, cfg.train.crop_len, cfg.dsp, entries)
    shape = examples[0].motion.shape
    model_cfg = ModelConfig(frames=shape[0], grid=shape[1:4], n_mels=cfg.dsp.n_mels, n_time=cfg.dsp.n_time)
    model = init_model(cfg.train.variant, model_cfg, cfg.train.seed)
    model, hist = train(model, examples, cfg.train, cfg.dsp,
                        log=lambda e, l: log.info("epoch %d loss %.6f", e + 1, l))
    save_checkpoint(model, args.out)
    write_run_manifest(Path(args.out).parent, "train", cfg, {"checkpoint": str(args.out)}, args.argv)
    print(f"trained {model.variant} on {len(examples)} subjects, final loss {hist.loss[-1]:.6f}; wrote {args.out}")
    return EXIT_OK


def cmd_translate(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.checkpoint)
    frames = formats.load_motion(args.motion)
    spec = predict(model, frames)
    formats.save_spectrogram(args.out, spec.values, spec.norm)
    if args.wav:
        wave = invert_mel(spec, cfg.eval.gl_iterations, seed=cfg.eval.gl_seed, cfg=cfg.dsp)
        formats.write_wav(args.wav, wave.samples, wave.sample_rate)
    print(f"wrote {args.out}")
    return EXIT_OK


def _subject_metrics(model, m: Manifest, entry, cfg: RunConfig, with_pesq: bool) -> List[MetricReport]:
    ex = prepare_examples(m, cfg.train.crops, cfg.train.crop_len, cfg.dsp, [entry])[0]
    pred = predict(model, ex.motion)
    if with_pesq:
        wave = invert_mel(pred, cfg.eval.gl_iterations, seed=cfg.eval.gl_seed, cfg=cfg.dsp)
        pesqs = [pesq_lite(c, wave, cfg.dsp) for c in sliding_crops(ex.audio, cfg.train.crop_len, len(ex.targets))]
    else:
        pesqs = [4.5] * len(ex.targets)
    return [MetricReport(ex.subject_id, i, corr2d(pred, t), log_spectral_distance(pred, t), q)
            for i, (t, q) in enumerate(zip(ex.targets, pesqs))]


def cmd_evaluate(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.checkpoint)
    m = Manifest.load(args.manifest)
    reports = [r for e in m.entries for r in _subject_metrics(model, m, e, cfg, not args.no_pesq)]
    write_reports_csv(args.out, reports)
    for label in (HEALTHY, "patient"):
        ids = {e.subject_id for e in m.entries if e.label == label}
        vals = [r.corr2d for r in reports if r.subject_id in ids]
        if vals:
            print(f"{label}: mean corr2d {np.mean(vals):.4f} over {len(ids)} subjects")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_detect(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.checkpoint)
    m = Manifest.load(args.manifest)
    fit_ids = args.fit if args.fit else model.meta.get("subjects", [])
    if not fit_ids:
        raise BadConfig("no fitting subjects: pass --fit or use a trained checkpoint")
    known = {e.subject_id for e in m.entries}
    missing = sorted(set(fit_ids) - known)
    if missing:
        raise BadConfig(f"fitting subjects not in manifest: {missing}")
    examples = prepare_examples(m, cfg.train.crops, cfg.train.crop_len, cfg.dsp)
    mode = cfg.detector.feature_mode
    feats = {ex.subject_id: [det.extract_features(predict(model, ex.motion), t, mode=mode) for t in ex.targets]
             for ex in examples}
    svm = det.fit_ocsvm([f for sid in fit_ids for f in feats[sid]], cfg.detector.nu, cfg.detector.gamma,
                        cfg.detector.kernel)
    det.save_model(svm, args.model_out)
    try:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "label", "in_fit", "anomaly_score"])
            for ex in examples:
                w.writerow([ex.subject_id, ex.label, int(ex.subject_id in fit_ids),
                            repr(det.score_subject(svm, feats[ex.subject_id]))])
    except OSError as exc:
        raise IoError(f"cannot write scores ({exc.strerror})", args.out) from exc
    print(f"fitted on {len(fit_ids)} subjects; wrote {args.model_out} and {args.out}")
    return EXIT_OK


def cmd_loo(args, cfg: RunConfig) -> int:
    out = Path(cfg.eval.out_dir)
    if args.manifest:
        m = Manifest.load(args.manifest)
    else:
        m = make_dataset(cfg.data, out / "data")
    write_run_manifest(out, "loo", cfg, {"manifest": str(args.manifest or out / "data" / "manifest.json")},
                       args.argv)
    reports = ev.loo_variants(m, cfg.train, cfg.detector, out, eval_cfg=cfg.eval, mel=cfg.dsp)
    for rep in reports:
        oracle = "n/a" if rep.oracle_auc is None else f"{rep.oracle_auc:.3f}"
        print(f"{rep.variant}: svm AUC {rep.pooled_auc:.3f} (raw {rep.raw_pooled_auc:.3f}), threshold AUC {rep.baseline_auc:.3f}, "
              f"oracle AUC {oracle}, corr2d gap {rep.corr2d_gap():+.4f}")
    print(f"wrote report to {out}")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    reports = ev.load_report(args.report)
    ev.render_report(reports, args.out)
    print(f"wrote report to {args.out}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "translate": cmd_translate, "evaluate": cmd_evaluate,
            "detect": cmd_detect, "loo": cmd_loo, "report": cmd_report}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        argv = sys.argv[1:] if argv is None else list(argv)
        args = build_parser().parse_args(argv)
        args.argv = argv
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SpeechMotionError as exc:
        print(f"usage error: {_error_name(exc)}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, cfg)
    except SpeechMotionError as exc:
        print(f"error: {_error_name(exc)}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Run configuration: one JSON document, five sections, every field defaulted.

Unknown sections or keys are errors, not warnings; a typo in a config must
never silently fall back to a default.
"""
from __future__ import annotations

import dataclasses
import json
import platform
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dsp import MelConfig
from .errors import BadConfig, IoError
from .evaluation import DetectorConfig, EvalConfig
from .synthdata import SynthConfig
from .translator import TrainConfig

SECTIONS = {
    "data": SynthConfig,
    "dsp": MelConfig,
    "train": TrainConfig,
    "detector": DetectorConfig,
    "eval": EvalConfig,
}
_TUPLE_FIELDS = {"grid", "bandwidths", "variants"}


def _build(section: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise BadConfig(f"config section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise BadConfig(f"unknown config key {section}.{key}")
    vals = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**vals)
    except TypeError as exc:
        raise BadConfig(f"bad value in config section {section!r}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    dsp: MelConfig = field(default_factory=MelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise BadConfig("config must be a JSON object")
        for key in d:
            if key not in SECTIONS:
                raise BadConfig(f"unknown config section {key!r}")
        return cls(**{k: _build(k, SECTIONS[k], d.get(k, {})) for k in SECTIONS})

    def to_dict(self) -> dict:
        return {k: dataclasses.asdict(getattr(self, k)) for k in SECTIONS}

    def override(self, section: str, **changes) -> "RunConfig":
        """Copy with the given fields replaced; ``None`` values are ignored."""
        changes = {k: v for k, v in changes.items() if v is not None}
        if not changes:
            return self
        cur = getattr(self, section)
        known = {f.name for f in dataclasses.fields(cur)}
        for key in changes:
            if key not in known:
                raise BadConfig(f"unknown config key {section}.{key}")
        return dataclasses.replace(self, **{section: dataclasses.replace(cur, **changes)})

    def validate(self) -> "RunConfig":
        self.data.validate()
        self.train.validate()
        self.detector.validate()
        self.eval.validate()
        return self


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read config ({exc.strerror})", path) from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BadConfig(f"config is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)


def describe_version() -> str:
    """``git describe``-style string for the source tree, or ``v<version>`` outside a checkout."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_run_manifest(out_dir, command: str, config: RunConfig, extra: dict = None, argv=None) -> Path:
    """Record everything needed to repeat a run: resolved config, seeds and versions."""
    out = Path(out_dir)
    doc = {
        "command": command,
        "version": describe_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "seeds": {"data": config.data.seed, "train": config.train.seed, "griffin_lim": config.eval.gl_seed},
        "config": config.to_dict(),
    }
    if extra:
        doc.update(extra)
    try:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "run_manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write run manifest ({exc.strerror})", out) from exc
    return path

"""Run configuration: one INI file drives every pipeline stage.

Flat ``section.key = value`` pairs, strict validation: unknown sections or
keys are errors naming the offender, values are type-checked, and
cross-section consistency (the distiller cannot ask for longer horizons
than the buffer records) is checked before any work starts.  The resolved
configuration is hashed; every output carries that hash so reports can be
traced back.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass

from .augment import AugmentPolicy
from .engine import DistillConfig
from .exceptions import ConfigError, EngineError
from .trajectories import TrainHyper

_REQUIRED = object()

# schema: section -> key -> (type tag, default)
_SCHEMA = {
    "dataset": {
        "format": ("str", _REQUIRED),
        "train_path": ("str", _REQUIRED),
        "test_path": ("str", ""),
        "image_shape": ("str", ""),  # CxHxW, needed for csv ingestion
    },
    "model": {
        "arch": ("str", "mlp"),
        "depth": ("int", 1),
        "width": ("int", 64),
    },
    "buffer": {
        "experts": ("int", 3),
        "epochs": ("int", 10),
        "lr": ("float", 0.01),
        "momentum": ("float", 0.9),
        "batch_size": ("int", 256),
        "ema_decay": ("float", 0.0),
        "snapshot_stride": ("int", 0),
    },
    "distill": {
        "iterations": ("int", 2000),
        "max_step": ("int", 10),
        "schedule": ("str", "progressive"),
        "fixed_step": ("int", 0),
        "segment_length": ("int", 2),
        "steps_per_unit": ("int", 1),
        "inner_batch": ("int", 0),
        "student_lr": ("float", 0.02),
        "learn_student_lr": ("bool", True),
        "student_lr_lr": ("float", 1e-2),
        "image_lr": ("float", 50.0),
        "image_momentum": ("float", 0.5),
        "beta1": ("float", 1.0),
        "beta2": ("float", 0.0),
        "kernel_sigma": ("float", 0.0),
        "retrain_points": ("int", 0),
        "ipc": ("int", 2),
        "init": ("str", "from_real"),
        "dtype": ("str", "float32"),
        "checkpoint_every": ("int", 0),
        "save_every": ("int", 0),
    },
    "eval": {
        "runs": ("int", 10),
        "epochs": ("int", 200),
        "lr": ("float", 0.02),
        "momentum": ("float", 0.9),
        "batch_size": ("int", 0),
        "archs": ("str", ""),  # comma list; empty = the [model] arch
    },
    "augment": {
        "transforms": ("str", ""),
        "strategy": ("str", "batch"),
        "flip_p": ("float", 0.5),
        "translate_frac": ("float", 0.25),
        "scale_lo": ("float", 0.8),
        "scale_hi": ("float", 1.2),
        "rotate_deg": ("float", 15.0),
        "brightness": ("float", 0.3),
        "contrast": ("float", 0.5),
        "cutout_frac": ("float", 0.25),
    },
    "run": {
        "out_dir": ("str", "runs/out"),
        "seed": ("int", 0),
        "threads": ("int", 1),
    },
}

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def _convert(section: str, key: str, kind: str, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            word = raw.strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL_WORDS[word]
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"{section}.{key}: {e}") from e


@dataclass
class RunConfig:
    """Everything a pipeline stage needs, already validated."""

    values: dict  # resolved section -> key -> typed value
    config_hash: str

    def __getitem__(self, section):
        return self.values[section]

    @property
    def dataset_format(self):
        return self.values["dataset"]["format"]

    @property
    def image_shape(self):
        raw = self.values["dataset"]["image_shape"]
        if not raw:
            return None
        try:
            parts = tuple(int(p) for p in raw.lower().split("x"))
        except ValueError as e:
            raise ConfigError(f"dataset.image_shape: {e}") from e
        if len(parts) != 3 or any(p < 1 for p in parts):
            raise ConfigError("dataset.image_shape must look like CxHxW")
        return parts

    def train_hyper(self) -> TrainHyper:
        b = self.values["buffer"]
        return TrainHyper(lr=b["lr"], momentum=b["momentum"], epochs=b["epochs"],
                          batch_size=b["batch_size"], ema_decay=b["ema_decay"],
                          snapshot_stride=b["snapshot_stride"])

    def distill_config(self) -> DistillConfig:
        d = dict(self.values["distill"])
        return DistillConfig(**d)

    def augment_policy(self) -> AugmentPolicy:
        a = self.values["augment"]
        names = tuple(t.strip() for t in a["transforms"].split(",") if t.strip())
        return AugmentPolicy(
            transforms=names, strategy=a["strategy"], flip_p=a["flip_p"],
            translate_frac=a["translate_frac"], scale_lo=a["scale_lo"],
            scale_hi=a["scale_hi"], rotate_deg=a["rotate_deg"],
            brightness=a["brightness"], contrast=a["contrast"],
            cutout_frac=a["cutout_frac"], seed=self.values["run"]["seed"],
        )

    def eval_archs(self) -> list:
        raw = self.values["eval"]["archs"]
        names = [t.strip() for t in raw.split(",") if t.strip()]
        return names or [self.values["model"]["arch"]]


def _hash(values: dict) -> str:
    lines = []
    for section in sorted(values):
        for key in sorted(values[section]):
            lines.append(f"{section}.{key}={values[section][key]}")
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:12]


def parse_config(path, overrides: dict | None = None) -> RunConfig:
    """Read and validate an INI run config.

    ``overrides`` maps "section.key" to replacement values (the CLI's
    --seed/--threads/--out plumbing).
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r") as f:
            cp.read_file(f, source=str(path))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except configparser.Error as e:
        raise ConfigError(f"malformed config {path}: {e}") from e

    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")

    values: dict = {}
    for section, keys in _SCHEMA.items():
        values[section] = {}
        for key, (kind, default) in keys.items():
            if cp.has_option(section, key):
                values[section][key] = _convert(section, key, kind, cp.get(section, key))
            elif default is _REQUIRED:
                raise ConfigError(f"missing required config key {section}.{key}")
            else:
                values[section][key] = default

    if overrides:
        for dotted, val in overrides.items():
            section, key = dotted.split(".", 1)
            if section not in _SCHEMA or key not in _SCHEMA[section]:
                raise ConfigError(f"unknown override {dotted}")
            kind = _SCHEMA[section][key][0]
            values[section][key] = _convert(section, key, kind, val)

    cfg = RunConfig(values=values, config_hash="")
    _validate(cfg)
    cfg.config_hash = _hash(values)
    return cfg


def _validate(cfg: RunConfig) -> None:
    v = cfg.values
    if v["dataset"]["format"] not in ("idx_like", "raw_tensor", "csv"):
        raise ConfigError(
            f"dataset.format must be idx_like, raw_tensor, or csv, "
            f"got {v['dataset']['format']!r}"
        )
    if v["dataset"]["format"] == "csv" and cfg.image_shape is None:
        raise ConfigError("csv datasets need dataset.image_shape")
    if v["run"]["threads"] < 1:
        raise ConfigError("run.threads must be >= 1")
    if v["eval"]["runs"] < 1 or v["eval"]["epochs"] < 1:
        raise ConfigError("eval.runs and eval.epochs must be >= 1")
    if v["eval"]["lr"] <= 0:
        raise ConfigError("eval.lr must be positive")
    if v["buffer"]["experts"] < 1:
        raise ConfigError("buffer.experts must be >= 1")
    # object constructors run their own checks; surface theirs as config errors
    try:
        cfg.train_hyper()
        cfg.distill_config()
        cfg.augment_policy()
    except EngineError as e:
        raise ConfigError(str(e)) from e
    # cross-section: with per-epoch snapshots the buffer records exactly
    # `epochs` steps, so longer matching horizons can never be satisfied
    if v["buffer"]["snapshot_stride"] == 0:
        if v["distill"]["max_step"] > v["buffer"]["epochs"]:
            raise ConfigError(
                f"distill.max_step {v['distill']['max_step']} exceeds the "
                f"{v['buffer']['epochs']} snapshots the buffer will record"
            )
    for arch in cfg.eval_archs():
        if arch not in ("convnet_d", "mlp", "lenet_like"):
            raise ConfigError(f"eval.archs: unknown architecture {arch!r}")

"""Flat ``section.key = value`` experiment configuration.

Unknown keys and malformed values are hard errors that name the key and
line. ``serialize`` emits every key in sorted order, so parsing its output
yields the same configuration.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .data import ClassOmissionFilter
from .exceptions import UsageError
from .losses import LossWeights
from .training import Ablation, Direction, TrainingConfig

TASKS = ("dtn", "baseline", "f", "eval_classifier")


class ConfigError(UsageError):
    pass


def _int(v):
    return int(v)


def _pos_int(v):
    v = int(v)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def _opt_int(v):
    return None if v.lower() in ("", "none") else int(v)


def _opt_pos_int(v):
    return None if v.lower() in ("", "none") else _pos_int(v)


def _float(v):
    return float(v)


def _str(v):
    return v


def _opt_path(v):
    return None if v.lower() in ("", "none") else v


def _choice(*options):
    def parse(v):
        v = v.lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return parse


def _ablation(v):
    flags = [x.strip().lower() for x in v.split(",") if x.strip() and x.strip().lower() != "none"]
    for flag in flags:
        Ablation(flag)
    return tuple(sorted(set(flags)))


def _widths(v):
    widths = tuple(int(x) for x in v.split(","))
    if len(widths) != 4 or min(widths) < 1:
        raise ValueError("expected four positive comma-separated widths")
    return widths


# key -> (parser, default)
SCHEMA = {
    "run.task": (_choice(*TASKS), "dtn"),
    "run.name": (_str, ""),
    "data.source_dataset": (_choice("svhn", "mnist"), "svhn"),
    "data.source_split": (_str, "extra"),
    "data.target_dataset": (_choice("svhn", "mnist"), "mnist"),
    "data.target_split": (_str, "test"),
    "data.eval_split": (_str, "test"),
    "data.classifier_split": (_str, "train"),
    "data.omit_from_s": (_opt_int, None),
    "data.omit_from_t": (_opt_int, None),
    "data.omit_from_f_training": (_opt_int, None),
    "data.desk_scale_n": (_opt_pos_int, 10000),
    "data.eval_n": (_opt_pos_int, None),
    "train.alpha": (_float, 15.0),
    "train.beta": (_float, 15.0),
    "train.gamma": (_float, 0.0),
    "train.tv_exponent": (_float, 1.0),
    "train.learning_rate": (_float, 2e-4),
    "train.adam_beta1": (_float, 0.5),
    "train.adam_beta2": (_float, 0.999),
    "train.batch_size": (_pos_int, 128),
    "train.total_steps": (_int, 3000),
    "train.seed": (_int, 0),
    "train.ablation": (_ablation, ()),
    "train.direction": (_choice(*(d.value for d in Direction)), "s_to_t"),
    "train.checkpoint_every": (_pos_int, 1000),
    "pretrain.learning_rate": (_float, 1e-3),
    "pretrain.adam_beta1": (_float, 0.9),
    "pretrain.adam_beta2": (_float, 0.999),
    "pretrain.batch_size": (_pos_int, 128),
    "pretrain.total_steps": (_int, 5000),
    "pretrain.desk_scale_n": (_opt_pos_int, 100000),
    "classifier.learning_rate": (_float, 1e-3),
    "classifier.adam_beta1": (_float, 0.9),
    "classifier.adam_beta2": (_float, 0.999),
    "classifier.batch_size": (_pos_int, 128),
    "classifier.total_steps": (_int, 5000),
    "classifier.desk_scale_n": (_opt_pos_int, None),
    "model.f_widths": (_widths, (64, 128, 256, 128)),
    "model.g_widths": (_widths, (512, 256, 128, 64)),
    "model.d_widths": (_widths, (64, 128, 256, 512)),
    "model.f_checkpoint": (_opt_path, None),
    "model.classifier_checkpoint": (_opt_path, None),
}


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value) if value else "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ExperimentConfig:
    """Validated configuration values keyed by dotted name."""

    def __init__(self, values=None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.values == other.values

    def __repr__(self):
        return f"ExperimentConfig({self.values!r})"

    def set(self, key, value, line=None):
        where = f" (line {line})" if line is not None else ""
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}{where}")
        parser, _ = SCHEMA[key]
        if not isinstance(value, str):
            value = _format(value)
        try:
            self.values[key] = parser(value.strip())
        except ValueError as exc:
            raise ConfigError(f"invalid value {value!r} for {key!r}{where}: {exc}") from None

    def with_overrides(self, **overrides):
        cfg = ExperimentConfig(dict(self.values))
        for key, value in overrides.items():
            cfg.set(key, value)
        return cfg

    @classmethod
    def parse(cls, text):
        cfg = cls()
        seen = set()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            if key in seen:
                raise ConfigError(f"duplicate config key {key!r} (line {lineno})")
            seen.add(key)
            cfg.set(key, value, line=lineno)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        return cls.parse(Path(path).read_text())

    def serialize(self):
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def save(self, path):
        Path(path).write_text(self.serialize())
        return Path(path)

    def hash(self):
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def validate(self):
        self.training_config()
        self.pretrain_config()
        self.classifier_config()
        return self

    def omission(self):
        v = self.values
        return ClassOmissionFilter(v["data.omit_from_s"], v["data.omit_from_t"],
                                   v["data.omit_from_f_training"])

    def _widths(self):
        v = self.values
        return dict(f_widths=v["model.f_widths"], g_widths=v["model.g_widths"],
                    d_widths=v["model.d_widths"])

    def training_config(self) -> TrainingConfig:
        v = self.values
        ablation = set(v["train.ablation"])
        if v["run.task"] == "baseline":
            ablation.add(Ablation.BASELINE.value)
        return TrainingConfig(
            weights=LossWeights(v["train.alpha"], v["train.beta"], v["train.gamma"],
                                v["train.tv_exponent"]),
            learning_rate=v["train.learning_rate"], adam_beta1=v["train.adam_beta1"],
            adam_beta2=v["train.adam_beta2"], batch_size=v["train.batch_size"],
            total_steps=v["train.total_steps"], seed=v["train.seed"], ablation=ablation,
            direction=v["train.direction"], omission=self.omission(),
            desk_scale_n=v["data.desk_scale_n"], checkpoint_every=v["train.checkpoint_every"],
            **self._widths(),
        )

    def _supervised(self, section, desk_scale_n):
        v = self.values
        return TrainingConfig.supervised(
            learning_rate=v[f"{section}.learning_rate"], adam_beta1=v[f"{section}.adam_beta1"],
            adam_beta2=v[f"{section}.adam_beta2"], batch_size=v[f"{section}.batch_size"],
            total_steps=v[f"{section}.total_steps"], seed=v["train.seed"],
            omission=self.omission(), desk_scale_n=desk_scale_n,
            checkpoint_every=v["train.checkpoint_every"], **self._widths(),
        )

    def pretrain_config(self) -> TrainingConfig:
        return self._supervised("pretrain", self.values["pretrain.desk_scale_n"])

    def classifier_config(self) -> TrainingConfig:
        return self._supervised("classifier", self.values["classifier.desk_scale_n"])

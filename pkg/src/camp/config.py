"""Line-based ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Every key must be one of
:data:`KEYS`; each maps one-to-one to a command-line flag (``batch_size`` is
``--batch-size``). Values given on the command line override the file.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .errors import CampError
from .losses import SparsityConfig
from .preprocess import PreprocessConfig
from .training import TrainConfig


class ConfigError(CampError, ValueError):
    """Bad configuration key or value (a usage error)."""


def _int(text):
    return int(text)


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    return v


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _region(text):
    if isinstance(text, (tuple, list)):
        parts = list(text)
    else:
        parts = [p for p in str(text).replace(" ", "").split(",") if p]
    if len(parts) != 4:
        raise ValueError("expected x,y,w,h")
    return tuple(int(p) for p in parts)


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    help: str


_T = TrainConfig()
_S = SparsityConfig()
_P = PreprocessConfig()

KEYS = {
    # training
    "epochs": Key(_int, _T.epochs, "training epochs"),
    "batch_size": Key(_int, _T.batch_size, "minibatch size"),
    "learning_rate": Key(float, _T.learning_rate, "Adam step size"),
    "seed": Key(_seed, None, "master seed (falls back to $CAMP_SEED, then 0)"),
    "noise_sigma": Key(float, _T.noise_sigma, "std of the input corruption on the [0,1] scale"),
    "folds": Key(_int, _T.folds, "cross-validation folds"),
    "loss": Key(_choice("dice", "mse"), _T.loss, "autoencoder loss"),
    "sparsity_p": Key(float, _S.p, "target mean activation of the regularized layer"),
    "beta_min": Key(float, _S.beta_min, "lower clamp of the adaptive penalty weight"),
    "beta_max": Key(float, _S.beta_max, "upper clamp of the adaptive penalty weight"),
    "sparsity_epsilon": Key(float, _S.epsilon, "clamp for rates inside the KL term"),
    "freeze_transferred": Key(_bool, _T.freeze_transferred, "keep transferred encoder weights fixed"),
    "leaky_alpha": Key(float, _T.leaky_alpha, "LeakyReLU negative slope"),
    "dropout_rate": Key(float, _T.dropout_rate, "classifier dropout rate"),
    "cross_validate": Key(_bool, False, "also run patient-level k-fold cross-validation"),
    "val_fraction": Key(float, 0.0, "fraction of patients held out for per-epoch validation"),
    # preprocessing
    "entropy_threshold": Key(float, _P.entropy_threshold, "minimum slice entropy in bits"),
    "snr_threshold": Key(float, _P.snr_threshold, "minimum slice SNR in dB"),
    "background_region": Key(_region, _P.background_region, "x,y,w,h of the flat noise region"),
    "target_size": Key(_int, _P.target_size, "slice edge length after resizing"),
    # synthetic data
    "patients": Key(_int, 8, "number of phantom patients"),
    "slices": Key(_int, 4, "slices per phantom patient"),
    "size": Key(_int, 256, "phantom edge length"),
    "rule": Key(_choice("texture", "intensity"), "texture", "how labels show up in the phantom"),
    # grouping and evaluation
    "modality": Key(_choice("FLAIR", "T1w", "T1wCE", "T2w"), None, "restrict to one modality"),
    "pooled": Key(_bool, False, "train one model over all modalities"),
    "threshold": Key(float, 0.5, "decision threshold"),
    "aggregate": Key(_choice("mean", "max"), "mean", "slice-to-patient score rule"),
}


def parse_value(key, text):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return KEYS[key].parse(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {text!r} for {key}: {exc}") from None


def load_config(path):
    """Parse a config file into ``{key: value}``; unknown keys are errors."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from None
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return out


def env_seed():
    text = os.environ.get("CAMP_SEED")
    if text is None or not text.strip():
        return None
    try:
        return _seed(text.strip())
    except ValueError:
        raise ConfigError(f"CAMP_SEED must be a non-negative integer, got {text!r}") from None


def resolve(keys, file_values=None, overrides=None):
    """Materialize every key in ``keys``: flag beats file beats default.

    The seed falls back to ``$CAMP_SEED`` and then 0.
    """
    file_values = file_values or {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    out = {}
    for key in keys:
        if key in overrides:
            out[key] = overrides[key]
        elif key in file_values:
            out[key] = file_values[key]
        else:
            out[key] = KEYS[key].default
    if "seed" in out and out["seed"] is None:
        seed = env_seed()
        out["seed"] = 0 if seed is None else seed
    return out


def train_config(values):
    """Build a :class:`TrainConfig` from resolved values."""
    try:
        sparsity = SparsityConfig(values.get("sparsity_p", _S.p), values.get("beta_min", _S.beta_min),
                                  values.get("beta_max", _S.beta_max),
                                  values.get("sparsity_epsilon", _S.epsilon))
        fields = ("epochs", "batch_size", "learning_rate", "seed", "noise_sigma", "folds", "loss",
                  "freeze_transferred", "leaky_alpha", "dropout_rate")
        return TrainConfig(sparsity=sparsity, **{k: values[k] for k in fields if k in values})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def preprocess_config(values):
    try:
        return PreprocessConfig(values["entropy_threshold"], values["snr_threshold"],
                                values["background_region"], values["target_size"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

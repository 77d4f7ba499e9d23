"""Run configuration: INI-style sections with typed, strictly checked keys.

Every knob has a default (see :data:`DEFAULTS`); unknown sections or keys
and values of the wrong type are errors.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

# section -> key -> (type, default, help)
DEFAULTS: dict[str, dict[str, tuple[type, object, str]]] = {
    "model": {
        "arch": (str, "convnet", "convnet | convnet3 | resnet | mlp"),
        "precision": (str, "bnn", "fp32 | quant | binary_weight | bnn"),
        "width": (int, 4, "channels of the first stage (x1 width)"),
        "n_bits": (int, 8, "bit width of quant models (2, 4, 8)"),
    },
    "train": {
        "epochs": (int, 8, "training epochs"),
        "lr": (float, 0.0, "SGD learning rate; 0 picks the per-precision default"),
        "momentum": (float, 0.9, "heavy-ball momentum"),
        "batch_size": (int, 64, "minibatch size"),
        "weight_decay": (float, 0.0, "L2 penalty"),
        "lr_schedule": (str, "cosine", "cosine | constant"),
        "dtype": (str, "float32", "float32 | float64"),
        "seed": (int, 0, "seed of initialization, shuffling and attack batches"),
    },
    "binarize": {
        "first_last_weights": (bool, True, "binarize first and last layer weights too"),
        "schedule_total": (int, 0, "binarizer horizon T in epochs; 0 = train.epochs"),
        "schedule_unit": (str, "epoch", "binarizer iteration unit: epoch | step"),
        "weight_scale": (bool, False, "deploy binary layers with scale mean|w|"),
    },
    "growth": {
        "max_multiplier": (float, 4.0, "channel capacity multiplier M"),
        "theta": (float, 0.9, "fraction of layers that must be stable"),
        "window": (int, 2, "successive stable checks needed"),
        "temperature": (float, 2.0 / 3.0, "Gumbel-Sigmoid temperature"),
        "beta_rho": (float, 1.1, "per-epoch beta growth factor"),
        "beta_max": (float, 100.0, "beta cap"),
        "max_epochs": (int, 40, "stage-1 epoch cap"),
        "mask_lr": (float, 0.5, "mask learning rate"),
        "form": (str, "logit", "gate form: logit | printed"),
        "stage2_epochs": (int, 0, "stage-2 epochs; 0 = train.epochs"),
    },
    "attack": {
        "mode": (str, "untargeted", "untargeted | targeted"),
        "target_class": (int, -1, "target class for targeted mode"),
        "budget": (int, 5000, "maximum flips per round"),
        "candidates_per_layer": (int, 10, "top-n bits per layer"),
        "rounds": (int, 3, "attack rounds; the best one is reported"),
        "attack_batch": (int, 128, "attack batch size drawn from the test split"),
        "eval_every": (int, 10, "test accuracy sampling period (flips)"),
        "eval_dense_until": (int, 100, "evaluate after every flip below this count"),
    },
    "data": {
        "dataset": (str, "mnist5k", "mnist5k | idx | cifar | blobs"),
        "root": (str, "", "directory of the dataset files"),
        "train_size": (int, 0, "truncate the train split (0 = all)"),
        "test_size": (int, 0, "truncate the test split (0 = all)"),
        "blobs_n": (int, 1000, "blobs: samples per split"),
        "blobs_classes": (int, 2, "blobs: classes"),
        "blobs_dim": (int, 2, "blobs: feature dimension"),
        "blobs_separation": (float, 10.0, "blobs: centre distance in sigmas"),
    },
}

# learning rates that train each precision preset on the desk task
DEFAULT_LR = {"fp32": 0.5, "quant": 0.5, "binary_weight": 0.5, "bnn": 2.0}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)
    source: str = ""

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, value) -> None:
        if key not in DEFAULTS.get(section, {}):
            raise ConfigError(f"unknown key {section}.{key}")
        self.values[section][key] = _coerce(section, key, value)

    def to_ini(self) -> str:
        """Canonical text form (all keys, sorted), used in run manifests."""
        lines = []
        for sec in DEFAULTS:
            lines.append(f"[{sec}]")
            for key in sorted(DEFAULTS[sec]):
                v = self.values[sec][key]
                lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
            lines.append("")
        return "\n".join(lines)

    @property
    def lr(self) -> float:
        lr = float(self.get("train", "lr"))
        return lr if lr > 0 else DEFAULT_LR[str(self.get("model", "precision"))]


def _coerce(section: str, key: str, raw):
    typ = DEFAULTS[section][key][0]
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{section}.{key}: expected {typ.__name__}, got {text!r}") from None
    return text


def defaults() -> RunConfig:
    return RunConfig({s: {k: v[1] for k, v in keys.items()} for s, keys in DEFAULTS.items()}, "<defaults>")


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = defaults()
    cfg.source = source
    for sec in parser.sections():
        if sec not in DEFAULTS:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in DEFAULTS[sec]:
                raise ConfigError(f"{source}: unknown key {sec}.{key}")
            cfg.values[sec][key] = _coerce(sec, key, raw)
    _validate(cfg)
    return cfg


def parse_config(path) -> RunConfig:
    """Read a config file; a missing path yields an error, an empty file the defaults."""
    p = Path(path)
    return parse_config_text(p.read_text(), str(p))


def _validate(cfg: RunConfig) -> None:
    choices = {
        ("model", "arch"): ("convnet", "convnet3", "resnet", "mlp"),
        ("model", "precision"): ("fp32", "quant", "binary_weight", "bnn"),
        ("train", "lr_schedule"): ("cosine", "constant"),
        ("train", "dtype"): ("float32", "float64"),
        ("binarize", "schedule_unit"): ("epoch", "step"),
        ("growth", "form"): ("logit", "printed"),
        ("attack", "mode"): ("untargeted", "targeted"),
        ("data", "dataset"): ("mnist5k", "idx", "cifar", "blobs"),
    }
    for (sec, key), allowed in choices.items():
        if cfg.get(sec, key) not in allowed:
            raise ConfigError(f"{sec}.{key} must be one of {allowed}, got {cfg.get(sec, key)!r}")
    if cfg.get("model", "n_bits") not in (2, 4, 8):
        raise ConfigError("model.n_bits must be 2, 4 or 8")
    if cfg.get("attack", "budget") < 0:
        raise ConfigError("attack.budget must be >= 0")


def doc_table() -> str:
    """Markdown table of every key, its type and default."""
    rows = ["| key | type | default | meaning |", "|---|---|---|---|"]
    for sec, keys in DEFAULTS.items():
        for key, (typ, dflt, doc) in keys.items():
            d = f"{dflt:.4g}" if isinstance(dflt, float) else str(dflt).lower() if isinstance(dflt, bool) else dflt
            rows.append(f"| `{sec}.{key}` | {typ.__name__} | `{d}` | {doc} |")
    return "\n".join(rows)

"""Flat ``section.key = value`` run configuration.

Every key has a default; unknown keys and unparsable values raise
:class:`ConfigError` naming the key. Lines starting with ``#`` are comments.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional

from .capsnet import CapsNetConfig
from .data import (Dataset, filter_classes, load_bundled_mnist, load_idx, pad_translate, split, split_counts,
                   synth_shapes)
from .errors import ConfigError, DataError
from .losses import LossConfig
from .training import AnnealingConfig, LobsterConfig, TrainConfig

# key -> (default, type, help). ``type`` drives parsing; "ints" is a comma list.
SCHEMA = {
    "model.num_types": (1, int, "primary capsule types O"),
    "model.primary_dim": (2, int, "primary capsule dimension D1"),
    "model.class_dim": (4, int, "class capsule dimension D2"),
    "model.num_classes": (0, int, "class count J; 0 takes it from the data"),
    "model.conv1_channels": (256, int, "channels of the first convolution"),
    "model.conv1_kernel": (9, int, "first convolution kernel size"),
    "model.primary_kernel": (9, int, "primary capsule convolution kernel size"),
    "model.primary_stride": (2, int, "primary capsule convolution stride"),
    "model.decoder": (False, bool, "attach the reconstruction decoder"),
    "model.detach_couplings": (False, bool, "stop gradients through the routing logits"),
    "model.caps_init_std": (0.01, float, "standard deviation of the transformation matrices"),
    "train.lr": (0.001, float, "learning rate"),
    "train.batch_size": (128, int, "mini-batch size"),
    "train.optimizer": ("adam", str, "adam or sgd"),
    "train.patience": (10, int, "epochs without improvement before stopping (fixed routing)"),
    "train.max_epochs": (100, int, "hard cap on epochs"),
    "train.seed": (0, int, "seed for initialisation and shuffling"),
    "train.routing": ("fixed", str, "fixed or annealing"),
    "train.r": (3, int, "routing iterations for fixed routing"),
    "train.lr_decay": (1.0, float, "per-epoch learning-rate factor"),
    "train.eval_batch_size": (256, int, "batch size for evaluation"),
    "train.reproducible": (True, bool, "single thread and zero wall-clock column"),
    "annealing.r0": (1, int, "initial routing iterations"),
    "annealing.r_max": (50, int, "largest routing iterations"),
    "annealing.step": (1, int, "increment of r per annealing step"),
    "annealing.patience": (10, int, "plateau epochs before annealing"),
    "lobster.enabled": (False, bool, "enable the gradient-gated shrinking step"),
    "lobster.lam": (1e-4, float, "shrinking strength"),
    "lobster.threshold": (1e-3, float, "magnitude below which weights are frozen at zero"),
    "loss.m_plus": (0.9, float, "margin for the present class"),
    "loss.m_minus": (0.1, float, "margin for absent classes"),
    "loss.lambda_down": (0.5, float, "down-weighting of absent classes"),
    "loss.beta": (0.0005, float, "reconstruction loss weight"),
    "data.source": ("mnist", str, "mnist (bundled 10k digits), idx or synth"),
    "data.classes": ((), "ints", "digits to keep, e.g. 0,1; empty keeps all"),
    "data.train_images": ("", str, "IDX images for training (source=idx)"),
    "data.train_labels": ("", str, "IDX labels for training (source=idx)"),
    "data.test_images": ("", str, "IDX test images; empty carves the test set from the pool"),
    "data.test_labels": ("", str, "IDX test labels"),
    "data.train_size": (0, int, "training pool size; 0 uses everything left after the test set"),
    "data.test_size": (1000, int, "test samples carved from the pool"),
    "data.val_fraction": (0.05, float, "fraction of the training pool held out for validation"),
    "data.seed": (0, int, "seed for subsets and splits"),
    "data.synth_classes": (2, int, "glyph classes for source=synth"),
    "data.synth_size": (28, int, "image side for source=synth"),
    "data.pad": (0, int, "padding per side before random translation"),
    "data.max_shift": (0, int, "largest translation in pixels"),
    "rem.K": (11, int, "quantization levels"),
    "rem.threshold": (0.1, float, "coupling threshold for parse-tree edges"),
    "rem.label_source": ("predicted", str, "predicted or true"),
    "output.dir": ("run", str, "directory for checkpoints and reports"),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(key: str, text: str):
    default, kind, _ = SCHEMA[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind == "ints":
            return tuple(int(t) for t in text.split(",") if t.strip())
        if kind is str:
            return text.strip('"').strip("'")
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved run configuration: defaults overlaid with user values."""

    def __init__(self, values: Optional[dict] = None):
        self.values = {k: v[0] for k, v in SCHEMA.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        self.values[key] = _parse_value(key, value) if isinstance(value, str) else value

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self.values[key]

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text, str(path))

    def dumps(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in sorted(self.values.items()))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.values.items()}

    # -- builders -----------------------------------------------------------

    def train_config(self) -> TrainConfig:
        t = self.section("train")
        return TrainConfig(annealing=AnnealingConfig(**self.section("annealing")),
                           lobster=LobsterConfig(**self.section("lobster")),
                           loss=LossConfig(**self.section("loss")), **t)

    def model_config(self, data: Dataset) -> CapsNetConfig:
        m = self.section("model")
        _, c, h, w = data.images.shape
        m["num_classes"] = m["num_classes"] or data.num_classes
        if m["num_classes"] < data.num_classes:
            raise ConfigError(f"model.num_classes={m['num_classes']} but the data has {data.num_classes} classes")
        return CapsNetConfig(in_channels=c, image_height=h, image_width=w,
                             routing_iterations=self["train.r"], **m)

    def validate_rem(self) -> None:
        if self["rem.K"] < 2:
            raise ConfigError(f"rem.K must be >= 2, got {self['rem.K']}")
        if self["rem.label_source"] not in ("predicted", "true"):
            raise ConfigError(f"rem.label_source must be predicted or true, got {self['rem.label_source']!r}")

    def load_data(self):
        """Return ``(train, val, test)`` as described by the ``data`` section."""
        d = self.section("data")
        classes = d["classes"] or None
        test = None
        if d["source"] == "mnist":
            pool = load_bundled_mnist(classes)
        elif d["source"] == "idx":
            if not d["train_images"] or not d["train_labels"]:
                raise ConfigError("data.train_images and data.train_labels are required for source=idx")
            pool = _maybe_filter(load_idx(d["train_images"], d["train_labels"]), classes)
            if d["test_images"]:
                test = _maybe_filter(load_idx(d["test_images"], d["test_labels"],
                                              num_classes=pool.num_classes if not classes else None), classes)
        elif d["source"] == "synth":
            n = (d["train_size"] or 1000) + (d["test_size"] if not d["test_images"] else 0)
            pool = synth_shapes(n, d["synth_classes"], d["synth_size"], seed=d["seed"])
        else:
            raise ConfigError(f"data.source must be mnist, idx or synth, got {d['source']!r}")
        if test is None:
            n_test = d["test_size"]
            if n_test < 1 or n_test >= len(pool):
                raise DataError(f"data.test_size={n_test} does not fit a pool of {len(pool)} samples")
            n_train = d["train_size"] or len(pool) - n_test
            pool, test = split_counts(pool, n_train, n_test, seed=d["seed"])
        elif d["train_size"]:
            pool, _ = split_counts(pool, d["train_size"], 0, seed=d["seed"])
        if d["pad"]:
            pool = pad_translate(pool, d["pad"], d["max_shift"], seed=d["seed"])
            test = pad_translate(test, d["pad"], d["max_shift"], seed=d["seed"] + 1)
        train, val = split(pool, d["val_fraction"], seed=d["seed"])
        return train, val, test


def _maybe_filter(ds: Dataset, classes):
    return filter_classes(ds, classes) if classes else ds

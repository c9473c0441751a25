"""Experiment configuration: a flat key-value (TOML) file plus ``key=value`` overrides.

Schema (all keys optional, defaults in :class:`ExperimentConfig`)::

    # data source: a manifest, or synthetic = true with synth_* keys
    manifest = "data/manifest.csv"
    split = "data/split.csv"          # optional image,part CSV
    val_fold = 0
    class_names = ["MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC"]
    synthetic = false
    synth_n_per_class = [40, 40, 40, 40, 40, 40, 40]
    synth_image_size = 192
    synth_policy = "random"           # or "center"
    synth_seed = 0

    strategy = "ordered"              # downsample | single_crop | multi_crop | ordered
    n_crops = 9
    patch_size = 64
    p_d = 0.2
    aggregator = "attention"          # average | gru | attention
    attention_placement = ["end"]     # any of "initial", "end"
    backbone_stages = [[16, 2], [32, 2], [64, 2], [128, 2]]
    gru_hidden = 128

    balancing = "none"                # none | oversample | balanced_batches | loss_weighting | diagnosis_weighting
    k = 1.0
    diagnosis_multipliers = {expert_consensus = 1.0, serial_imaging = 1.2, confocal_microscopy = 1.4, histopathology = 1.6}
    benign_classes = ["NV", "BKL", "DF", "VASC"]
    allow_unknown_diagnosis = false

    learning_rate = 0.001
    beta1 = 0.9
    beta2 = 0.999
    epsilon = 1e-8
    epochs = 10
    batch_size = 28
    augment = true
    seed = 0
    output_dir = "runs/example"
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from patchattn.balancing import DEFAULT_MULTIPLIERS, DIAGNOSIS_METHODS
from patchattn.data import HAM_CLASSES
from patchattn.model import AGGREGATORS, PLACEMENTS, BackboneConfig, ConfigError, ModelConfig

STRATEGIES = ("downsample", "single_crop", "multi_crop", "ordered")
BALANCING = ("none", "oversample", "balanced_batches", "loss_weighting", "diagnosis_weighting")


@dataclass
class ExperimentConfig:
    manifest: str | None = None
    split: str | None = None
    val_fold: int = 0
    class_names: tuple[str, ...] = HAM_CLASSES
    synthetic: bool = False
    synth_n_per_class: tuple[int, ...] = (40,) * 7
    synth_image_size: int = 192
    synth_policy: str = "random"
    synth_seed: int = 0

    strategy: str = "ordered"
    n_crops: int = 9
    patch_size: int = 64
    p_d: float = 0.2
    aggregator: str = "attention"
    attention_placement: tuple[str, ...] = ("end",)
    backbone_stages: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2), (128, 2))
    gru_hidden: int = 128
    single_crop_scale: tuple[float, float] = (0.7, 1.1)

    balancing: str = "none"
    k: float = 1.0
    diagnosis_multipliers: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MULTIPLIERS))
    benign_classes: tuple[str, ...] = ("NV", "BKL", "DF", "VASC")
    allow_unknown_diagnosis: bool = False

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 10
    batch_size: int = 28
    eval_batch_size: int = 64
    augment: bool = True
    jitter: tuple[float, float] = (0.85, 1.15)
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, _tuplify(v))

    @property
    def patch_crops(self) -> int:
        return self.n_crops if self.strategy in ("multi_crop", "ordered") else 1

    @property
    def uses_loss_weights(self) -> bool:
        return self.balancing in ("loss_weighting", "diagnosis_weighting")

    def validate(self) -> None:
        problems = []
        if self.strategy not in STRATEGIES:
            problems.append(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.aggregator not in AGGREGATORS:
            problems.append(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.balancing not in BALANCING:
            problems.append(f"balancing must be one of {BALANCING}, got {self.balancing!r}")
        bad_place = [p for p in self.attention_placement if p not in PLACEMENTS]
        if bad_place:
            problems.append(f"attention_placement entries must be in {PLACEMENTS}, got {bad_place}")
        if self.aggregator in ("gru", "attention") and self.strategy in ("downsample", "single_crop"):
            problems.append(
                f"aggregator={self.aggregator!r} needs a multi-patch strategy but strategy={self.strategy!r}"
            )
        if self.aggregator == "attention" and not self.attention_placement:
            problems.append("aggregator='attention' requires a non-empty attention_placement")
        if not 0.0 <= self.p_d < 1.0:
            problems.append(f"p_d must lie in [0, 1), got {self.p_d}")
        if self.p_d > 0 and self.strategy != "ordered":
            problems.append(f"p_d={self.p_d} only applies to strategy='ordered', got strategy={self.strategy!r}")
        if self.k < 0:
            problems.append(f"k must be non-negative, got {self.k}")
        if self.balancing == "balanced_batches" and self.batch_size % len(self.class_names):
            problems.append(
                f"balanced_batches needs batch_size divisible by {len(self.class_names)} classes, got {self.batch_size}"
            )
        missing = [m for m in DIAGNOSIS_METHODS if m not in self.diagnosis_multipliers]
        if missing:
            problems.append(f"diagnosis_multipliers lacks {missing}")
        unknown = [c for c in self.benign_classes if c not in self.class_names]
        if unknown:
            problems.append(f"benign_classes {unknown} are not in class_names")
        if self.epochs < 1 or self.batch_size < 1:
            problems.append("epochs and batch_size must be positive")
        if not self.synthetic and not self.manifest:
            problems.append("set either manifest or synthetic = true")
        if self.synthetic and len(self.synth_n_per_class) != len(self.class_names):
            problems.append("synth_n_per_class needs one entry per class")
        if self.val_fold not in (0, 1, 2):
            problems.append(f"val_fold must be 0, 1 or 2, got {self.val_fold}")
        if problems:
            raise ConfigError("; ".join(problems))
        self.model_config().validate()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=BackboneConfig(
                stages=tuple(tuple(s) for s in self.backbone_stages),
                n_classes=len(self.class_names),
                patch_size=self.patch_size,
            ),
            aggregator=self.aggregator,
            attention_placement=self.attention_placement if self.aggregator == "attention" else (),
            n_crops=self.patch_crops,
            gru_hidden=self.gru_hidden,
        )

    def benign_indices(self) -> frozenset[int]:
        return frozenset(self.class_names.index(c) for c in self.benign_classes)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_toml(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name} = {_toml_value(v)}")
        return "\n".join(lines) + "\n"


def _tuplify(v):
    if isinstance(v, (list, tuple)):
        return tuple(_tuplify(x) for x in v)
    return v


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k} = {_toml_value(x)}" for k, x in v.items()) + "}"
    raise TypeError(f"cannot serialize {v!r}")


def _coerce(name: str, raw):
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    if name not in fields:
        raise ConfigError(f"unknown config key {name!r}")
    default = getattr(ExperimentConfig(), name)
    if isinstance(raw, str) and isinstance(default, tuple) and not raw.lstrip().startswith("["):
        raw = [_coerce_item(x.strip(), default) for x in raw.split(",") if x.strip()]
    elif isinstance(raw, str) and not isinstance(default, str) and default is not None:
        try:
            raw = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse value for {name}: {raw!r}") from exc
    if isinstance(default, bool) and not isinstance(raw, bool):
        raise ConfigError(f"{name} must be true or false, got {raw!r}")
    if isinstance(default, float) and isinstance(raw, int) and not isinstance(raw, bool):
        raw = float(raw)
    if isinstance(default, tuple) and isinstance(raw, str):
        raw = [raw]
    return _tuplify(raw) if isinstance(raw, list) else raw


def _coerce_item(raw: str, default: tuple):
    if default and isinstance(default[0], str):
        return raw
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse list item {raw!r}") from exc


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), raw.strip())
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        values = {k: _coerce(k, v) for k, v in raw.items()}
    values.update(overrides or {})
    return ExperimentConfig(**values)

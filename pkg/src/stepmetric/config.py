"""Experiment configuration: one YAML file drives generation, training
and evaluation.

Schema (all keys optional unless noted):

    dataset:
      root: data/desk            # where gen-data writes / train reads
      n_steps: 8
      image_size: 64
      seed: 11
      images_per_split: {train: 40, val: 50, test: 50}
      error_test_images: 50
      jitter:
        translation_px: [-2.0, 2.0]
        brightness: [0.90, 1.10]
        tint: [0.00, 0.06]
      occluder:
        count: [1, 3]
        coverage: [0.30, 0.80]
    train:
      mode: quadruplet           # or triplet
      total_epochs: 100
      anomaly_start_epoch: 50
      learning_rate: 0.0001
      batch_size: 8
      k: 10
      seed: 0
      checkpoint_every: 50
      optimizer: adam            # or sgd
      anomaly_source: uniform-other   # or exclude-neighborhood
      arch:
        input_size: 64
        conv_channels: [16, 32, 64, 128]
        embed_dim: 64
        two_digit_guard: true
      loss:
        m_alpha: 1.0
        m_beta: 1.0
        m_c: 1.0
        distance: squared_euclidean
      erasing:
        area_ratio: [0.02, 0.4]
        aspect: [0.3, 3.3]
        applications: 2

Validation collects every problem before failing so a broken file is
fixed in one pass.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import RandomErasingParams
from .datagen import DatasetSpec, JitterSpec, OccluderSpec
from .embednet import ArchSpec
from .loss import LossConfig


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("configuration errors:\n  - " + "\n  - ".join(self.errors))


@dataclass
class TrainConfig:
    mode: str = "quadruplet"
    total_epochs: int = 100
    anomaly_start_epoch: int = 50
    learning_rate: float = 0.0001
    batch_size: int = 8
    k: int = 10
    seed: int = 0
    checkpoint_every: int = 50
    optimizer: str = "adam"
    anomaly_source: str = "uniform-other"
    arch: ArchSpec = field(default_factory=ArchSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    erasing: RandomErasingParams = field(default_factory=RandomErasingParams)

    def resolved_loss(self) -> LossConfig:
        """Loss config with the ramp synced to the epoch budget."""
        cfg = copy.deepcopy(self.loss)
        cfg.anomaly_start_epoch = self.anomaly_start_epoch
        cfg.total_epochs = self.total_epochs
        return cfg

    def validate(self) -> None:
        errors = []
        if self.mode not in ("quadruplet", "triplet"):
            errors.append(f"train.mode must be quadruplet or triplet, got {self.mode!r}")
        if self.total_epochs < 1:
            errors.append("train.total_epochs must be >= 1")
        if not 0 < self.anomaly_start_epoch < self.total_epochs:
            errors.append(
                f"train.anomaly_start_epoch must be in 1..{self.total_epochs - 1}, got {self.anomaly_start_epoch}"
            )
        if self.learning_rate <= 0:
            errors.append("train.learning_rate must be positive")
        if self.batch_size < 1:
            errors.append("train.batch_size must be >= 1")
        if self.k < 1:
            errors.append("train.k must be >= 1")
        if self.checkpoint_every < 0:
            errors.append("train.checkpoint_every must be >= 0 (0 disables periodic checkpoints)")
        if self.optimizer not in ("adam", "sgd"):
            errors.append(f"train.optimizer must be adam or sgd, got {self.optimizer!r}")
        for what, obj in (("train.arch", self.arch), ("train.loss", self.resolved_loss()), ("train.erasing", self.erasing)):
            try:
                obj.validate()
            except ValueError as exc:
                errors.append(f"{what}: {exc}")
        if self.anomaly_source not in ("uniform-other", "exclude-neighborhood"):
            errors.append(f"train.anomaly_source must be uniform-other or exclude-neighborhood")
        if errors:
            raise ConfigError(errors)


@dataclass
class RunPreset:
    name: str
    description: str
    overrides: dict[str, object]


# Presets mirroring the published training conditions. The first triplet
# condition predates the two-digit embedding guard, so it disables it.
PRESETS: dict[str, RunPreset] = {
    p.name: p
    for p in [
        RunPreset(
            "triplet-cond1",
            "triplet baseline: 100 epochs, anomaly start 50, k=10, 128-dim embedding",
            {
                "train.mode": "triplet", "train.total_epochs": 100, "train.anomaly_start_epoch": 50,
                "train.k": 10, "train.learning_rate": 0.0001,
                "train.arch.embed_dim": 128, "train.arch.two_digit_guard": False,
            },
        ),
        RunPreset(
            "triplet-cond2",
            "triplet baseline: 100 epochs, anomaly start 50, k=10, 64-dim embedding",
            {
                "train.mode": "triplet", "train.total_epochs": 100, "train.anomaly_start_epoch": 50,
                "train.k": 10, "train.learning_rate": 0.0001, "train.arch.embed_dim": 64,
            },
        ),
        RunPreset(
            "triplet-cond3",
            "triplet baseline: 200 epochs, anomaly start 100, k=10, 32-dim embedding",
            {
                "train.mode": "triplet", "train.total_epochs": 200, "train.anomaly_start_epoch": 100,
                "train.k": 10, "train.learning_rate": 0.0001, "train.arch.embed_dim": 32,
            },
        ),
        RunPreset(
            "triplet-cond4",
            "triplet baseline: 100 epochs, anomaly start 50, k=10, 32-dim embedding",
            {
                "train.mode": "triplet", "train.total_epochs": 100, "train.anomaly_start_epoch": 50,
                "train.k": 10, "train.learning_rate": 0.0001, "train.arch.embed_dim": 32,
            },
        ),
        RunPreset(
            "triplet-cond5",
            "triplet baseline: 200 epochs, anomaly start 50, k=10, 32-dim embedding",
            {
                "train.mode": "triplet", "train.total_epochs": 200, "train.anomaly_start_epoch": 50,
                "train.k": 10, "train.learning_rate": 0.0001, "train.arch.embed_dim": 32,
            },
        ),
        RunPreset(
            "quadruplet-cond1",
            "quadruplet: 250 epochs, anomaly start 100, k=10, 64-dim embedding",
            {
                "train.mode": "quadruplet", "train.total_epochs": 250, "train.anomaly_start_epoch": 100,
                "train.k": 10, "train.learning_rate": 0.0001, "train.arch.embed_dim": 64,
            },
        ),
    ]
}


def _pair(value, what, errors, cast=float):
    try:
        lo, hi = value
        return (cast(lo), cast(hi))
    except (TypeError, ValueError):
        errors.append(f"{what} must be a [lo, hi] pair, got {value!r}")
        return None


def dataset_spec_from_dict(d: dict, errors: list[str] | None = None) -> DatasetSpec:
    own = errors if errors is not None else []
    spec = DatasetSpec()
    simple = {"n_steps": int, "image_size": int, "seed": int, "error_test_images": int}
    for key, cast in simple.items():
        if key in d:
            try:
                setattr(spec, key, cast(d[key]))
            except (TypeError, ValueError):
                own.append(f"dataset.{key} must be an integer, got {d[key]!r}")
    if "images_per_split" in d:
        try:
            spec.images_per_split = {str(k): int(v) for k, v in dict(d["images_per_split"]).items()}
        except (TypeError, ValueError):
            own.append(f"dataset.images_per_split must map split names to counts")
    j = d.get("jitter", {})
    jit = JitterSpec()
    for name in ("translation_px", "brightness", "tint"):
        if name in j:
            pair = _pair(j[name], f"dataset.jitter.{name}", own)
            if pair:
                setattr(jit, name, pair)
    spec.jitter = jit
    o = d.get("occluder", {})
    occ = OccluderSpec()
    if "count" in o:
        pair = _pair(o["count"], "dataset.occluder.count", own, cast=int)
        if pair:
            occ.count = pair
    if "coverage" in o:
        pair = _pair(o["coverage"], "dataset.occluder.coverage", own)
        if pair:
            occ.coverage = pair
    spec.occluder = occ
    try:
        spec.validate()
    except ValueError as exc:
        own.append(f"dataset: {exc}")
    if errors is None and own:
        raise ConfigError(own)
    return spec


def dataset_spec_to_dict(spec: DatasetSpec) -> dict:
    return {
        "n_steps": spec.n_steps,
        "image_size": spec.image_size,
        "seed": spec.seed,
        "error_test_images": spec.error_test_images,
        "images_per_split": dict(spec.images_per_split),
        "jitter": {
            "translation_px": list(spec.jitter.translation_px),
            "brightness": list(spec.jitter.brightness),
            "tint": list(spec.jitter.tint),
        },
        "occluder": {"count": list(spec.occluder.count), "coverage": list(spec.occluder.coverage)},
    }


def train_config_from_dict(d: dict, errors: list[str] | None = None) -> TrainConfig:
    own = errors if errors is not None else []
    cfg = TrainConfig()
    simple = {
        "mode": str, "total_epochs": int, "anomaly_start_epoch": int, "learning_rate": float,
        "batch_size": int, "k": int, "seed": int, "checkpoint_every": int,
        "optimizer": str, "anomaly_source": str,
    }
    for key, cast in simple.items():
        if key in d:
            try:
                setattr(cfg, key, cast(d[key]))
            except (TypeError, ValueError):
                own.append(f"train.{key}: cannot interpret {d[key]!r}")
    a = d.get("arch", {})
    arch = ArchSpec()
    for key, cast in {"input_size": int, "embed_dim": int, "two_digit_guard": bool}.items():
        if key in a:
            try:
                setattr(arch, key, cast(a[key]))
            except (TypeError, ValueError):
                own.append(f"train.arch.{key}: cannot interpret {a[key]!r}")
    if "conv_channels" in a:
        try:
            arch.conv_channels = tuple(int(c) for c in a["conv_channels"])
        except (TypeError, ValueError):
            own.append(f"train.arch.conv_channels must be a list of 4 counts")
    cfg.arch = arch
    l = d.get("loss", {})
    lcfg = LossConfig()
    for key in ("m_alpha", "m_beta", "m_c"):
        if key in l:
            try:
                setattr(lcfg, key, float(l[key]))
            except (TypeError, ValueError):
                own.append(f"train.loss.{key} must be a number")
    if "distance" in l:
        lcfg.distance = str(l["distance"])
    if "triplet_m_alpha" in l and l["triplet_m_alpha"] is not None:
        lcfg.triplet_m_alpha = float(l["triplet_m_alpha"])
    if "triplet_m_c" in l and l["triplet_m_c"] is not None:
        lcfg.triplet_m_c = float(l["triplet_m_c"])
    cfg.loss = lcfg
    e = d.get("erasing", {})
    er = RandomErasingParams()
    for name in ("area_ratio", "aspect"):
        if name in e:
            pair = _pair(e[name], f"train.erasing.{name}", own)
            if pair:
                setattr(er, name, pair)
    if "applications" in e:
        try:
            er.applications = int(e["applications"])
        except (TypeError, ValueError):
            own.append("train.erasing.applications must be an integer")
    cfg.erasing = er
    try:
        cfg.validate()
    except ConfigError as exc:
        own.extend(exc.errors)
    if errors is None and own:
        raise ConfigError(own)
    return cfg


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "mode": cfg.mode,
        "total_epochs": cfg.total_epochs,
        "anomaly_start_epoch": cfg.anomaly_start_epoch,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "k": cfg.k,
        "seed": cfg.seed,
        "checkpoint_every": cfg.checkpoint_every,
        "optimizer": cfg.optimizer,
        "anomaly_source": cfg.anomaly_source,
        "arch": {
            "input_size": cfg.arch.input_size,
            "conv_channels": list(cfg.arch.conv_channels),
            "embed_dim": cfg.arch.embed_dim,
            "two_digit_guard": cfg.arch.two_digit_guard,
        },
        "loss": {
            "m_alpha": cfg.loss.m_alpha,
            "m_beta": cfg.loss.m_beta,
            "m_c": cfg.loss.m_c,
            "distance": cfg.loss.distance,
            "triplet_m_alpha": cfg.loss.triplet_m_alpha,
            "triplet_m_c": cfg.loss.triplet_m_c,
        },
        "erasing": {
            "area_ratio": list(cfg.erasing.area_ratio),
            "aspect": list(cfg.erasing.aspect),
            "applications": cfg.erasing.applications,
        },
    }


def apply_overrides(raw: dict, overrides: dict[str, object]) -> dict:
    """Apply dot-path overrides (e.g. 'train.arch.embed_dim') to a raw
    config dict, creating intermediate tables as needed."""
    out = copy.deepcopy(raw)
    for path, value in overrides.items():
        node = out
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override {path}: {part} is not a table"])
        node[parts[-1]] = value
    return out


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    train: TrainConfig
    dataset_root: str | None
    raw: dict


def load_experiment_config(path: Path | str, overrides: dict[str, object] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"cannot parse {path}: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError([f"{path} must contain a mapping at top level"])
    if overrides:
        raw = apply_overrides(raw, overrides)
    errors: list[str] = []
    dataset = dataset_spec_from_dict(raw.get("dataset", {}) or {}, errors)
    train = train_config_from_dict(raw.get("train", {}) or {}, errors)
    root = (raw.get("dataset", {}) or {}).get("root")
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(dataset, train, root, raw)


def dump_resolved(cfg: ExperimentConfig, path: Path | str, extra: dict | None = None) -> None:
    doc = {
        "dataset": {**dataset_spec_to_dict(cfg.dataset), "root": cfg.dataset_root},
        "train": train_config_to_dict(cfg.train),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))

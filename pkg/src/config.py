"""Dataclass configuration for every pipeline stage, bound from YAML sections."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import yaml

from .errors import ConfigError

LINKAGES = ("single", "complete", "average")
OBJECTIVES = ("geodesic", "cosine", "baseline")
PROTOTYPE_MODES = ("local", "global", "hierarchical")
POOLINGS = ("concat", "mean")


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


@dataclass
class LossConfig:
    """Margin, clamp and temperature shared by the manifold and cosine losses."""

    margin: float = 1.0
    inter_clamp: bool = True
    temperature: float = 0.5
    class_pair_mode: str = "ordered_mean"

    def validate(self) -> "LossConfig":
        _require(self.margin > 0, f"loss.margin must be > 0 (got {self.margin})")
        _require(self.temperature > 0, f"loss.temperature must be > 0 (got {self.temperature})")
        _require(self.class_pair_mode == "ordered_mean", f"unknown class_pair_mode {self.class_pair_mode!r}")
        return self


@dataclass
class TrainConfig:
    """Stage-1 encoder training; defaults follow the IHCC operating point."""

    lr: float = 1e-4
    lr_decay: float = 1e-6
    batch_size: int = 64
    epochs: int = 50
    refresh_every: int = 5
    k: int = 5
    n: int = 10
    linkage: str = "average"
    seed: int = 0
    hidden_dims: List[int] = field(default_factory=lambda: [64, 64])
    embed_dim: int = 32
    objective: str = "geodesic"
    prototype_mode: str = "local"
    global_graph: bool = False
    n_jobs: int = 1
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self) -> None:
        if isinstance(self.loss, Mapping):
            self.loss = LossConfig(**self.loss)
        self.hidden_dims = [int(dim) for dim in self.hidden_dims]

    @property
    def subclasses(self) -> int:
        """Sub-classes per class actually clustered (``global`` forces one)."""

        return 1 if self.prototype_mode == "global" else self.n

    def validate(self) -> "TrainConfig":
        _require(self.lr >= 0, f"encoder.lr must be >= 0 (got {self.lr})")
        _require(self.lr_decay >= 0, f"encoder.lr_decay must be >= 0 (got {self.lr_decay})")
        _require(self.batch_size >= 1, f"encoder.batch_size must be >= 1 (got {self.batch_size})")
        _require(self.epochs >= 0, f"encoder.epochs must be >= 0 (got {self.epochs})")
        _require(self.refresh_every >= 1, f"encoder.refresh_every must be >= 1 (got {self.refresh_every})")
        _require(self.k >= 1, f"encoder.k must be >= 1 (got {self.k})")
        _require(self.n >= 1, f"encoder.n must be >= 1 (got {self.n})")
        _require(self.linkage in LINKAGES, f"encoder.linkage must be one of {LINKAGES} (got {self.linkage!r})")
        _require(self.objective in OBJECTIVES, f"encoder.objective must be one of {OBJECTIVES} (got {self.objective!r})")
        _require(
            self.prototype_mode in PROTOTYPE_MODES,
            f"encoder.prototype_mode must be one of {PROTOTYPE_MODES} (got {self.prototype_mode!r})",
        )
        _require(len(self.hidden_dims) >= 1, "encoder.hidden_dims needs at least one trunk layer")
        _require(all(dim >= 1 for dim in self.hidden_dims), f"encoder.hidden_dims must be positive ({self.hidden_dims})")
        _require(self.embed_dim >= 1, f"encoder.embed_dim must be >= 1 (got {self.embed_dim})")
        _require(self.n_jobs != 0, "encoder.n_jobs must be non-zero")
        _require(self.seed >= 0, f"encoder.seed must be >= 0 (got {self.seed})")
        self.loss.validate()
        return self


@dataclass
class MilConfig:
    """Stage-2 bagging and bag classifier."""

    bags_per_slide: int = 50
    patches_per_bag: int = 100
    classifier_hidden: int = 512
    lr: float = 1e-3
    decay: float = 1e-6
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    pooling: str = "concat"

    def validate(self) -> "MilConfig":
        _require(self.bags_per_slide >= 1, f"mil.bags_per_slide must be >= 1 (got {self.bags_per_slide})")
        _require(self.patches_per_bag >= 1, f"mil.patches_per_bag must be >= 1 (got {self.patches_per_bag})")
        _require(self.classifier_hidden >= 1, f"mil.classifier_hidden must be >= 1 (got {self.classifier_hidden})")
        _require(self.lr >= 0, f"mil.lr must be >= 0 (got {self.lr})")
        _require(self.decay >= 0, f"mil.decay must be >= 0 (got {self.decay})")
        _require(self.epochs >= 0, f"mil.epochs must be >= 0 (got {self.epochs})")
        _require(self.batch_size >= 1, f"mil.batch_size must be >= 1 (got {self.batch_size})")
        _require(self.pooling in POOLINGS, f"mil.pooling must be one of {POOLINGS} (got {self.pooling!r})")
        _require(self.seed >= 0, f"mil.seed must be >= 0 (got {self.seed})")
        return self


@dataclass
class SynthConfig:
    """Interleaved-manifold benchmark; defaults give 200 train / 100 test points."""

    n_per_class: int = 150
    noise: float = 0.05
    turns: float = 1.5
    groups_per_class: int = 15
    height: float = 0.3
    lift_dim: Optional[int] = None
    train_fraction: float = 2.0 / 3.0
    seed: int = 7

    def validate(self) -> "SynthConfig":
        _require(self.n_per_class >= 4, f"synth.n_per_class must be >= 4 (got {self.n_per_class})")
        _require(self.noise >= 0, f"synth.noise must be >= 0 (got {self.noise})")
        _require(self.groups_per_class >= 1, f"synth.groups_per_class must be >= 1 (got {self.groups_per_class})")
        _require(0 < self.train_fraction < 1, f"synth.train_fraction must lie in (0, 1) (got {self.train_fraction})")
        _require(self.lift_dim is None or self.lift_dim >= 3, f"synth.lift_dim must be >= 3 (got {self.lift_dim})")
        return self


@dataclass
class ExperimentConfig:
    variant: str = "geodesic"
    repeats: int = 10
    log_dir: Optional[str] = None

    def validate(self) -> "ExperimentConfig":
        _require(self.variant in OBJECTIVES, f"experiment.variant must be one of {OBJECTIVES} (got {self.variant!r})")
        _require(self.repeats >= 1, f"experiment.repeats must be >= 1 (got {self.repeats})")
        return self


@dataclass
class PipelineConfig:
    """All sections of one YAML configuration file."""

    synth: SynthConfig = field(default_factory=SynthConfig)
    encoder: TrainConfig = field(default_factory=TrainConfig)
    mil: MilConfig = field(default_factory=MilConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def validate(self) -> "PipelineConfig":
        self.synth.validate()
        self.encoder.validate()
        self.mil.validate()
        self.experiment.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["loss"] = payload["encoder"].pop("loss")
        return payload

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


_SECTIONS = {"synth", "loss", "encoder", "mil", "experiment"}


def _coerce(raw: str) -> Any:
    return yaml.safe_load(raw)


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Dict[str, Any]]:
    """Turn ``section.key=value`` strings into nested override dicts."""

    out: Dict[str, Dict[str, Any]] = {}
    for pair in pairs:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigError(f"override {pair!r} must look like section.key=value")
        dotted, raw = pair.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"override {pair!r}: unknown section {section!r}")
        out.setdefault(section, {})[key] = _coerce(raw)
    return out


def _merge(base: Dict[str, Any], extra: Mapping[str, Mapping[str, Any]]) -> Dict[str, Any]:
    merged = {section: dict(values or {}) for section, values in base.items()}
    for section, values in extra.items():
        merged.setdefault(section, {}).update(values)
    return merged


def _bind(cls, values: Mapping[str, Any], section: str):
    known = {item.name for item in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    return cls(**values)


def load_pipeline_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Mapping[str, Any]]] = None,
) -> PipelineConfig:
    """Dataclass defaults < YAML file < overrides; the result is validated."""

    raw: Dict[str, Any] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as handle:
            raw = yaml.safe_load(handle) or {}
        stray = sorted(set(raw) - _SECTIONS)
        if stray:
            raise ConfigError(f"{path}: unknown sections {', '.join(stray)}")
    merged = _merge(raw, overrides or {})
    encoder_values = dict(merged.get("encoder", {}))
    encoder_values["loss"] = _bind(LossConfig, merged.get("loss", {}), "loss")
    cfg = PipelineConfig(
        synth=_bind(SynthConfig, merged.get("synth", {}), "synth"),
        encoder=_bind(TrainConfig, encoder_values, "encoder"),
        mil=_bind(MilConfig, merged.get("mil", {}), "mil"),
        experiment=_bind(ExperimentConfig, merged.get("experiment", {}), "experiment"),
    )
    return cfg.validate()


def split_dims(layer_dims: Tuple[int, ...]) -> Tuple[int, List[int]]:
    """``(input_dim, hidden_dims)`` from a full trunk dimension list."""

    if len(layer_dims) < 2:
        raise ConfigError(f"layer_dims {list(layer_dims)} needs an input and at least one trunk layer")
    return int(layer_dims[0]), [int(dim) for dim in layer_dims[1:]]


__all__ = [
    "LINKAGES",
    "OBJECTIVES",
    "PROTOTYPE_MODES",
    "POOLINGS",
    "LossConfig",
    "TrainConfig",
    "MilConfig",
    "SynthConfig",
    "ExperimentConfig",
    "PipelineConfig",
    "parse_overrides",
    "load_pipeline_config",
    "split_dims",
]

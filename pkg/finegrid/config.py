"""Run configuration: one dataclass per config section, loaded from JSON."""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar

from .errors import ConfigError

T = TypeVar("T")

THRESHOLD_MODES = ("absolute", "percentile")
SIMILARITY_MODES = ("exp_inner", "raw_inner")
TRAIN_MODES = ("two_stage", "end_to_end")
DIFF_LOSS_FORMS = ("as_written", "penalize_similarity")
BRANCHES = ("both", "neighborhood", "city")


def _require(ok: bool, key: str, message: str):
    if not ok:
        raise ConfigError(f"{key}: {message}")


@dataclass
class SynthConfig:
    """Synthetic flow generator settings. ``height``/``width`` are coarse dims."""
    height: int = 8
    width: int = 8
    upscale: int = 2
    frames: int = 1440
    slots_per_day: int = 48
    blobs: int = 3
    blob_speed: float = 1.0
    blob_width: float = 1.5
    peak: float = 20.0
    noise: float = 0.5
    seed: int = 0

    def validate(self, section: str = "data"):
        for name in ("height", "width", "upscale", "frames", "slots_per_day", "blobs"):
            _require(getattr(self, name) >= 1, f"{section}.{name}", "must be >= 1")
        _require(self.blob_speed >= 0, f"{section}.blob_speed", "must be >= 0")
        _require(self.blob_width > 0, f"{section}.blob_width", "must be > 0")
        _require(self.peak > 0, f"{section}.peak", "must be > 0")
        _require(self.noise >= 0, f"{section}.noise", "must be >= 0")
        _require(self.seed >= 0, f"{section}.seed", "must be >= 0")


@dataclass
class DataConfig(SynthConfig):
    """Generator settings plus the chronological split fractions."""
    train_frac: float = 0.7
    val_frac: float = 0.1

    def validate(self, section: str = "data"):
        super().validate(section)
        _require(0 < self.train_frac < 1, f"{section}.train_frac", "must be in (0, 1)")
        _require(0 <= self.val_frac < 1, f"{section}.val_frac", "must be in [0, 1)")
        _require(self.train_frac + self.val_frac < 1, f"{section}.val_frac",
                 "train_frac + val_frac must leave room for a test split")


@dataclass
class SamplerConfig:
    """Positive/negative selection: thresholds, Top-K and threshold mode."""
    delta: float = 0.5
    theta: float = 0.5
    k: int = 8
    threshold_mode: str = "percentile"
    percentile: float = 0.2

    def validate(self, section: str = "sampler"):
        _require(self.k >= 1, f"{section}.k", "must be >= 1")
        _require(self.threshold_mode in THRESHOLD_MODES, f"{section}.threshold_mode",
                 f"must be one of {', '.join(THRESHOLD_MODES)}")
        _require(0 < self.percentile < 1, f"{section}.percentile", "must be in (0, 1)")
        _require(self.delta >= 0, f"{section}.delta", "must be >= 0")
        _require(self.theta >= 0, f"{section}.theta", "must be >= 0")


@dataclass
class ModelConfig:
    """Encoder / decoder widths and shapes."""
    channels: int = 16
    kernel_size: int = 3
    dilation: int = 1
    heads: int = 4
    city_blocks: int = 2
    neighborhood_layers: int = 2
    ln_eps: float = 1e-5
    branches: str = "both"
    init_scale: float = 1.0

    def validate(self, section: str = "model"):
        _require(self.channels >= 4 and self.channels % 4 == 0, f"{section}.channels",
                 "must be a positive multiple of 4")
        _require(self.kernel_size >= 1 and self.kernel_size % 2 == 1, f"{section}.kernel_size",
                 "must be odd and >= 1")
        _require(self.dilation >= 1, f"{section}.dilation", "must be >= 1")
        _require(self.heads >= 1, f"{section}.heads", "must be >= 1")
        _require(self.channels % self.heads == 0, f"{section}.heads",
                 f"{self.heads} heads do not divide {self.channels} channels")
        _require(self.city_blocks >= 1, f"{section}.city_blocks", "must be >= 1")
        _require(self.neighborhood_layers >= 1, f"{section}.neighborhood_layers", "must be >= 1")
        _require(self.ln_eps > 0, f"{section}.ln_eps", "must be > 0")
        _require(self.branches in BRANCHES, f"{section}.branches",
                 f"must be one of {', '.join(BRANCHES)}")
        _require(self.init_scale > 0, f"{section}.init_scale", "must be > 0")

    @property
    def uses_neighborhood(self) -> bool:
        return self.branches in ("both", "neighborhood")

    @property
    def uses_city(self) -> bool:
        return self.branches in ("both", "city")


@dataclass
class PretrainConfig:
    """Contrastive pretraining settings (Stages I and II)."""
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    temperature: float = 0.5
    similarity_mode: str = "exp_inner"
    max_city_anchors: int = 256
    frames_per_epoch: int = 0  # 0 = every training frame
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def validate(self, section: str = "pretrain"):
        _require(self.epochs >= 1, f"{section}.epochs", "must be >= 1")
        _require(self.batch_size >= 1, f"{section}.batch_size", "must be >= 1")
        _require(self.lr > 0, f"{section}.lr", "must be > 0")
        _require(self.temperature > 0, f"{section}.temperature", "must be > 0")
        _require(self.similarity_mode in SIMILARITY_MODES, f"{section}.similarity_mode",
                 f"must be one of {', '.join(SIMILARITY_MODES)}")
        _require(self.max_city_anchors >= 1, f"{section}.max_city_anchors", "must be >= 1")
        _require(self.frames_per_epoch >= 0, f"{section}.frames_per_epoch", "must be >= 0")
        _require(self.seed >= 0, f"{section}.seed", "must be >= 0")
        self.sampler.validate()


@dataclass
class TrainConfig:
    """Stage III / end-to-end supervised training settings."""
    lam: float = 0.1
    alpha: float = 1.0
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    mode: str = "two_stage"
    freeze_encoders: bool = False
    diff_loss_form: str = "as_written"

    def validate(self, section: str = "train"):
        _require(self.lam >= 0, f"{section}.lam", "must be >= 0")
        _require(self.alpha > 0, f"{section}.alpha", "must be > 0")
        _require(self.lr > 0, f"{section}.lr", "must be > 0")
        _require(self.epochs >= 1, f"{section}.epochs", "must be >= 1")
        _require(self.batch_size >= 1, f"{section}.batch_size", "must be >= 1")
        _require(self.seed >= 0, f"{section}.seed", "must be >= 0")
        _require(self.mode in TRAIN_MODES, f"{section}.mode",
                 f"must be one of {', '.join(TRAIN_MODES)}")
        _require(self.diff_loss_form in DIFF_LOSS_FORMS, f"{section}.diff_loss_form",
                 f"must be one of {', '.join(DIFF_LOSS_FORMS)}")


@dataclass
class EvalConfig:
    """Metric settings."""
    mape_mask_threshold: float = 1.0
    constraint_tol: float = 1e-4

    def validate(self, section: str = "eval"):
        _require(self.mape_mask_threshold >= 0, f"{section}.mape_mask_threshold", "must be >= 0")
        _require(self.constraint_tol > 0, f"{section}.constraint_tol", "must be > 0")


def _coerce(value: Any, default: Any, key: str) -> Any:
    """Convert a JSON value to the type of the field default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def section_from_dict(cls: Type[T], raw: Any, section: str) -> T:
    """Build a section dataclass, rejecting unknown keys by their dotted name."""
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object, got {type(raw).__name__}")
    defaults = cls()
    known = {f.name for f in fields(cls) if not isinstance(getattr(defaults, f.name), SamplerConfig)}
    values = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {section}.{key}")
        values[key] = _coerce(value, getattr(defaults, key), f"{section}.{key}")
    return cls(**values)


@dataclass
class RunConfig:
    """The full configuration document shared by every subcommand."""
    data: DataConfig = field(default_factory=DataConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = {
        "data": DataConfig,
        "sampler": SamplerConfig,
        "model": ModelConfig,
        "pretrain": PretrainConfig,
        "train": TrainConfig,
        "eval": EvalConfig,
    }

    def __post_init__(self):
        self.pretrain.sampler = self.sampler

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config document must be a JSON object")
        for name in raw:
            if name not in cls.SECTIONS:
                raise ConfigError(f"unknown config section {name}")
        sections = {name: section_from_dict(kind, raw.get(name), name)
                    for name, kind in cls.SECTIONS.items()}
        return cls(**sections)

    @classmethod
    def load(cls, path: Optional[Path]) -> "RunConfig":
        """Load and validate a JSON config file; ``None`` gives the defaults."""
        if path is None:
            config = cls()
        else:
            try:
                with open(path, "r") as f:
                    raw = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: not valid JSON ({e})") from None
            config = cls.from_dict(raw)
        config.validate()
        return config

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        """Apply a global seed to every seeded section."""
        if seed is not None:
            _require(seed >= 0, "--seed", "must be >= 0")
            self.data.seed = seed
            self.pretrain.seed = seed
            self.train.seed = seed
        return self

    def validate(self):
        self.data.validate()
        self.sampler.validate()
        self.model.validate()
        self.pretrain.validate()
        self.train.validate()
        self.eval.validate()

    def to_dict(self) -> Dict[str, Any]:
        result = {}
        for name in self.SECTIONS:
            section = asdict(getattr(self, name))
            section.pop("sampler", None)
            result[name] = section
        return result

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

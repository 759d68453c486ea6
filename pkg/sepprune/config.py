"""
Run configuration: an INI file whose sections are validated into pydantic models. Unknown sections and keys are
rejected; every key has a default, so an empty file is a valid configuration.
"""
import configparser
import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from sepprune.core.errors import ConfigError

log = logging.getLogger("root")

OUTPUT_ROOT_ENV = "SEPPRUNE_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Section):
    encoder_channels: int = Field(64, ge=1)
    blocks: int = Field(4, ge=1)
    block_channels: int = Field(128, ge=1)
    kernel: int = Field(3, ge=1)
    speakers: int = Field(2, ge=1, le=4)
    encoder_kernel: int = Field(16, ge=1)
    encoder_stride: int = Field(8, ge=1)
    seed: int = 0

    @field_validator("kernel")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("separator kernel must be odd")
        return value

    def builder_kwargs(self) -> Dict[str, int]:
        return self.model_dump()


class DataConfig(_Section):
    n_train: int = Field(512, ge=1)
    n_val: int = Field(64, ge=1)
    n_test: int = Field(64, ge=1)
    base_seed: int = 0
    length: int = Field(16000, ge=256)
    sample_rate: int = Field(8000, ge=1)
    source_snr_low: float = -5.0
    source_snr_high: float = 5.0
    noise_snr_low: Optional[float] = None
    noise_snr_high: Optional[float] = None

    @model_validator(mode="after")
    def _ranges(self) -> "DataConfig":
        if self.source_snr_low > self.source_snr_high:
            raise ValueError("source_snr_low must not exceed source_snr_high")
        if (self.noise_snr_low is None) != (self.noise_snr_high is None):
            raise ValueError("noise_snr_low and noise_snr_high must be given together")
        if self.noise_snr_low is not None and self.noise_snr_low > self.noise_snr_high:
            raise ValueError("noise_snr_low must not exceed noise_snr_high")
        return self

    def fingerprint(self) -> str:
        """Short hash of this section; equal fingerprints describe the same utterances."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    @property
    def source_snr_range(self) -> Tuple[float, float]:
        return self.source_snr_low, self.source_snr_high

    @property
    def noise_snr_range(self) -> Optional[Tuple[float, float]]:
        if self.noise_snr_low is None:
            return None
        return self.noise_snr_low, self.noise_snr_high


class TrainConfig(_Section):
    lr: float = Field(0.001, gt=0)
    batch_size: int = Field(1, ge=1)
    max_epochs: int = Field(30, ge=0)
    plateau_patience: int = Field(15, ge=1)
    early_stop_patience: int = Field(30, ge=1)
    finetune_epochs: int = Field(1, ge=0)
    seed: int = 0


class MaskConfig(_Section):
    threshold: float = Field(0.7, gt=0, lt=1)
    temperature: float = Field(1.0, gt=0)
    schedule: str = "constant"
    temperature_end: float = Field(0.5, gt=0)
    iterations: int = Field(500, ge=0)
    lr: float = Field(0.1, gt=0)
    seed: int = 0

    @field_validator("schedule")
    @classmethod
    def _known_schedule(cls, value: str) -> str:
        if value not in ("constant", "linear"):
            raise ValueError("schedule must be 'constant' or 'linear'")
        return value


class AblationConfig(_Section):
    thresholds: List[float] = [0.5, 0.6, 0.7, 0.8, 0.9]
    iterations: List[int] = [300, 500, 700, 900, 1100]
    seeds: List[int] = Field([0, 1, 2, 3, 4], min_length=1)
    timing_runs: int = Field(1000, ge=1)
    scratch_max_epochs: int = Field(30, ge=1)

    @field_validator("thresholds", "iterations", "seeds", mode="before")
    @classmethod
    def _split_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value


class RunSection(_Section):
    output: Optional[str] = None
    seed: int = 4551546
    workers: int = Field(1, ge=1)
    progress: bool = False


SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "mask": MaskConfig,
    "ablation": AblationConfig,
    "run": RunSection,
}


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, protected_namespaces=())

    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    mask: MaskConfig = MaskConfig()
    ablation: AblationConfig = AblationConfig()
    run: RunSection = RunSection()

    @staticmethod
    def load(path: Optional[str] = None) -> "RunConfig":
        """Reads and validates an INI file; no path gives the defaults."""
        if path is None:
            return RunConfig()
        if not os.path.isfile(path):
            raise ConfigError("Config file {} does not exist".format(path))
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        try:
            with open(path) as f:
                parser.read_file(f)
        except configparser.Error as ex:
            raise ConfigError("Cannot parse {}: {}".format(path, ex)) from ex
        return RunConfig.from_sections({section: dict(parser.items(section)) for section in parser.sections()})

    @staticmethod
    def from_sections(sections: Dict[str, Dict[str, Any]]) -> "RunConfig":
        unknown = sorted(set(sections) - set(SECTIONS))
        if unknown:
            raise ConfigError("Unknown config sections: {}".format(", ".join(unknown)))
        values = {
            name: {key: _blank_to_none(value) for key, value in items.items()} for name, items in sections.items()
        }
        try:
            config = RunConfig(**values)
        except ValidationError as ex:
            raise ConfigError(_describe_errors(ex)) from ex
        log.debug("Loaded config with hash {}".format(config.config_hash()))
        return config

    def with_overrides(self, **sections: Dict[str, Any]) -> "RunConfig":
        """A copy with some keys replaced, e.g. with_overrides(mask={"threshold": 0.8}), validated again."""
        values = self.model_dump()
        for name, items in sections.items():
            if name not in SECTIONS:
                raise ConfigError("Unknown config section: {}".format(name))
            values[name].update(items)
        try:
            return RunConfig(**values)
        except ValidationError as ex:
            raise ConfigError(_describe_errors(ex)) from ex

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def output_root(self, override: Optional[str] = None) -> str:
        return override or self.run.output or os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT


def _blank_to_none(value: Any) -> Any:
    if isinstance(value, str) and not value.strip():
        return None
    return value


def _describe_errors(ex: ValidationError) -> str:
    problems = []
    for error in ex.errors():
        location = ".".join(str(part) for part in error["loc"])
        problems.append("{}: {}".format(location, error["msg"]))
    return "Invalid configuration: " + "; ".join(problems)

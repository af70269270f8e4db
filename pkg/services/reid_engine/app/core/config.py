"""
RTRL DESK - Configuration
Process settings from the environment, run configuration from flat
`section.key = value` files.
"""

import hashlib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import ConfigError


class Settings(BaseSettings):
    """Process settings with environment variable support (RTRL_ prefix)"""

    # Application
    APP_NAME: str = "RTRL Desk"
    APP_VERSION: str = "1.0.0"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = None

    # Outputs
    DEFAULT_OUTPUT_DIR: str = "runs"

    model_config = SettingsConfigDict(
        env_prefix="RTRL_",
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    return settings


# ============================================================
# RUN CONFIGURATION SECTIONS
# ============================================================

def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _none_if_blank(value: Any) -> Any:
    if isinstance(value, str) and value.strip().lower() in ("", "none", "null"):
        return None
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class RunSection(_Section):
    output_dir: str = Field(default_factory=lambda: str(Path(settings.DEFAULT_OUTPUT_DIR) / "default"))
    seed: int = Field(0, ge=0)


class DataConfig(_Section):
    root: str
    min_length: int = Field(1, ge=1)
    cross_root: Optional[str] = None

    @field_validator("cross_root", mode="before")
    @classmethod
    def blank_to_none(cls, value: Any) -> Any:
        return _none_if_blank(value)


class BackboneConfig(_Section):
    input_size: int = Field(64, ge=1)
    kernel_size: int = Field(3, ge=1)
    front_channels: List[int] = [16, 32]
    tail_channels: List[int] = [64, 64]
    front_pool: bool = True
    tail_pool: bool = True
    descriptor_dim: Optional[int] = Field(None, ge=1)

    @field_validator("front_channels", "tail_channels", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("descriptor_dim", mode="before")
    @classmethod
    def blank_to_none(cls, value: Any) -> Any:
        return _none_if_blank(value)

    @field_validator("front_channels", "tail_channels")
    @classmethod
    def _positive_widths(cls, widths: List[int]) -> List[int]:
        if not widths or any(w <= 0 for w in widths):
            raise ValueError("channel widths must be a non-empty list of positive ints")
        return widths

    @model_validator(mode="after")
    def _sizes_divide(self) -> "BackboneConfig":
        pools = len(self.front_channels) * self.front_pool + len(self.tail_channels) * self.tail_pool
        if self.input_size % (2 ** pools) != 0:
            raise ValueError(f"input_size {self.input_size} does not divide evenly through {pools} stride-2 pools")
        return self

    @property
    def front_size(self) -> int:
        return self.input_size // (2 ** (len(self.front_channels) * self.front_pool))

    @property
    def tail_size(self) -> int:
        return self.front_size // (2 ** (len(self.tail_channels) * self.tail_pool))

    @property
    def front_width(self) -> int:
        return self.front_channels[-1]

    @property
    def tail_width(self) -> int:
        return self.tail_channels[-1]

    @property
    def feature_dim(self) -> int:
        return self.descriptor_dim if self.descriptor_dim is not None else self.tail_width


class ST2NConfig(_Section):
    conv_width: int = Field(512, ge=1)
    lstm_hidden: int = Field(256, ge=1)
    dropout: float = Field(0.5, ge=0.0, lt=1.0)
    pool: bool = True
    scale_min: Optional[float] = None
    scale_max: Optional[float] = None
    norm_eps: float = Field(1e-5, gt=0.0)
    norm_momentum: float = Field(0.1, gt=0.0, le=1.0)

    @field_validator("scale_min", "scale_max", mode="before")
    @classmethod
    def blank_to_none(cls, value: Any) -> Any:
        return _none_if_blank(value)

    @model_validator(mode="after")
    def _scale_bounds(self) -> "ST2NConfig":
        if self.scale_min is not None and self.scale_max is not None and self.scale_min > self.scale_max:
            raise ValueError("scale_min must not exceed scale_max")
        return self


class TRLConfig(_Section):
    hidden: int = Field(512, ge=1)


class AblationConfig(_Section):
    temporal_cell: Literal["lstm", "bilstm"] = "bilstm"
    alignment: Literal["none", "stn", "st2n"] = "st2n"
    features: Literal["generic", "specific", "both"] = "both"
    alpha: float = Field(0.5, ge=0.0, le=1.0)
    beta: float = Field(0.5, ge=0.0, le=1.0)

    @property
    def effective_alpha(self) -> float:
        if self.features == "generic":
            return 1.0
        if self.features == "specific":
            return 0.0
        return self.alpha


class TrainConfig(_Section):
    stage1_lr: float = Field(2e-4, gt=0.0)
    stage1_iterations: int = Field(10000, ge=0)
    stage2_lr: float = Field(2e-5, gt=0.0)
    stage2_iterations: int = Field(10000, ge=0)
    batch_size: int = Field(12, ge=1)
    frames: int = Field(10, ge=1)
    clip: float = Field(5.0, gt=0.0)
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    log_interval: int = Field(50, ge=1)
    checkpoint_interval: int = Field(1000, ge=1)


class SynthConfig(_Section):
    num_identities: int = Field(20, ge=1)
    cameras: int = Field(2, ge=1)
    sequences_per_camera: int = Field(2, ge=1)
    frames: int = Field(16, ge=1)
    image_size: int = Field(64, ge=4)
    max_translation_step: float = Field(0.15, ge=0.0)
    max_scale_step: float = Field(0.1, ge=0.0)
    max_offset: float = Field(0.35, ge=0.0, le=1.0)
    scale_spread: float = Field(0.25, ge=0.0, lt=1.0)
    patch_size: float = Field(0.5, gt=0.0, le=1.0)
    clutter_density: float = Field(0.3, ge=0.0)
    appearance_shift: float = Field(0.15, ge=0.0, le=1.0)
    domain_shift: float = Field(0.0, ge=-1.0, le=1.0)
    noise: float = Field(0.02, ge=0.0)
    distractor_sequences: int = Field(0, ge=0)


class EvalConfig(_Section):
    protocol: Literal["fixed", "half10"] = "half10"
    trials: int = Field(10, ge=1)
    ranks: List[int] = [1, 5, 20]
    fixed_train_identities: Optional[int] = Field(None, ge=1)
    probe_camera: int = 1
    gallery_camera: int = 2
    max_frames: int = Field(0, ge=0)
    junk_policy: Literal["distractor", "ignore"] = "distractor"
    exclude_same_camera: bool = True
    streams: List[Literal["fused", "main", "aligned"]] = ["fused", "main", "aligned"]

    @field_validator("ranks", "streams", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("fixed_train_identities", mode="before")
    @classmethod
    def blank_to_none(cls, value: Any) -> Any:
        return _none_if_blank(value)

    @field_validator("ranks")
    @classmethod
    def _positive_ranks(cls, ranks: List[int]) -> List[int]:
        if not ranks or any(k < 1 for k in ranks):
            raise ValueError("ranks must be >= 1")
        return sorted(set(ranks))


class ArchitectureConfig(_Section):
    """Everything needed to instantiate a model"""

    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    st2n: ST2NConfig = Field(default_factory=ST2NConfig)
    trl: TRLConfig = Field(default_factory=TRLConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)


SECTION_ORDER: Tuple[str, ...] = ("run", "data", "backbone", "st2n", "trl", "ablation", "train", "synth", "eval")


class RunConfig(_Section):
    run: RunSection = Field(default_factory=RunSection)
    data: DataConfig
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    st2n: ST2NConfig = Field(default_factory=ST2NConfig)
    trl: TRLConfig = Field(default_factory=TRLConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def architecture(self) -> ArchitectureConfig:
        return ArchitectureConfig(
            backbone=self.backbone, st2n=self.st2n, trl=self.trl, ablation=self.ablation
        )

    def canonical_text(self) -> str:
        lines = []
        dumped = self.model_dump(mode="json")
        for section in SECTION_ORDER:
            for key in sorted(dumped[section]):
                lines.append(f"{section}.{key} = {_render_value(dumped[section][key])}")
        return "\n".join(lines) + "\n"

    def portable_text(self) -> str:
        """Canonical text without run.output_dir; identical for the same run in any directory"""
        lines = self.canonical_text().splitlines(keepends=True)
        return "".join(line for line in lines if not line.startswith("run.output_dir "))

    def digest(self) -> bytes:
        return hashlib.sha256(self.portable_text().encode("utf-8")).digest()

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Return a copy with dotted-key overrides applied and re-validated"""
        mapping = self.model_dump()
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in mapping or not key:
                raise ConfigError(f"unknown config key '{dotted}'", key=dotted)
            mapping[section][key] = value
        return run_config_from_mapping(mapping)


def _render_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_render_value(v) for v in value)
    return str(value)


# ============================================================
# FLAT FILE PARSER
# ============================================================

def parse_config_text(text: str) -> Tuple[Dict[str, Dict[str, str]], Dict[str, int]]:
    """
    Parse `section.key = value` lines.
    Returns the nested mapping and a dotted-key -> line-number map.
    """
    mapping: Dict[str, Dict[str, str]] = {}
    lines: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'section.key = value', got '{raw.strip()}'", line=number)
        dotted, value = (part.strip() for part in line.split("=", 1))
        section, dot, key = dotted.partition(".")
        if not dot or not section or not key:
            raise ConfigError(f"key '{dotted}' has no section prefix", line=number, key=dotted)
        if section not in SECTION_ORDER:
            raise ConfigError(f"unknown section '{section}'", line=number, key=dotted)
        if dotted in lines:
            raise ConfigError(f"duplicate key '{dotted}' (first set on line {lines[dotted]})", line=number, key=dotted)
        mapping.setdefault(section, {})[key] = value
        lines[dotted] = number
    return mapping, lines


def run_config_from_mapping(mapping: Dict[str, Any], lines: Optional[Dict[str, int]] = None) -> RunConfig:
    mapping = {**mapping, "data": mapping.get("data", {})}
    try:
        return RunConfig.model_validate(mapping)
    except ValidationError as exc:
        first = exc.errors()[0]
        dotted = ".".join(str(part) for part in first["loc"])
        if first["type"] == "missing":
            raise ConfigError(f"missing required key '{dotted}'", key=dotted) from None
        if first["type"] == "extra_forbidden":
            raise ConfigError(f"unknown config key '{dotted}'", line=(lines or {}).get(dotted), key=dotted) from None
        raise ConfigError(
            f"invalid value for '{dotted}': {first['msg']}", line=(lines or {}).get(dotted), key=dotted
        ) from None


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    mapping, lines = parse_config_text(text)
    return run_config_from_mapping(mapping, lines)

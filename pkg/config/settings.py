"""
Experiment settings: pydantic models loaded from TOML.
Defaults come from config/defaults.toml; a user file is merged on top.
"""

import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from pydantic import BaseModel, Field, ValidationError, model_validator

logger = logging.getLogger(__name__)

DEFAULTS_FILE = Path(__file__).parent / 'defaults.toml'
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class ConfigError(Exception):
    """Raised when a settings file cannot be read or validated"""


class LoggingSettings(BaseModel):
    level: str = "INFO"
    file: str = ""
    slow_threshold_seconds: float = 1.0


class VMSettings(BaseModel):
    step_limit: int = Field(1_000_000, ge=1)
    stack_base: int = 0x00100000
    stack_size: int = Field(0x00010000, ge=0x400)
    return_sentinel: int = 0xDEAD0000
    equivalence_trials: int = Field(100, ge=1)

    @property
    def stack_limit(self) -> int:
        return self.stack_base + self.stack_size


class SemNopSettings(BaseModel):
    max_depth: int = Field(4, ge=1)
    recursion_p: float = Field(0.5, ge=0.0, le=1.0)
    imm32_p: float = Field(0.25, ge=0.0, le=1.0)
    exact_tries: int = Field(32, ge=1)


class DetectorHyperparams(BaseModel):
    embed_dim: int = Field(8, ge=1)
    filters: int = Field(64, ge=1)
    width: int = Field(16, ge=1)
    stride: int = Field(8, ge=1)
    input_cap: int = Field(16384, ge=1)

    @model_validator(mode='after')
    def _cap_fits_window(self) -> 'DetectorHyperparams':
        if self.input_cap < self.width:
            raise ValueError("input_cap must be at least the convolution width")
        return self


class TrainSettings(BaseModel):
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(32, ge=1)
    optimizer: Literal["adam", "sgd"] = "adam"
    learning_rate: float = Field(1e-3, gt=0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    target_fpr: float = Field(0.001, gt=0.0, lt=1.0)


class DetectorSettings(BaseModel):
    hyperparams: DetectorHyperparams = Field(default_factory=DetectorHyperparams)
    train: TrainSettings = Field(default_factory=TrainSettings)


class AttackSettings(BaseModel):
    niters: int = Field(200, ge=1)
    repeats: int = Field(10, ge=1)
    budget_fraction: float = Field(0.05, gt=0.0, le=0.10)
    blackbox_slot_candidates: int = Field(16, ge=1, le=256)
    jobs: int = Field(1, ge=1)


class DefenseSettings(BaseModel):
    normalize_niters: int = Field(10, ge=1)
    mask_fraction: float = Field(0.25, ge=0.0, le=1.0)


class CorpusSettings(BaseModel):
    n_benign: int = Field(2000, ge=0)
    n_malicious: int = Field(2000, ge=0)
    min_size: int = Field(2048, ge=256)
    max_size: int = Field(12288, ge=256)
    min_functions: int = Field(5, ge=1)
    max_functions: int = Field(40, ge=1)
    transformable_ratio: float = Field(0.89, ge=0.0, le=1.0)
    motif_rate: float = Field(0.25, ge=0.0, le=1.0)
    skew: float = Field(0.35, ge=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode='after')
    def _ranges_ordered(self) -> 'CorpusSettings':
        if self.min_size > self.max_size:
            raise ValueError("min_size exceeds max_size")
        if self.min_functions > self.max_functions:
            raise ValueError("min_functions exceeds max_functions")
        return self


class CacheSettings(BaseModel):
    enabled: bool = False
    host: str = "localhost"
    port: int = 6379
    password: Optional[str] = None
    ttl_seconds: int = Field(3600, ge=1)


class LabSettings(BaseModel):
    """All settings for one pipeline run"""

    logging: LoggingSettings = Field(default_factory=LoggingSettings)
    vm: VMSettings = Field(default_factory=VMSettings)
    semnop: SemNopSettings = Field(default_factory=SemNopSettings)
    detector: DetectorSettings = Field(default_factory=DetectorSettings)
    attack: AttackSettings = Field(default_factory=AttackSettings)
    defense: DefenseSettings = Field(default_factory=DefenseSettings)
    corpus: CorpusSettings = Field(default_factory=CorpusSettings)
    cache: CacheSettings = Field(default_factory=CacheSettings)


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _read_toml(path: Path) -> Dict[str, Any]:
    try:
        with open(path, 'rb') as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Settings file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Invalid TOML in {path}: {e}")


def load_settings(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> LabSettings:
    """
    Load defaults, then merge a user TOML file and explicit overrides on top.

    Args:
        path: Optional user settings file
        overrides: Nested dict of values that win over both files

    Returns:
        Validated LabSettings
    """
    data = _read_toml(DEFAULTS_FILE) if DEFAULTS_FILE.exists() else {}
    if path is not None:
        data = _merge(data, _read_toml(Path(path)))
    if overrides:
        data = _merge(data, overrides)

    try:
        return LabSettings.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e))


def configure_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """Install console (and optional file) handlers on the root logger"""
    level = level or settings.logging.level
    log_file = settings.logging.file if log_file is None else log_file

    handlers: list = [logging.StreamHandler()]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)
    logger.debug(f"Logging configured: level={level}, file={log_file or '-'}")


# Singleton instance
settings = load_settings()


def apply_settings(new: LabSettings) -> None:
    """Copy new into the singleton so modules that imported it see the change"""
    for name in LabSettings.model_fields:
        setattr(settings, name, getattr(new, name))

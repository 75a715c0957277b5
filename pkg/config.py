"""
Configuration Module for the AVSE toolkit.

Centralizes environment settings and the RunConfig schema (corpus, simulate,
model, train and eval sections). This module should be imported first by all
other modules.
"""

import dataclasses
import hashlib
import json
import os
import shutil
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from errors import ConfigError

load_dotenv()

# --- Base Directories ---
BASE_DIR = Path(__file__).parent.absolute()
DATA_DIR = Path(os.environ.get("AVSE_DATA_DIR", str(BASE_DIR / "avse_data")))
DEFAULT_CONFIG_FILE = Path(os.environ.get("AVSE_CONFIG", str(BASE_DIR / "configs" / "desk.json")))

# --- Runtime ---
DEFAULT_WORKERS = int(os.environ.get("AVSE_WORKERS", "1"))
SHOW_PROGRESS = os.environ.get("AVSE_PROGRESS", "1") not in ("0", "false", "no")
PESQ_CMD = os.environ.get("AVSE_PESQ_CMD") or None

# --- Logging Configuration ---
LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_FILE = os.environ.get("LOG_FILE", str(BASE_DIR / "avse.log"))

# --- Domain constants ---
SPLITS = ("train", "dev", "test")
MODEL_VARIANTS = ("baseline", "spk", "sync", "davse")
DATASET_VARIANTS = ("dsav", "dssv", "ssav")
VISUAL_FIELDS = ("face", "mouth")
SIR_RANGE_DB = (-5.0, 10.0)


def _check_type(section: str, key: str, value, expected) -> None:
    origin = typing.get_origin(expected)
    if origin is typing.Union:
        options = [a for a in typing.get_args(expected) if a is not type(None)]
        if value is None:
            return
        expected = options[0]
        origin = typing.get_origin(expected)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{key}: expected a list, got {type(value).__name__}")
        return
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{section}.{key}: expected an object, got {type(value).__name__}")
        return
    if expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ConfigError(f"{section}.{key}: expected {expected.__name__}, got {type(value).__name__}")


class _Section:
    """Mixin giving dataclass sections strict dict conversion."""

    SECTION = "section"

    @classmethod
    def from_dict(cls, data: Optional[dict]):
        data = dict(data or {})
        hints = typing.get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"Unknown key(s) in '{cls.SECTION}': {', '.join(unknown)}")
        kwargs = {}
        for key, value in data.items():
            expected = hints[key]
            if isinstance(expected, type) and issubclass(expected, _Section):
                kwargs[key] = value if isinstance(value, expected) else expected.from_dict(value)
                continue
            _check_type(cls.SECTION, key, value, expected)
            if expected is float and value is not None:
                value = float(value)
            kwargs[key] = value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class CorpusConfig(_Section):
    SECTION = "corpus"

    seed: int = 7
    train_speakers: int = 32
    dev_speakers: int = 8
    test_speakers: int = 8
    utterances_per_speaker: int = 20
    sample_rate: int = 8000
    fps: int = 25
    resolution: int = 32
    min_duration_s: float = 4.0
    max_duration_s: float = 6.0

    def speakers_in(self, split: str) -> int:
        return {"train": self.train_speakers, "dev": self.dev_speakers, "test": self.test_speakers}[split]


@dataclass
class SimulateConfig(_Section):
    SECTION = "simulate"

    seed: int = 11
    pairs: dict = field(default_factory=lambda: {"train": 2000, "dev": 200, "test": 300})
    cross_speaker_shuffle: bool = False
    materialize: bool = False

    def pairs_for(self, split: str) -> int:
        if split not in self.pairs:
            raise ConfigError(f"simulate.pairs has no entry for split '{split}'")
        return int(self.pairs[split])


@dataclass
class TcnConfig(_Section):
    SECTION = "model.tcn"

    bottleneck: int = 64
    hidden: int = 128
    blocks_per_repeat: int = 4
    repeats: int = 2
    kernel: int = 3


@dataclass
class ModelConfig(_Section):
    SECTION = "model"

    variant: str = "baseline"
    n_audio_filters: int = 128
    audio_kernel: int = 32
    audio_stride: int = 16
    visual_dim: int = 64
    tcn: TcnConfig = field(default_factory=TcnConfig)
    visual_field: str = "face"
    sample_rate: int = 8000
    fps: int = 25
    resolution: int = 32
    frontend_channels: list = field(default_factory=lambda: [16, 32])
    frontend_temporal_kernel: int = 5
    frontend_spatial_kernel: int = 7
    temporal_layers: int = 5
    n_speakers: int = 32

    def __post_init__(self):
        if isinstance(self.tcn, dict):
            self.tcn = TcnConfig.from_dict(self.tcn)
        self.frontend_channels = [int(c) for c in self.frontend_channels]
        self.validate()

    def validate(self) -> None:
        if self.variant not in MODEL_VARIANTS:
            raise ConfigError(f"model.variant must be one of {MODEL_VARIANTS}, got '{self.variant}'")
        if self.visual_field not in VISUAL_FIELDS:
            raise ConfigError(f"model.visual_field must be one of {VISUAL_FIELDS}, got '{self.visual_field}'")
        if self.sample_rate % self.audio_stride != 0:
            raise ConfigError("sample_rate must be a multiple of audio_stride")
        if (self.sample_rate // self.audio_stride) % self.fps != 0:
            raise ConfigError(
                f"latent rate {self.sample_rate // self.audio_stride} Hz is not a multiple of {self.fps} FPS"
            )
        if self.audio_kernel < self.audio_stride:
            raise ConfigError("audio_kernel must be >= audio_stride")
        for name in ("frontend_temporal_kernel", "frontend_spatial_kernel"):
            if getattr(self, name) % 2 == 0:
                raise ConfigError(f"model.{name} must be odd")
        if self.tcn.kernel % 2 == 0:
            raise ConfigError("model.tcn.kernel must be odd")
        if len(self.frontend_channels) != 2:
            raise ConfigError("model.frontend_channels must list two channel counts")
        if self.n_speakers < 1:
            raise ConfigError("model.n_speakers must be positive")

    @property
    def alignment_ratio(self) -> int:
        """Latent audio frames per video frame."""
        return self.sample_rate // self.audio_stride // self.fps

    def replace(self, **changes) -> "ModelConfig":
        data = self.to_dict()
        data.update(changes)
        return ModelConfig.from_dict(data)


@dataclass
class TrainSchedule(_Section):
    SECTION = "train"

    optimizer: str = "adam"
    initial_lr: float = 1e-3
    plateau_halve: int = 3
    plateau_stop: int = 6
    max_epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    clip_grad_norm: Optional[float] = 5.0
    segment_s: Optional[float] = None
    max_batches_per_epoch: Optional[int] = None
    num_workers: int = 0

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ConfigError("train.optimizer: only 'adam' is supported")
        if self.plateau_halve < 1 or self.plateau_stop < 1 or self.max_epochs < 1:
            raise ConfigError("train: plateau and epoch limits must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be positive")


@dataclass
class EvalConfig(_Section):
    SECTION = "eval"

    datasets: list = field(default_factory=lambda: ["dsav", "dssv", "ssav"])
    pesq_cmd: Optional[str] = None
    split: str = "test"

    def __post_init__(self):
        unknown = [d for d in self.datasets if d not in DATASET_VARIANTS]
        if unknown or not self.datasets:
            raise ConfigError(f"eval.datasets must be a non-empty subset of {DATASET_VARIANTS}, got {self.datasets}")
        if self.split not in SPLITS:
            raise ConfigError(f"eval.split must be one of {SPLITS}, got '{self.split}'")

    def descriptor_paths(self, sets_dir: Path) -> list:
        """`<sets_dir>/<variant>_<split>.jsonl` for every configured dataset, as written by reproduce.sh."""
        return [Path(sets_dir) / f"{variant}_{self.split}.jsonl" for variant in self.datasets]


@dataclass
class RunConfig(_Section):
    SECTION = "run"

    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def model_config(self, variant: str, **overrides) -> ModelConfig:
        """ModelConfig for one variant, aligned with the corpus settings."""
        return self.model.replace(
            variant=variant,
            sample_rate=self.corpus.sample_rate,
            fps=self.corpus.fps,
            resolution=self.corpus.resolution,
            **overrides,
        )


def load_run_config(path: Optional[Path] = None) -> RunConfig:
    """
    Loads and validates a RunConfig JSON file.

    Raises:
        ConfigError: unreadable JSON, unknown keys or wrongly typed values.
    """
    path = Path(path or DEFAULT_CONFIG_FILE)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} contains invalid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(data)


def validate_environment() -> dict:
    """
    Validates that the data directory, config file and optional tools are usable.

    Returns:
        dict: Validation results with 'success' bool and 'errors'/'warnings' lists
    """
    errors = []
    warnings = []

    try:
        DATA_DIR.mkdir(parents=True, exist_ok=True)
        if not os.access(DATA_DIR, os.W_OK):
            errors.append(f"Data directory is not writable: {DATA_DIR}")
    except OSError as e:
        errors.append(f"Cannot create data directory {DATA_DIR}: {e}")

    if not DEFAULT_CONFIG_FILE.exists():
        warnings.append(f"Default config file not found: {DEFAULT_CONFIG_FILE}")
    else:
        try:
            load_run_config(DEFAULT_CONFIG_FILE)
        except ConfigError as e:
            errors.append(str(e))

    if PESQ_CMD and shutil.which(PESQ_CMD.split()[0]) is None:
        warnings.append(f"PESQ command not found on PATH: {PESQ_CMD}")

    return {
        "success": len(errors) == 0,
        "errors": errors,
        "warnings": warnings,
    }


if __name__ == "__main__":
    print("=== AVSE Configuration ===\n")

    validation = validate_environment()
    print(f"Validation Success: {validation['success']}")

    if validation['errors']:
        print("\nErrors:")
        for error in validation['errors']:
            print(f"  - {error}")

    if validation['warnings']:
        print("\nWarnings:")
        for warning in validation['warnings']:
            print(f"  - {warning}")

    print(f"\nBase Directory: {BASE_DIR}")
    print(f"Data Directory: {DATA_DIR}")
    print(f"Config File: {DEFAULT_CONFIG_FILE}")

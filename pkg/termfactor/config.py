"""
Experiment configuration: dataclasses, JSON files and user defaults.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from .annotate import DEFAULT_MIN_STEM_LEN, AnnotationMode, MatchKind
from .model import ModelConfig, TrainingConfig
from .synthdata import SynthTaskSpec
from .utils import PathLike, text_checksum


class SystemMode(str, Enum):
    BASELINE = "baseline"
    APPEND = "append"
    REPLACE = "replace"
    CONSTRAINED = "constrained"

    @property
    def annotation(self) -> Optional[AnnotationMode]:
        """Training-data annotation mode, or None for systems trained on plain data."""
        if self in (SystemMode.APPEND, SystemMode.REPLACE):
            return AnnotationMode(self.value)
        return None


def get_config_dir() -> Path:
    """Get the configuration directory for termfactor."""
    config_home = os.environ.get("XDG_CONFIG_HOME", str(Path.home() / ".config"))
    config_dir = Path(config_home) / "termfactor"
    config_dir.mkdir(parents=True, exist_ok=True)
    return config_dir


def get_user_config_path() -> Path:
    """Get the path to the user's default configuration file."""
    return get_config_dir() / "config.json"


def _check_keys(cls, data: Mapping[str, Any]) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"Unknown {cls.__name__} field(s): {', '.join(unknown)}")


@dataclass
class DataPaths:
    """Corpora and term base of a real-data experiment (one sentence per line)."""

    train_src: str
    train_tgt: str
    dev_src: str
    dev_tgt: str
    test_src: str
    test_ref: str
    termbase: str
    termbase_name: str = "termbase"
    frequency_corpus: Optional[str] = None
    tokenized: bool = True

    def all_paths(self) -> Dict[str, str]:
        paths = {
            name: getattr(self, name)
            for name in ("train_src", "train_tgt", "dev_src", "dev_tgt", "test_src", "test_ref", "termbase")
        }
        if self.frequency_corpus:
            paths["frequency_corpus"] = self.frequency_corpus
        return paths

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DataPaths":
        _check_keys(cls, data)
        return cls(**data)


@dataclass
class ExperimentConfig:
    work_dir: str = "work"
    mode: SystemMode = SystemMode.BASELINE
    data: Optional[DataPaths] = None
    synth: Optional[SynthTaskSpec] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    beam_size: int = 5
    extra_beam_sizes: List[int] = field(default_factory=lambda: [20])
    augment_fraction: float = 0.10
    seed: int = 1
    num_merges: int = 4000
    eval_regime: MatchKind = MatchKind.EXACT
    top_n: int = 500
    min_chars: int = 2
    test_fraction: float = 0.5
    min_stem_len: int = DEFAULT_MIN_STEM_LEN
    bootstrap_resamples: int = 1000
    measure_latency: bool = False
    latency_percentile: float = 99.0
    num_samples: int = 10

    def __post_init__(self):
        self.mode = SystemMode(self.mode)
        self.eval_regime = MatchKind(self.eval_regime)
        if self.beam_size < 1 or any(b < 1 for b in self.extra_beam_sizes):
            raise ValueError("Beam sizes must be >= 1")

    def validate(self) -> None:
        """
        Check that the configuration describes a runnable experiment.

        Raises:
            ValueError: If neither or both of data and synth are given
            FileNotFoundError: If a referenced input file is missing
        """
        if (self.data is None) == (self.synth is None):
            raise ValueError("Exactly one of 'data' and 'synth' must be configured")
        if self.data is not None:
            for name, path in self.data.all_paths().items():
                if not Path(path).expanduser().exists():
                    raise FileNotFoundError(f"{name} not found: {path}")

    @property
    def seeds(self) -> Dict[str, int]:
        seeds = {"experiment": self.seed, "model": self.model.seed}
        if self.synth is not None:
            seeds["synth"] = self.synth.seed
        return seeds

    @classmethod
    def synthetic(cls, mode: SystemMode = SystemMode.BASELINE, spec: Optional[SynthTaskSpec] = None,
                  **overrides: Any) -> "ExperimentConfig":
        """
        Desk-scale configuration for a synthetic task.

        The frequency filter keeps only the common words out of the term base,
        and the merge count suits the small alphabets.
        """
        spec = spec or SynthTaskSpec()
        settings: Dict[str, Any] = {
            "mode": mode,
            "synth": spec,
            "top_n": spec.vocab_size + spec.num_markers,
            "num_merges": 200,
            "augment_fraction": 0.3,
            "seed": spec.seed,
        }
        settings.update(overrides)
        return cls(**settings)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mode"] = self.mode.value
        data["eval_regime"] = self.eval_regime.value
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        _check_keys(cls, data)
        data = dict(data)
        if data.get("data") is not None:
            data["data"] = DataPaths.from_dict(data["data"])
        if data.get("synth") is not None:
            data["synth"] = SynthTaskSpec.from_dict(data["synth"])
        if "model" in data:
            data["model"] = ModelConfig.from_dict(data["model"])
        if "training" in data:
            data["training"] = TrainingConfig.from_dict(data["training"])
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form."""
        return text_checksum(json.dumps(self.to_dict(), sort_keys=True))


def merge_settings(base: Mapping[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    """Recursively merge override into base; nested dicts merge, other values replace."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = merge_settings(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_json(path: PathLike) -> Dict[str, Any]:
    with open(Path(path).expanduser(), "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"Configuration file must hold a JSON object: {path}")
    return data


def load_config(
    path: Optional[PathLike] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    defaults: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """
    Build an ExperimentConfig from user defaults, a JSON file and overrides.

    Later sources win: defaults (e.g. a preset), the user config file, then
    the file at path, then overrides (typically command-line flags).

    Args:
        path: Optional JSON configuration file
        overrides: Optional settings applied last
        defaults: Optional settings applied first

    Returns:
        ExperimentConfig: Merged configuration

    Raises:
        FileNotFoundError: If path does not exist
        ValueError: If a file is malformed or holds unknown keys
    """
    settings: Dict[str, Any] = dict(defaults or {})
    user_config = get_user_config_path()
    if user_config.exists():
        settings = merge_settings(settings, read_json(user_config))
    if path is not None:
        if not Path(path).expanduser().exists():
            raise FileNotFoundError(f"Configuration file not found: {path}")
        settings = merge_settings(settings, read_json(path))
    if overrides:
        settings = merge_settings(settings, overrides)
    return ExperimentConfig.from_dict(settings)


def save_config(config: ExperimentConfig, path: PathLike) -> Path:
    output_file = Path(path).expanduser()
    output_file.parent.mkdir(parents=True, exist_ok=True)
    output_file.write_text(config.to_json(), encoding="utf-8")
    return output_file

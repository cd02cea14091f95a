"""
Configuration Management - Runtime settings from the environment and
experiment configuration from a single YAML file.
"""

import hashlib
from pathlib import Path
from typing import Any, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.errors import ConfigError
from src.schemas import DistillConfig, ModelConfig, TaskConfig, TrainConfig


class Settings(BaseSettings):
    """
    Process-level settings with environment variable support.
    Values can be overridden via .env file or environment variables.
    """

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
    )

    # Logging
    log_level: str = Field(default="INFO", validation_alias="LOG_LEVEL")
    log_file: Optional[str] = Field(default=None, validation_alias="LOG_FILE")
    log_format: str = Field(
        default="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        validation_alias="LOG_FORMAT",
    )

    # Read-only evaluation parallelism (importance scoring, eval TER)
    workers: int = Field(default=4, ge=1, validation_alias="WORKERS")

    # Root for every artifact path a config leaves unset
    artifact_dir: str = Field(default="artifacts", validation_alias="ARTIFACT_DIR")


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """Return the process-wide settings instance."""
    return settings


# Artifact layout below the artifact root
ARTIFACT_LAYOUT = {
    "train_corpus": "corpus/train.jsonl",
    "eval_corpus": "corpus/eval.jsonl",
    "teacher_checkpoint": "teacher.ckpt",
    "profile": "profile.csv",
    "student_checkpoint": "student.ckpt",
    "plan": "student.plan.json",
    "healed_checkpoint": "healed.ckpt",
    "train_log": "teacher.log.jsonl",
    "heal_log": "heal.log.jsonl",
    "report_dir": "reports",
}


class PathsConfig(BaseModel):
    """
    Artifact locations. Paths not given explicitly sit under `ARTIFACT_DIR`
    (see Settings) in the fixed layout above.
    """

    model_config = ConfigDict(extra="forbid")

    train_corpus: str
    eval_corpus: str
    teacher_checkpoint: str
    profile: str
    student_checkpoint: str
    plan: str
    healed_checkpoint: str
    train_log: str
    heal_log: str
    report_dir: str

    @model_validator(mode="before")
    @classmethod
    def _fill_from_artifact_dir(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        root = Path(get_settings().artifact_dir)
        return {**{key: str(root / rel) for key, rel in ARTIFACT_LAYOUT.items()}, **data}

    @classmethod
    def under(cls, root: Union[str, Path]) -> "PathsConfig":
        """Every artifact in the standard layout below `root`."""
        return cls(**{key: str(Path(root) / rel) for key, rel in ARTIFACT_LAYOUT.items()})


def derive_seed(global_seed: int, name: str) -> int:
    """Expand the global seed into a named, stable sub-seed."""
    digest = hashlib.sha256(f"{global_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


class ExperimentConfig(BaseModel):
    """Everything one pipeline run needs; round-trips through YAML."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    model: ModelConfig = Field(default_factory=ModelConfig)
    task: TaskConfig = Field(default_factory=TaskConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    paths: PathsConfig = Field(default_factory=lambda: PathsConfig())
    eval_samples: int = Field(128, ge=1, description="Evaluation subset size for importance and eval")
    throughput_prompts: int = Field(16, ge=1)

    def resolved(self) -> "ExperimentConfig":
        """Fill unset sub-seeds from the global seed and align vocab/length with the task."""
        model = self.model.model_copy(
            update={
                "seed": self.model.seed if self.model.seed is not None else derive_seed(self.seed, "init"),
                "vocab_size": self.task.vocab_size,
                "max_seq_len": max(self.model.max_seq_len, self.task.max_seq_len),
            }
        )
        task = self.task.model_copy(
            update={
                "train_seed": self.task.train_seed
                if self.task.train_seed is not None
                else derive_seed(self.seed, "data.train"),
                "eval_seed": self.task.eval_seed
                if self.task.eval_seed is not None
                else derive_seed(self.seed, "data.eval"),
            }
        )
        try:
            return self.model_validate({**self.model_dump(), "model": model.model_dump(), "task": task.model_dump()})
        except ValidationError as e:
            raise ConfigError(str(e)) from e

    def order_seed(self, phase: str) -> int:
        return derive_seed(self.seed, f"{phase}.order")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def _parse_override(override: str) -> tuple[list[str], Any]:
    if "=" not in override:
        raise ConfigError(f"override '{override}' is not of the form section.field=value")
    key, raw = override.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply `section.field=value` overrides to a raw config mapping."""
    for override in overrides:
        keys, value = _parse_override(override)
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{override}' descends into a scalar")
        node[keys[-1]] = value
    return data


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    """
    Load an experiment config from YAML (or defaults when no path is given).

    Args:
        path: YAML file; missing keys take their defaults
        overrides: `section.field=value` strings applied after the file

    Returns:
        Validated ExperimentConfig (not yet seed-resolved)
    """
    data: dict = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"config file not found: {config_path}")
        try:
            data = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{config_path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{config_path}: top level must be a mapping")
    data = apply_overrides(data, overrides or [])
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e

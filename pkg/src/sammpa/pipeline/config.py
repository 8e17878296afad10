"""Run configuration, loaded from JSON or YAML."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from ..register import RegistrationConfig


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit code 2."""


@dataclass(frozen=True)
class Toggles:
    ES: bool = True   # example selection
    MP: bool = True   # mask propagation
    PA: bool = True   # prompt auto-generation
    PR: bool = True   # post refinement

    def validate(self):
        if not self.MP:
            raise ConfigError("mask propagation (MP) cannot be disabled: nothing to prompt from")
        if self.PA and not self.MP:
            raise ConfigError("PA requires MP")
        if self.PR and not self.PA:
            raise ConfigError("PR requires PA")

    def label(self) -> str:
        return "+".join(k for k in ("ES", "MP", "PA", "PR") if getattr(self, k)) or "none"


@dataclass(frozen=True)
class PromptConfig:
    expand_margin: int = 0
    soften_scale: float = 0.5


@dataclass
class PipelineConfig:
    dataset_root: Path
    K: int = 1
    toggles: Toggles = field(default_factory=Toggles)
    embedding_backend: str = "toy"
    embedding_address: Optional[str] = None
    segmentation_backend: str = "mock"
    segmentation_address: Optional[str] = None
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    refinement_rounds: int = 1
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    output_dir: Path = Path("sammpa-out")
    image_size: int = 256
    mock_tol: float = 0.1
    support_ids: Optional[list] = None
    backend_timeout: float = 120.0

    def __post_init__(self):
        self.dataset_root = Path(self.dataset_root)
        self.output_dir = Path(self.output_dir)

    def validate(self, n_samples: Optional[int] = None) -> None:
        self.toggles.validate()
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if n_samples is not None and self.K >= n_samples:
            raise ConfigError(f"K={self.K} leaves no queries among {n_samples} samples")
        if self.embedding_backend not in ("toy", "external"):
            raise ConfigError(f"unknown embedding backend {self.embedding_backend!r}")
        if self.segmentation_backend not in ("mock", "external"):
            raise ConfigError(f"unknown segmentation backend {self.segmentation_backend!r}")
        if self.embedding_backend == "external" and not self.embedding_address:
            raise ConfigError("external embedding backend needs embedding_address")
        if self.segmentation_backend == "external" and not self.segmentation_address:
            raise ConfigError("external segmentation backend needs segmentation_address")
        if self.refinement_rounds < 0:
            raise ConfigError("refinement_rounds must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16")
        if self.support_ids is not None and len(self.support_ids) != self.K:
            raise ConfigError("support_ids must list exactly K ids")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset_root"] = str(self.dataset_root)
        d["output_dir"] = str(self.output_dir)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "dataset_root" not in doc:
            raise ConfigError("config needs dataset_root")
        try:
            if "toggles" in doc:
                doc["toggles"] = Toggles(**doc["toggles"])
            if "registration" in doc:
                doc["registration"] = RegistrationConfig(**doc["registration"])
            if "prompt" in doc:
                doc["prompt"] = PromptConfig(**doc["prompt"])
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} is not a mapping")
        return cls.from_dict(doc)

"""Read and write run configuration files (JSON).

Every section forbids unknown keys, so a typo in a config file fails loudly
instead of silently falling back to a default.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class ConfigError(ValueError):
    """Raised for unreadable or invalid run configuration."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthConfig(_Section):
    task: Literal["regression", "classification"] = "regression"
    n: int = Field(120, ge=4)
    d: int = Field(3, ge=1)
    noise_sd: float = Field(0.1, ge=0.0)
    outlier_fraction: float = Field(0.05, ge=0.0, lt=0.5)


class DatasetConfig(_Section):
    csv: Optional[str] = None
    target_column: str = "target"
    synth: Optional[SynthConfig] = None
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    standardize: bool = True
    center_target: bool = True

    @model_validator(mode="after")
    def _one_source(self):
        if self.csv is None and self.synth is None:
            self.synth = SynthConfig()
        if self.csv is not None and self.synth is not None:
            raise ValueError("set either 'csv' or 'synth', not both")
        return self


class ModelConfig(_Section):
    kind: Literal["linear", "ntk", "logistic"] = "linear"
    beta: float = Field(5.0, gt=0.0)
    l2: float = Field(1.0, ge=0.0)


class RecourseSection(_Section):
    kind: Literal["closed", "gradient"] = "closed"
    s_mode: Literal["median", "explicit"] = "median"
    s: Optional[float] = None
    lam: float = Field(1e-6, ge=0.0)
    iters: int = Field(1000, ge=1)
    step_size: float = Field(0.05, gt=0.0)
    validity_margin: float = Field(1e-4, ge=0.0)

    @model_validator(mode="after")
    def _explicit_needs_s(self):
        if self.s_mode == "explicit" and self.s is None:
            raise ValueError("s_mode 'explicit' requires a value for 's'")
        return self


class SgdConfig(_Section):
    steps: int = Field(100, ge=0)
    K: int = Field(4, ge=1)
    sigma: float = Field(0.5, ge=0.0)
    eta: float = Field(0.05, ge=0.0)
    lr: float = Field(0.5, gt=0.0)
    tau: float = Field(0.1, gt=0.0)
    pool_fraction: float = Field(0.25, ge=0.0, le=1.0)


class AttackSection(_Section):
    method: Literal["greedy", "sgd", "random", "brute"] = "greedy"
    M: int = Field(14, ge=0)
    metric: Literal["outcome_count", "action_sum"] = "outcome_count"
    folds: int = Field(5, ge=1)
    trials: int = Field(20, ge=1)
    sgd: SgdConfig = Field(default_factory=SgdConfig)


class AuditConfig(_Section):
    max_points: int = Field(50, ge=1)
    p: float = Field(2.0, ge=1.0)
    segments: int = Field(64, ge=1)
    deletions: bool = True


class SensitivityConfig(_Section):
    eps: float = Field(1e-4, gt=0.0, le=0.1)
    rbf_gamma: float = Field(1.0, gt=0.0)
    n: int = Field(8, ge=1)
    d: int = Field(2, ge=1)
    minimality_samples: int = Field(100, ge=1)


class NtkCheckConfig(_Section):
    samples: int = Field(1_000_000, ge=1)
    angles: int = Field(10, ge=2)
    max_angle_deg: float = Field(90.0, gt=0.0, le=180.0)


class OutputConfig(_Section):
    dir: str = "runs"
    format: Literal["json", "summary"] = "json"


class RunConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**64)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    recourse: RecourseSection = Field(default_factory=RecourseSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    audit: AuditConfig = Field(default_factory=AuditConfig)
    sensitivity: SensitivityConfig = Field(default_factory=SensitivityConfig)
    ntk_check: NtkCheckConfig = Field(default_factory=NtkCheckConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)


def _describe(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        if err["type"] == "extra_forbidden":
            parts.append(f"Unknown config key: {key}")
        else:
            parts.append(f"Invalid config key {key}: {err['msg']}")
    return "; ".join(parts)


def parse_run_config(data: dict) -> RunConfig:
    """Validate a config mapping, raising :class:`ConfigError` naming the bad key."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from exc


def read_run_config(path: Path | None) -> RunConfig:
    """Return the config stored at *path*, or all defaults when *path* is None."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a JSON object")
    return parse_run_config(data)


def write_run_config(path: Path, config: RunConfig) -> Path:
    """Write *config* as indented JSON, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.model_dump(), indent=2) + "\n", encoding="utf-8")
    return path


def apply_overrides(config: RunConfig, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    """Apply ``--seed`` / ``--out-dir`` command-line overrides."""
    data = config.model_dump()
    if seed is not None:
        data["seed"] = seed
    if out_dir is not None:
        data["output"]["dir"] = out_dir
    return parse_run_config(data)

"""Run configuration: algorithm knobs plus the optimization inputs.

A run is fully described by one JSON or TOML document. Sections may be
inline or reference sibling files via {"path": "..."}. Every knob the
search uses is exposed here with its default.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .domain import (
    ClusterSpec,
    Deployment,
    PlacementConstraint,
    WorkloadSpec,
    cluster_from_dict,
    constraints_from_list,
    deployment_from_dict,
    workload_from_dict,
)
from .simulator import DEFAULT_TRIALS, AppModel, app_model_from_dict


class ConfigError(ValueError):
    """The run document is malformed or references missing pieces."""


@dataclass(frozen=True)
class TuningConfig:
    """Knobs of the two optimization phases and the measurement harness."""

    p: int = 4
    trials: int = DEFAULT_TRIALS
    deterministic: bool = True
    tau: Optional[float] = None  # None resolves to 0.0 (deterministic) / 0.05 (noise)
    initial_fraction: float = 0.30
    decay: float = 1.2
    min_fraction: float = 0.01
    max_variants: int = 10
    improvement_threshold: float = 0.01
    max_iterations: int = 50
    binary_search_resolution: float = 0.01  # fraction of hosting-server capacity
    max_halvings: int = 7
    seed: int = 0

    def __post_init__(self) -> None:
        if self.p < 2:
            raise ConfigError("p must be >= 2")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.tau is not None and self.tau < 0:
            raise ConfigError("tau must be >= 0")

    def resolved_tau(self) -> float:
        if self.tau is not None:
            return self.tau
        return 0.0 if self.deterministic else 0.05


@dataclass(frozen=True)
class RunConfig:
    """Everything the pipeline needs for one optimization run."""

    model: AppModel
    cluster: ClusterSpec
    deployment: Deployment
    workload: WorkloadSpec
    constraints: tuple[PlacementConstraint, ...] = ()
    tuning: TuningConfig = field(default_factory=TuningConfig)

    def with_overrides(
        self,
        seed: Optional[int] = None,
        trials: Optional[int] = None,
        deterministic: Optional[bool] = None,
    ) -> "RunConfig":
        tuning = self.tuning
        if seed is not None:
            tuning = replace(tuning, seed=seed)
        if trials is not None:
            tuning = replace(tuning, trials=trials)
        if deterministic is not None:
            tuning = replace(tuning, deterministic=deterministic)
        return replace(self, tuning=tuning)


def tuning_from_dict(data: Optional[Mapping]) -> TuningConfig:
    if not data:
        return TuningConfig()
    known = {f for f in TuningConfig.__dataclass_fields__}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown tuning keys: {unknown}")
    return TuningConfig(**data)


def tuning_to_dict(t: TuningConfig) -> dict:
    return {
        "p": t.p,
        "trials": t.trials,
        "deterministic": t.deterministic,
        "tau": t.tau,
        "initial_fraction": t.initial_fraction,
        "decay": t.decay,
        "min_fraction": t.min_fraction,
        "max_variants": t.max_variants,
        "improvement_threshold": t.improvement_threshold,
        "max_iterations": t.max_iterations,
        "binary_search_resolution": t.binary_search_resolution,
        "max_halvings": t.max_halvings,
        "seed": t.seed,
    }


def _load_document(path: Path) -> dict:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".toml":
            return tomllib.loads(raw.decode("utf-8"))
        return json.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc


def _resolve_section(doc: Mapping, key: str, base_dir: Path, required: bool = True):
    section = doc.get(key)
    if section is None:
        if required:
            raise ConfigError(f"config missing required section {key!r}")
        return None
    if isinstance(section, Mapping) and set(section.keys()) == {"path"}:
        return _load_document(base_dir / str(section["path"]))
    return section


def run_config_from_dict(doc: Mapping, base_dir: Optional[Path] = None) -> RunConfig:
    base_dir = base_dir or Path.cwd()
    try:
        model = app_model_from_dict(_resolve_section(doc, "app_model", base_dir))
        cluster = cluster_from_dict(_resolve_section(doc, "cluster", base_dir))
        deployment = deployment_from_dict(_resolve_section(doc, "deployment", base_dir))
        workload = workload_from_dict(_resolve_section(doc, "workload", base_dir))
        constraints = constraints_from_list(
            _resolve_section(doc, "constraints", base_dir, required=False)
        )
        tuning = tuning_from_dict(_resolve_section(doc, "tuning", base_dir, required=False))
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return RunConfig(
        model=model,
        cluster=cluster,
        deployment=deployment,
        workload=workload,
        constraints=constraints,
        tuning=tuning,
    )


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return run_config_from_dict(_load_document(path), base_dir=path.parent)

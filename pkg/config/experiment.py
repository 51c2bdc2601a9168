"""Experiment files: one YAML document per run, plus sweep grids over them."""

import itertools
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config.settings import Settings, SimConfig

logger = logging.getLogger(__name__)

settings = Settings()


class ApiKindSpec(BaseModel):
    """One augmentation category: how often it is called and what it costs."""

    model_config = ConfigDict(extra="forbid")

    weight: float = Field(1.0, gt=0)
    duration_median_s: float = Field(1.0, gt=0)
    duration_sigma: float = Field(0.5, ge=0)
    return_median: float = Field(32.0, ge=0)
    return_sigma: float = Field(0.5, ge=0)


SHAPE_PRESETS: Dict[str, Dict[str, Any]] = {
    # six categories, short calls dominate
    "merge": {
        "prompt_median": 128,
        "output_median": 32,
        "calls_min": 1,
        "calls_max": 3,
        "no_call_fraction": 0.1,
        "api_kinds": {
            "math": {"weight": 0.25, "duration_median_s": 0.05, "return_median": 16},
            "qa": {"weight": 0.25, "duration_median_s": 0.5, "return_median": 64},
            "virtual-env": {"weight": 0.15, "duration_median_s": 0.2, "return_median": 32},
            "chatbot": {"weight": 0.15, "duration_median_s": 2.0, "return_median": 48},
            "image": {"weight": 0.1, "duration_median_s": 5.0, "return_median": 16},
            "tts": {"weight": 0.1, "duration_median_s": 3.0, "return_median": 8},
        },
    },
    # tool chains: more calls, longer returns
    "toolbench": {
        "prompt_median": 256,
        "output_median": 48,
        "calls_min": 2,
        "calls_max": 5,
        "no_call_fraction": 0.0,
        "api_kinds": {
            "search": {"weight": 0.3, "duration_median_s": 1.0, "return_median": 256},
            "finance": {"weight": 0.2, "duration_median_s": 0.8, "return_median": 192},
            "weather": {"weight": 0.2, "duration_median_s": 0.5, "return_median": 96},
            "travel": {"weight": 0.15, "duration_median_s": 1.5, "return_median": 384},
            "media": {"weight": 0.15, "duration_median_s": 2.0, "return_median": 320},
        },
    },
}


class ShapeSpec(BaseModel):
    """Distribution of request shapes.

    Lengths are log-normal around their medians and clipped to ``[min, max]``;
    a sigma of 0 gives fixed lengths. A ``preset`` supplies defaults that
    explicit fields override.
    """

    model_config = ConfigDict(extra="forbid")

    preset: Optional[Literal["merge", "toolbench"]] = None
    prompt_median: float = Field(128.0, gt=0)
    prompt_sigma: float = Field(0.6, ge=0)
    prompt_min: int = Field(1, ge=1)
    prompt_max: int = Field(4096, ge=1)
    output_median: float = Field(32.0, gt=0)
    output_sigma: float = Field(0.6, ge=0)
    output_min: int = Field(1, ge=1)
    output_max: int = Field(1024, ge=1)
    return_max: int = Field(1024, ge=0)
    calls_min: int = Field(1, ge=0)
    calls_max: int = Field(3, ge=0)
    no_call_fraction: float = Field(0.1, ge=0, le=1)
    api_kinds: Dict[str, ApiKindSpec] = Field(default_factory=lambda: {"generic": ApiKindSpec()})

    @model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("preset"):
            preset = data["preset"]
            if preset not in SHAPE_PRESETS:
                raise ValueError(f"unknown shape preset {preset!r}")
            merged = dict(SHAPE_PRESETS[preset])
            merged.update(data)
            return merged
        return data

    @model_validator(mode="after")
    def _check_ranges(self) -> "ShapeSpec":
        if self.prompt_min > self.prompt_max:
            raise ValueError("prompt_min must not exceed prompt_max")
        if self.output_min > self.output_max:
            raise ValueError("output_min must not exceed output_max")
        if self.calls_min > self.calls_max:
            raise ValueError("calls_min must not exceed calls_max")
        if not self.api_kinds:
            raise ValueError("api_kinds must name at least one category")
        return self


class WorkloadSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["poisson", "gamma", "fixed-count", "trace"] = "poisson"
    rate: float = Field(2.0, gt=0)
    cv: float = Field(1.0, gt=0)
    duration_s: float = Field(60.0, ge=0)
    requests: int = Field(100, ge=1)
    seed: int = settings.DEFAULT_SEED
    trace_path: Optional[str] = None
    shape: ShapeSpec = Field(default_factory=lambda: ShapeSpec(preset="merge"))

    @model_validator(mode="after")
    def _check_trace(self) -> "WorkloadSpec":
        if self.kind == "trace":
            if not self.trace_path:
                raise ValueError("trace workloads need trace_path")
            if not Path(self.trace_path).is_file():
                raise ValueError(f"trace file not found: {self.trace_path}")
        return self

    @property
    def horizon_kind(self) -> str:
        """Goodput denominator: the arrival window, or the makespan for fixed sets."""
        return "horizon" if self.kind in ("poisson", "gamma") else "makespan"


class BudgetSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["dynamic", "static"] = "dynamic"
    static_tokens: int = Field(512, ge=1)


class PredictorSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["oracle", "noisy_duration", "bucket_length", "combined", "trace"] = "oracle"
    mse_target: float = Field(0.16, ge=0)
    edges: List[float] = Field(default_factory=lambda: [0, 16, 64, 256, 1024])
    accuracy: float = Field(0.85, ge=0, le=1)

    @field_validator("edges")
    @classmethod
    def _increasing(cls, edges: List[float]) -> List[float]:
        if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("bucket edges must be strictly increasing")
        return edges


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    run_id: Optional[str] = None
    sim: SimConfig = Field(default_factory=SimConfig)
    workload: WorkloadSpec = Field(default_factory=WorkloadSpec)
    strategy: Literal["fcfs", "random", "augserve"] = "augserve"
    budget: BudgetSpec = Field(default_factory=BudgetSpec)
    predictor: PredictorSpec = Field(default_factory=PredictorSpec)
    output_dir: str = settings.OUTPUT_DIR
    event_log: bool = settings.EVENT_LOG

    def resolved_run_id(self) -> str:
        return self.run_id or f"{self.strategy}-{self.workload.kind}-seed{self.workload.seed}"


def _read_yaml(path: Path) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    return data


def load_experiment(path) -> ExperimentConfig:
    logger.debug("Loading experiment config %s", path)
    return ExperimentConfig.model_validate(_read_yaml(Path(path)))


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot override {dotted!r}: {key!r} is not a section")
    node[keys[-1]] = value


def apply_overrides(config: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    """Return a copy with dotted keys (``sim.alpha``, ``workload.rate``) replaced."""
    data = config.model_dump()
    for dotted, value in overrides.items():
        if value is None:
            continue
        _set_dotted(data, dotted, value)
    return ExperimentConfig.model_validate(data)


def _format_value(value: Any) -> str:
    return f"{value:g}" if isinstance(value, float) else str(value)


class SweepConfig(BaseModel):
    """A base experiment and a cartesian grid of dotted-key overrides."""

    model_config = ConfigDict(extra="forbid")

    base: ExperimentConfig = Field(default_factory=ExperimentConfig)
    grid: Dict[str, List[Any]] = Field(default_factory=dict)
    workers: Optional[int] = Field(None, ge=1)

    @field_validator("grid")
    @classmethod
    def _non_empty(cls, grid: Dict[str, List[Any]]) -> Dict[str, List[Any]]:
        for key, values in grid.items():
            if not values:
                raise ValueError(f"grid axis {key!r} has no values")
        return grid

    def expand(self) -> List[Tuple[str, ExperimentConfig]]:
        keys = list(self.grid)
        runs = []
        for combo in itertools.product(*(self.grid[key] for key in keys)):
            overrides = dict(zip(keys, combo))
            run_id = "_".join(
                f"{key.split('.')[-1]}-{_format_value(value)}" for key, value in overrides.items()
            ) or self.base.resolved_run_id()
            overrides["run_id"] = run_id
            runs.append((run_id, apply_overrides(self.base, overrides)))
        return runs


def load_sweep(path) -> SweepConfig:
    """Sweep YAML: ``base`` is a mapping or a path to an experiment file."""
    path = Path(path)
    data = _read_yaml(path)
    base = data.get("base", {})
    if isinstance(base, str):
        base_path = Path(base)
        if not base_path.is_absolute() and not base_path.is_file():
            base_path = path.parent / base
        data["base"] = _read_yaml(base_path)
    return SweepConfig.model_validate(data)

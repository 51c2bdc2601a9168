import logging
import os
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class Settings:
    def __init__(self):
        self.LOG_LEVEL = os.getenv("AUGSERVE_LOG_LEVEL", "INFO")
        self.OUTPUT_DIR = os.getenv("AUGSERVE_OUTPUT_DIR", "results")
        self.DEFAULT_SEED = int(os.getenv("AUGSERVE_SEED", "0"))
        self.EVENT_LOG = os.getenv("AUGSERVE_EVENT_LOG", "0").lower() in ("1", "true", "yes")

        # Engine guard settings
        self.MAX_ITERATIONS = int(os.getenv("AUGSERVE_MAX_ITERATIONS", "5000000"))

        # Sweep settings
        self.SWEEP_WORKERS = int(os.getenv("AUGSERVE_SWEEP_WORKERS", "1"))
        self.DEFAULT_CONFIG_PATH = os.getenv("AUGSERVE_CONFIG", "data/configs/quickstart.yaml")


def configure_logging(level: str = "INFO") -> None:
    """Install a single stream handler on the root logger."""
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)


class SimConfig(BaseModel):
    """System constants shared by the cost model, the budget and the engine.

    Memory is expressed in abstract memory units; with ``m_per_token = 1`` a
    unit is one token of KV context.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    m_per_token: float = Field(1.0, gt=0)
    t_fwd: float = Field(0.05, gt=0)
    n_fwd_max: int = Field(512, ge=1)
    s_fwd_out: float = Field(256.0, gt=0)
    s_fwd_in: float = Field(256.0, gt=0)

    g_total: float = Field(16000.0, gt=0)
    g_model: float = Field(5000.0, gt=0)
    g_runtime: float = Field(500.0, gt=0)
    g_safety: float = Field(500.0, gt=0)

    gamma: float = Field(1.0, ge=0, le=1)
    alpha: float = Field(0.1, ge=0)
    beta_low: float = Field(0.5, gt=0, le=1)
    beta_high: float = Field(1.5, ge=1)
    target_max: int = Field(512, ge=1)

    slo_ttft: float = Field(1.0, gt=0)
    slo_norm_mult: float = Field(10.0, gt=0)

    reselect_policy_at_call: bool = True
    max_iterations: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check_partition(self) -> "SimConfig":
        if self.g_model + self.g_runtime + self.g_safety >= self.g_total:
            raise ValueError(
                "g_model + g_runtime + g_safety must be below g_total "
                f"({self.g_model + self.g_runtime + self.g_safety} >= {self.g_total})"
            )
        return self

    @property
    def g_fixed(self) -> float:
        return self.g_model + self.g_runtime + self.g_safety

    @property
    def kv_capacity(self) -> float:
        """Memory available to KV contexts (active plus paused)."""
        return self.g_total - self.g_fixed

    @property
    def slo_norm_latency(self) -> float:
        return self.slo_norm_mult * self.t_fwd

"""
netmpc-rl Configuration Management
Process-level settings; experiment parameters live in the YAML run config.
"""
from functools import lru_cache
from typing import Literal, Optional

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings with environment variable support."""

    model_config = SettingsConfigDict(
        env_prefix="NETMPC_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Environment
    environment: Literal["development", "testing", "production"] = "development"
    debug: bool = False

    # Logging
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = "INFO"
    log_format: Literal["json", "text"] = "text"
    log_to_file: bool = False
    log_dir: str = "logs"

    # Output (overrides the run config's output_dir when set)
    output_dir: Optional[str] = None

    # QP solver
    qp_tolerance: float = Field(default=1e-10, gt=0.0)
    qp_deployment_tolerance: float = Field(default=1e-8, gt=0.0)
    qp_max_iterations: int = Field(default=100, ge=1)
    qp_dense_threshold: int = Field(default=400, ge=1)
    degeneracy_threshold: float = Field(default=1e-7, gt=0.0)
    convexity_threshold: float = Field(default=1e-10, gt=0.0)

    # Learning
    stale_dual_threshold: float = Field(default=1e-8, gt=0.0)

    # Parallelism & monitoring
    threads: int = Field(default=1, ge=1)
    enable_metrics: bool = True

    @field_validator("output_dir")
    @classmethod
    def empty_output_dir_is_unset(cls, v: Optional[str]) -> Optional[str]:
        """Treat an empty env value as no override."""
        if v is not None and not v.strip():
            return None
        return v

    @property
    def is_development(self) -> bool:
        """Check if running in development mode."""
        return self.environment == "development"

    @property
    def check_kkt(self) -> bool:
        """Whether every QP solution is re-verified against its KKT conditions."""
        return self.debug or self.environment == "testing"


@lru_cache()
def get_settings() -> Settings:
    """
    Get cached settings instance.
    Uses lru_cache to ensure settings are loaded only once.
    """
    return Settings()


# Export for convenience
settings = get_settings()

"""
Application Configuration
"""

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-wide settings"""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="TEXTCRYSTAL_",
        case_sensitive=True,
        extra="ignore",
    )

    # Environment
    ENVIRONMENT: str = "development"
    DEBUG: bool = False

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FILE: str = "logs/textcrystal.log"
    LOG_TO_FILE: bool = True

    # Runs
    DEFAULT_SEED: int = 0
    DEFAULT_JOBS: int = 1
    TORCH_NUM_THREADS: int = 0  # 0 leaves torch's default

    # Evaluation
    ZERO_TOLERANCE: float = 1e-6  # band gap / hull energy at or below this is "zero"
    OXIDATION_MAX_COMBINATIONS: int = 200_000

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        v = v.upper()
        if v not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"Unknown log level: {v}")
        return v

    @field_validator("DEFAULT_JOBS")
    @classmethod
    def validate_jobs(cls, v: int) -> int:
        return max(1, v)


settings = Settings()

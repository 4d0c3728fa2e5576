"""Configuration settings for the denoising toolkit"""

from typing import List, Union

from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field, field_validator


class Settings(BaseSettings):
    """Process settings loaded from environment variables"""

    # Environment
    environment: str = Field(default="development", alias="PCD_ENVIRONMENT")
    debug: bool = Field(default=False, alias="PCD_DEBUG")

    # Logging
    log_level: str = Field(default="INFO", alias="PCD_LOG_LEVEL")
    log_format: str = Field(default="text", alias="PCD_LOG_FORMAT")

    # Execution
    workers: int = Field(
        default=1,
        alias="PCD_WORKERS",
        description="Threads used for patch-level parallelism (1 = deterministic single thread)"
    )
    float_dtype: str = Field(
        default="float32",
        alias="PCD_FLOAT_DTYPE",
        description="Storage precision for network parameters and activations"
    )

    # Input formats accepted by the point readers
    point_suffixes: Union[str, List[str]] = Field(
        default_factory=lambda: [".xyz", ".ply"],
        alias="PCD_POINT_SUFFIXES"
    )
    mesh_suffixes: Union[str, List[str]] = Field(
        default_factory=lambda: [".obj", ".ply", ".off", ".stl"],
        alias="PCD_MESH_SUFFIXES"
    )

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore"
    )

    @field_validator("point_suffixes", "mesh_suffixes", mode="before")
    @classmethod
    def parse_suffixes(cls, v):
        """Parse comma-separated suffixes from environment variable"""
        if isinstance(v, str):
            return [s.strip().lower() for s in v.split(",") if s.strip()]
        return v

    @field_validator("log_level", mode="before")
    @classmethod
    def normalize_log_level(cls, v):
        """Accept lower-case level names"""
        return str(v).upper()

    @field_validator("log_format")
    @classmethod
    def validate_log_format(cls, v):
        if v not in ("text", "json"):
            raise ValueError("PCD_LOG_FORMAT must be 'text' or 'json'")
        return v

    @field_validator("float_dtype")
    @classmethod
    def validate_float_dtype(cls, v):
        if v not in ("float32", "float64"):
            raise ValueError("PCD_FLOAT_DTYPE must be 'float32' or 'float64'")
        return v

    @field_validator("workers")
    @classmethod
    def validate_workers(cls, v):
        if v < 1:
            raise ValueError("PCD_WORKERS must be >= 1")
        return v

    @property
    def is_development(self) -> bool:
        """Check if running in development mode"""
        return self.environment.lower() in ["development", "dev", "local"]

    @property
    def is_production(self) -> bool:
        """Check if running in production mode"""
        return self.environment.lower() in ["production", "prod"]


# Create settings instance
settings = Settings()

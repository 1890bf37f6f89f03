"""
Process-level settings read from the environment (and an optional .env file).
"""

from pathlib import Path

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="MEMSHARE_", extra="ignore")

    runs_dir: Path = Field(default=Path("./runs"), description="Output root for run directories")
    log_level: str = Field(default="INFO", description="Root log level for CLI commands")


def get_settings() -> Settings:
    """Load .env (if present) and return fresh settings."""
    load_dotenv()
    return Settings()

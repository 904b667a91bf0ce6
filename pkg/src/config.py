from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")

    log_level: str = Field(default="INFO", alias="MORPHOPT_LOG")
    default_workers: int = Field(default=1, ge=1, alias="MORPHOPT_WORKERS")
    default_output_dir: Path = Field(default=Path("./runs"), alias="MORPHOPT_OUTPUT_DIR")


def get_settings() -> Settings:
    return Settings()

# ranklab/core/config.py
from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    APP_NAME: str = "ranklab"
    OUTPUT_DIR: str = "runs"

    model_config = SettingsConfigDict(
        env_prefix="RANKLAB_",
        env_file=".env",
        extra="ignore",
    )

    @property
    def output_path(self) -> Path:
        return Path(self.OUTPUT_DIR)


settings = Settings()

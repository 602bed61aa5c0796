from pathlib import Path
from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    
    model_config = SettingsConfigDict(
        env_prefix="GENIE_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore"
    )
    
    threads: int = Field(default=1, ge=1, description="Upper bound on parallel distillation batches")
    
    log_level: str = Field(default="INFO", description="Logging level")
    show_progress: bool = Field(default=True, description="Show tqdm progress bars for long loops")
    
    artifacts_dir: Path = Field(default=Path("./artifacts"), description="Default output directory")
    archs_dir: Path = Field(
        default=Path(__file__).parent / "nn" / "archs",
        description="Directory holding the shipped architecture configs"
    )
    default_seed: int = Field(default=0, description="Seed used when a run config gives none")


_settings: Optional[Settings] = None


def get_settings() -> Settings:
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


def reset_settings() -> None:
    global _settings
    _settings = None

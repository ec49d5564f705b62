from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Literal


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="SAFE_EXPLORE_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    # Application
    app_name: str = "safe_explore"
    app_version: str = "1.0.0"
    debug: bool = False
    log_level: str = "INFO"

    # Replication execution
    threads: int = 1  # SAFE_EXPLORE_THREADS caps worker count
    executor: Literal["local", "celery"] = "local"

    # Celery Configuration
    celery_broker_url: str = "redis://localhost:6379/0"
    celery_result_backend: str = "redis://localhost:6379/0"
    replication_time_limit: int = 3600  # seconds per replication task

    # Output Configuration
    output_dir: str = "./results"
    paper_scale: bool = False


# Create global settings instance
settings = Settings()

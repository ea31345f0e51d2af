"""Configuration management for LeakGuard."""

from typing import Literal, Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

SECRET_FIELDS = frozenset({"api_key", "embedder_api_key", "lvlm_api_key"})


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_file=".env", env_file_encoding="utf-8", case_sensitive=False, extra="ignore"
    )

    # Application
    app_name: str = "LeakGuard"
    app_version: str = "0.1.0"
    debug: bool = False
    log_level: str = "INFO"

    # Server
    host: str = "0.0.0.0"
    port: int = 8000
    api_key: str = ""  # empty disables bearer auth

    # Localization
    t_leak: float = Field(0.1, ge=0.0)
    t_rel: float = Field(0.4, ge=0.0)

    # Search
    precision: float = Field(0.03125, gt=0.0, le=1.0)
    max_evals: Optional[int] = Field(None, ge=1)
    fixed_alpha: Optional[float] = Field(None, ge=0.0, le=1.0)

    # Backbone
    backbone: Literal["mock", "diffusers"] = "mock"
    mock_spec_path: Optional[str] = None
    model_id: str = "runwayml/stable-diffusion-v1-5"
    device: str = "cuda"
    dtype: Literal["float16", "float32"] = "float16"
    total_steps: int = Field(50, ge=2)
    seed: Optional[int] = 0
    target_seed: Optional[int] = 1
    scaling_scope: Literal["all", "bottleneck"] = "all"
    bottleneck_layers: str = ""  # comma separated; empty uses the backbone default
    guidance_scale: float = 7.5
    image_size: int = 512

    # External services
    embedder_endpoint_url: str = ""
    embedder_api_key: str = ""
    clip_model: str = "ViT-L/14"
    dino_model: str = "dinov2_vitb14"
    lvlm_endpoint_url: str = ""
    lvlm_api_key: str = ""
    lvlm_model: str = "gpt-4o"
    request_concurrency: int = Field(4, ge=1)
    request_retries: int = Field(3, ge=1)
    request_timeout_seconds: float = Field(60.0, gt=0.0)

    # Output
    output_path: str = "./outputs"

    @property
    def bottleneck_layer_ids(self) -> tuple[str, ...]:
        return tuple(part.strip() for part in self.bottleneck_layers.split(",") if part.strip())

    def to_env_lines(self) -> list[str]:
        """Flat ``key=value`` lines without secrets, readable by ``--config``."""
        lines = []
        for name, value in self.model_dump().items():
            if name in SECRET_FIELDS:
                continue
            lines.append(f"{name}={'' if value is None else value}")
        return lines


# Global settings instance
settings = Settings()

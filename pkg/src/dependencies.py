"""Dependency injection functions for FastAPI."""

import threading
from functools import lru_cache
from typing import Optional

from fastapi import Depends, HTTPException, status
from fastapi.security import HTTPAuthorizationCredentials, HTTPBearer

from src.config import settings
from src.services.backbone import Backbone, create_backbone
from src.services.localizer import LeakageLocalizer

# HTTP Bearer token scheme; optional so an empty api_key disables auth
security = HTTPBearer(auto_error=False)


async def verify_api_key(
    credentials: Optional[HTTPAuthorizationCredentials] = Depends(security),
) -> None:
    """Check the bearer token against ``settings.api_key``.

    Raises:
        HTTPException: If a key is configured and the token does not match
    """
    if not settings.api_key:
        return
    if credentials is None or credentials.credentials != settings.api_key:
        raise HTTPException(
            status_code=status.HTTP_401_UNAUTHORIZED,
            detail="Invalid or missing API key",
            headers={"WWW-Authenticate": "Bearer"},
        )


@lru_cache(maxsize=1)
def get_backbone() -> Backbone:
    """Backbone shared by all requests, built on first use."""
    return create_backbone(settings)


@lru_cache(maxsize=1)
def get_backbone_lock() -> threading.Lock:
    """Serializes requests on the shared backbone, whose runs keep state."""
    return threading.Lock()


def get_localizer(
    backbone: Backbone = Depends(get_backbone),
    lock: threading.Lock = Depends(get_backbone_lock),
) -> LeakageLocalizer:
    return LeakageLocalizer(backbone, t_leak=settings.t_leak, t_rel=settings.t_rel, lock=lock)

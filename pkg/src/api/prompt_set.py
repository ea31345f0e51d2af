"""API routes for the bundled evaluation prompt set."""

from fastapi import APIRouter, HTTPException, status

from src.exceptions import PromptSetParseError
from src.models.evaluation import PromptSetEntry
from src.services.evaluation import load_prompt_set

# Create router
router = APIRouter(prefix="/api/v1", tags=["evaluation"])


@router.get("/prompt-set", response_model=list[PromptSetEntry])
async def get_prompt_set() -> list[PromptSetEntry]:
    """Return the bundled 100-entry evaluation prompt set."""
    try:
        return load_prompt_set()
    except PromptSetParseError as e:
        raise HTTPException(status_code=status.HTTP_500_INTERNAL_SERVER_ERROR, detail=str(e))

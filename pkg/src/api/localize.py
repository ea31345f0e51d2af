"""API routes for post-hoc leakage localization."""

import asyncio
import logging

from fastapi import APIRouter, Depends, File, Form, HTTPException, UploadFile, status

from src.dependencies import get_localizer, verify_api_key
from src.exceptions import (
    BackboneError,
    DimensionMismatchError,
    ImageDecodeError,
    LeakGuardError,
)
from src.models.leakage import LeakageSummary
from src.models.prompts import PromptSpec
from src.services.localizer import LeakageLocalizer
from src.utils.images import decode_image_bytes

logger = logging.getLogger(__name__)

# Create router
router = APIRouter(prefix="/api/v1", tags=["localize"], dependencies=[Depends(verify_api_key)])


@router.post("/localize", response_model=LeakageSummary)
async def localize_images(
    reference: UploadFile = File(...),
    target: UploadFile = File(...),
    ref_subject: str = Form(...),
    tgt_subject: str = Form(...),
    style: str = Form(""),
    localizer: LeakageLocalizer = Depends(get_localizer),
) -> LeakageSummary:
    """Localize content leakage between two finished images.

    Args:
        reference: Reference image upload
        target: Target image upload
        ref_subject: Reference subject text, e.g. ``"A house"``
        tgt_subject: Target subject text
        style: Style descriptor shared by both prompts

    Returns:
        LeakageSummary with the verdict and the patch leak map
    """
    try:
        ref_image = decode_image_bytes(await reference.read())
        tgt_image = decode_image_bytes(await target.read())
    except ImageDecodeError as e:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e))

    tokenize = localizer.backbone.tokenize
    try:
        ref_prompt = PromptSpec.build([ref_subject], style, tokenize)
        tgt_prompt = PromptSpec.build([tgt_subject], style, tokenize)
        report = await asyncio.to_thread(
            localizer.localize_posthoc, ref_image, tgt_image, ref_prompt, tgt_prompt
        )
    except DimensionMismatchError as e:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e))
    except BackboneError as e:
        logger.exception("Backbone failure during localization")
        raise HTTPException(status_code=status.HTTP_500_INTERNAL_SERVER_ERROR, detail=str(e))
    except (LeakGuardError, ValueError) as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))

    document = report.to_document()
    return LeakageSummary(
        **document.model_dump(), leak_map=report.leak_map.astype(bool).tolist()
    )

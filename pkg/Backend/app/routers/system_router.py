# Backend/app/routers/system_router.py
from fastapi import APIRouter, HTTPException, Request
from loguru import logger

from app.core.models import HealthResponse, SystemInfoResponse

API_VERSION = "1.0.0"

router = APIRouter(tags=["System"])


@router.get("/health", response_model=HealthResponse)
async def health_check(request: Request):
    """
    Service status and the size of the loaded FAQ corpus.
    """
    runtime = getattr(request.app.state, "runtime", None)
    if runtime is None:
        logger.warning("Health check before the runtime finished loading")
        raise HTTPException(status_code=503, detail="Runtime not loaded")
    return HealthResponse(status="healthy", corpus_size=len(runtime.corpus), backend=runtime.gateway.kind)


@router.get("/system/info", response_model=SystemInfoResponse)
async def system_info(request: Request):
    runtime = getattr(request.app.state, "runtime", None)
    if runtime is None:
        raise HTTPException(status_code=503, detail="Runtime not loaded")
    config = runtime.config
    return SystemInfoResponse(
        version=API_VERSION,
        chat_model=config.backend.chat_model_name,
        embed_model=config.backend.embed_model_name,
        agents=[agent.name for agent in config.pipeline.agents],
        judge_samples=config.pipeline.judge_samples,
    )

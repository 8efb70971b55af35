# Backend/app/routers/annotation_router.py
import asyncio
import time
import uuid

from fastapi import APIRouter, HTTPException, Request
from fastapi.concurrency import run_in_threadpool
from loguru import logger

from app.core.errors import FaqAnnotationError, NoCandidates, ValidationFailure, backend_failure
from app.core.models import AnnotateRequest, AnnotateResponse, RerankedFaq

router = APIRouter(tags=["Annotation"])


def _semaphore(request: Request) -> asyncio.Semaphore:
    state = request.app.state
    if getattr(state, "annotate_semaphore", None) is None:
        state.annotate_semaphore = asyncio.Semaphore(state.runtime.config.service.max_concurrency)
    return state.annotate_semaphore


@router.post("/annotate", response_model=AnnotateResponse)
async def annotate_endpoint(body: AnnotateRequest, request: Request):
    """
    Map one utterance to its top FAQs.

    Returns the reranked FAQs in the judge output shape plus whether the
    result came from the cache and how long the request took.
    """
    rid = uuid.uuid4().hex[:8]
    runtime = request.app.state.runtime
    started = time.perf_counter()
    logger.info(f"RID: {rid} - Received /annotate request")
    try:
        async with _semaphore(request):
            result = await run_in_threadpool(runtime.pipeline.annotate_with_cache, body.utterance)
    except ValidationFailure as e:
        logger.warning(f"RID: {rid} - Rejected: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except FaqAnnotationError as e:
        outage = backend_failure(e)
        if outage is not None:
            logger.error(f"RID: {rid} - Backend unavailable: {outage}")
            raise HTTPException(status_code=503, detail=f"LLM backend unavailable: {outage}")
        if isinstance(e, NoCandidates):
            logger.warning(f"RID: {rid} - {e}")
            raise HTTPException(status_code=422, detail=str(e))
        logger.error(f"RID: {rid} - Annotation failed: {e}")
        raise HTTPException(status_code=500, detail=f"Annotation failed: {e}")

    payload = result.verdict.to_payload(runtime.corpus)
    latency_ms = (time.perf_counter() - started) * 1000.0
    logger.info(f"RID: {rid} - {len(payload['reranked_faqs'])} FAQs, cache_hit={result.cache_hit}, {latency_ms:.0f} ms")
    return AnnotateResponse(
        reranked_faqs=[RerankedFaq(**item) for item in payload["reranked_faqs"]],
        mode=payload["mode"],
        cache_hit=result.cache_hit,
        latency_ms=latency_ms,
    )

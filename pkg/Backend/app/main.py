# Backend/app/main.py
from typing import Optional

import uvicorn
from fastapi import FastAPI, Request
from fastapi.encoders import jsonable_encoder
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from loguru import logger

from app.core.config import DEFAULT_CONFIG_PATH, load_run_config, setup_logging
from app.routers.annotation_router import router as annotation_router
from app.routers.system_router import API_VERSION
from app.routers.system_router import router as system_router
from app.runtime import Runtime, create_runtime


def create_app(runtime: Optional[Runtime] = None) -> FastAPI:
    """
    Build the annotation API. Without a runtime, one is loaded from
    FAQ_CONFIG_PATH on startup.
    """
    app = FastAPI(
        title="FAQ Annotation API",
        description="Maps user utterances to ranked FAQs with a multi-agent LLM pipeline",
        version=API_VERSION,
        docs_url="/docs",
        redoc_url="/redoc",
    )
    app.state.runtime = runtime
    app.state.annotate_semaphore = None

    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(RequestValidationError)
    async def malformed_body_handler(request: Request, exc: RequestValidationError):
        logger.warning(f"Malformed request to {request.url.path}: {exc.errors()}")
        return JSONResponse(status_code=400, content={"detail": "Malformed request body", "errors": jsonable_encoder(exc.errors())})

    @app.on_event("startup")
    async def startup_event():
        """Load corpus, indexes and cache on application startup"""
        if app.state.runtime is None:
            logger.info(f"Application startup: loading runtime from {DEFAULT_CONFIG_PATH}")
            app.state.runtime = create_runtime(load_run_config(DEFAULT_CONFIG_PATH))
        # Build indexes before the first request
        _ = app.state.runtime.pipeline
        logger.info("Application startup complete.")

    app.include_router(system_router)
    app.include_router(annotation_router)

    @app.get("/")
    async def root():
        """Root endpoint providing basic API information"""
        return {
            "message": "FAQ Annotation API",
            "version": API_VERSION,
            "endpoints": {
                "docs": "/docs",
                "health": "/health",
                "info": "/system/info",
                "annotate": "/annotate",
            },
        }

    return app


if __name__ == "__main__":
    setup_logging()
    logger.info("Starting server directly from main.py...")
    uvicorn.run(create_app(), host="0.0.0.0", port=8001)

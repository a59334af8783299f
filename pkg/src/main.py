import logging
from contextlib import asynccontextmanager
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from src.config.settings import settings
from src.api.models import ErrorResponse
from src.api import routes
from src.api.routes import router
from src.services.task_registry import UnknownTaskError, open_registry

# Configure logging
logging.basicConfig(
    level=settings.LOG_LEVEL.upper(),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """
    Lifespan context manager for FastAPI application.
    Loads task checkpoints over shared backbones on startup.
    """
    # Startup
    logger.info("Application starting up...")
    try:
        settings.validate()
        logger.info("Configuration validated")

        if routes.registry is None:
            routes.registry = open_registry(settings.SERVE_CHECKPOINT_DIR, settings.SERVE_DATA_PATH)
        logger.info(f"Task registry ready with {len(routes.registry)} task(s)")

    except Exception as e:
        logger.error(f"Startup error: {e}")
        raise

    yield

    # Shutdown
    logger.info("Application shutting down...")


# Create FastAPI application
app = FastAPI(
    title="Video-Text Adapter Retrieval API",
    description="Many parameter-efficient retrieval tasks served over one shared frozen backbone",
    version="1.0.0",
    lifespan=lifespan,
)


def _error(status_code: int, code: str, message: str) -> JSONResponse:
    body = ErrorResponse(code=code, message=message)
    return JSONResponse(status_code=status_code, content=body.model_dump(mode="json"))


# Exception handlers
@app.exception_handler(RequestValidationError)
async def validation_exception_handler(request: Request, exc: RequestValidationError):
    """Handle validation errors."""
    logger.warning(f"Validation error: {exc.errors()}")
    body = ErrorResponse(
        code="VALIDATION_ERROR",
        message=f"Invalid request: {len(exc.errors())} validation error(s)",
    ).model_dump(mode="json")
    body["errors"] = [{"loc": list(e["loc"]), "msg": e["msg"]} for e in exc.errors()]
    return JSONResponse(status_code=422, content=body)


@app.exception_handler(UnknownTaskError)
async def unknown_task_handler(request: Request, exc: UnknownTaskError):
    """Handle requests for tasks that are not loaded."""
    logger.warning(str(exc))
    return _error(404, "UNKNOWN_TASK", str(exc))


@app.exception_handler(ValueError)
async def bad_input_handler(request: Request, exc: ValueError):
    """Handle domain input errors (shapes, vocabulary, ranges)."""
    logger.warning(f"Rejected request: {exc}")
    return _error(400, "BAD_REQUEST", str(exc))


@app.exception_handler(Exception)
async def general_exception_handler(request: Request, exc: Exception):
    """Handle general exceptions."""
    logger.error(f"Unhandled exception: {exc}", exc_info=True)
    return _error(500, "INTERNAL_ERROR", "Internal server error")


# Include routers
app.include_router(router)


@app.get("/")
async def root():
    """Root endpoint."""
    return {
        "name": "Video-Text Adapter Retrieval API",
        "version": "1.0.0",
        "docs": "/docs",
    }


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(
        "src.main:app",
        host=settings.SERVE_HOST,
        port=settings.SERVE_PORT,
        reload=False,
        log_level=settings.LOG_LEVEL.lower(),
    )

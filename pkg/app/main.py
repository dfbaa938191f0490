import logging
import time
from contextlib import asynccontextmanager

import uvicorn
from fastapi import Depends, FastAPI, Header, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from app import __version__
from app.errors import NaimError
from app.routers import predict
from app.settings import allowed_origins, checkpoint_path, configure_logging, is_production, master_api_key

configure_logging()

logger = logging.getLogger(__name__)


# API Key authentication
async def verify_api_key(x_api_key: str = Header(None, alias="X-API-Key")):
    """Verify API key for request authentication"""
    master_key = master_api_key()

    if x_api_key is None:
        raise HTTPException(
            status_code=401,
            detail={
                "error": "Missing API key",
                "message": "Please provide an X-API-Key header",
            },
        )

    if not master_key:
        if not is_production():
            logger.warning("⚠️ No MASTER_API_KEY set - API running in development mode")
            return True
        raise HTTPException(status_code=500, detail="API authentication not configured")

    if x_api_key != master_key:
        logger.warning(f"🔐 Invalid API key attempt from {x_api_key[:8]}...")
        raise HTTPException(
            status_code=401,
            detail={
                "error": "Invalid API key",
                "message": "Please provide a valid X-API-Key header",
            },
        )

    return True


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Application lifespan manager"""
    logger.info("🚀 NAIM API starting up...")

    if is_production() and not master_api_key():
        logger.error("🔒 MASTER_API_KEY required in production mode")
        raise RuntimeError("MASTER_API_KEY required in production")

    path = checkpoint_path()
    if path:
        try:
            bundle = predict.load_bundle(path)
            logger.info(f"✅ Model loaded from {path} ({bundle.params.n_parameters} parameters)")
        except NaimError as e:
            logger.error(f"❌ Could not load model from {path}: {e.message}")
    else:
        logger.warning("⚠️ NAIM_CHECKPOINT not set - prediction endpoints will return 503")

    yield

    logger.info("🛑 NAIM API shutting down...")


app = FastAPI(
    title="NAIM API",
    description="""
    **NAIM API** - classification of tabular data with missing values, without imputation.

    A transformer treats every feature as a token. Missing features map to a frozen
    all-zero embedding and are masked out of self-attention in both directions, so
    rows can be scored exactly as they arrive.

    ## Authentication
    `POST /api/v1/predict` requires an `X-API-Key` header. Metadata endpoints are public.
    """,
    version=__version__,
    license_info={
        "name": "MIT License",
        "url": "https://opensource.org/licenses/MIT",
    },
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=allowed_origins(),
    allow_credentials=True,
    allow_methods=["GET", "POST"],
    allow_headers=["*"],
)


@app.middleware("http")
async def log_requests(request: Request, call_next):
    """Log all incoming requests with timing"""
    start_time = time.time()

    if not is_production():
        client = request.client.host if request.client else "unknown"
        logger.info(f"📨 {request.method} {request.url.path} - Client: {client}")
    else:
        logger.info(f"📨 {request.method} {request.url.path}")

    response = await call_next(request)

    process_time = time.time() - start_time
    logger.info(f"⏱️ Request processed in {process_time:.3f}s - Status: {response.status_code}")

    return response


@app.exception_handler(Exception)
async def global_exception_handler(request: Request, exc: Exception):
    """Handle unexpected errors gracefully"""
    logger.error(f"❌ Unexpected error on {request.method} {request.url.path}: {str(exc)}")

    return JSONResponse(
        status_code=500,
        content={
            "error": "Internal server error",
            "message": "An unexpected error occurred. Please try again later.",
            "request_id": f"{int(time.time())}-{hash(str(request.url))}",
        },
    )


# Public metadata first, then authenticated routes
app.include_router(predict.metadata_router)
app.include_router(
    predict.router,
    prefix="/api/v1",
    dependencies=[Depends(verify_api_key)],
)


@app.get("/", tags=["System"])
async def root():
    """
    🏠 Welcome to NAIM API
    """
    return {
        "message": "Welcome to NAIM API",
        "status": "operational",
        "version": __version__,
        "description": "Transformer classification of tabular data with missing values",
        "authentication": "API key required for prediction (X-API-Key header)",
        "endpoints": {
            "predict": "/api/v1/predict",
            "features": "/api/v1/metadata/model/features",
            "classes": "/api/v1/metadata/model/classes",
        },
        "documentation": {"interactive": "/docs", "openapi": "/openapi.json"},
    }


@app.get("/health", tags=["System"])
async def health_check():
    """
    🏥 API Health Check
    """
    path = checkpoint_path()
    model_status = "not_configured"
    if path:
        try:
            predict.load_bundle(path)
            model_status = "ok"
        except NaimError:
            model_status = "unavailable"

    return {
        "status": "healthy",
        "timestamp": int(time.time()),
        "version": __version__,
        "checks": {
            "api": "ok",
            "model": model_status,
            "authentication": "ok" if master_api_key() or not is_production() else "missing_config",
        },
    }


@app.get("/api/v1/info", tags=["System"])
async def api_info():
    """
    ℹ️ API Information
    """
    return {
        "api_name": "NAIM API",
        "version": __version__,
        "description": "Missing-aware transformer for tabular classification",
        "capabilities": {
            "prediction": {
                "description": "Class probabilities for raw rows",
                "features": [
                    "Numerical and categorical features",
                    "Missing values handled natively, never imputed",
                    "Up to 1000 rows per request",
                ],
            },
        },
        "missing_tokens": ["null", "", "NA", "?"],
        "supported_formats": ["JSON"],
        "authentication": "API Key (if configured)",
        "support": {
            "documentation": "/docs",
            "openapi_spec": "/openapi.json",
        },
    }


if __name__ == "__main__":
    logger.info("🚀 Starting NAIM API server...")
    uvicorn.run("app.main:app", host="0.0.0.0", port=8000, reload=True, log_level="info")

"""FastAPI application implementing the inpainting wire protocol.

POST /inpaint  {image_png_b64, mask_png_b64, prompt, seed, steps, guidance}
               -> {image_png_b64}
GET  /health   -> {status, model_id, mock}

Decode and dimension errors map to 400; a full generation queue maps to 503.
A semaphore bounds concurrent generations (protects accelerator memory in
real mode; the mock is stateless and cheap either way).
"""

from __future__ import annotations

import base64
import binascii
import threading

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .config import ServiceConfig
from .mockgen import MOCK_MODEL_ID, mock_inpaint
from .real import RealBackend


class InpaintRequest(BaseModel):
    image_png_b64: str
    mask_png_b64: str
    prompt: str = ""
    seed: int = 0
    steps: int = Field(default=50, ge=1)
    guidance: float = Field(default=7.5, ge=0.0)


class InpaintResponse(BaseModel):
    image_png_b64: str


class HealthResponse(BaseModel):
    status: str
    model_id: str
    mock: bool
    version: str = __version__


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    app = FastAPI(title="inpaint-sidecar", version=__version__)
    slots = threading.Semaphore(config.max_concurrent)
    backend = None
    if config.mode == "real":
        backend = RealBackend(config)
        backend.load_async()

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        if config.mode == "mock":
            return HealthResponse(status="ok", model_id=MOCK_MODEL_ID, mock=True)
        if backend.ready:
            status = "ok"
        elif backend.error:
            status = f"error: {backend.error}"
        else:
            status = "loading"
        return HealthResponse(status=status, model_id=config.model_id, mock=False)

    @app.post("/inpaint", response_model=InpaintResponse)
    def inpaint(request: InpaintRequest) -> InpaintResponse:
        try:
            image_png = base64.b64decode(request.image_png_b64, validate=True)
            mask_png = base64.b64decode(request.mask_png_b64, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"invalid base64 payload: {exc}")
        if not slots.acquire(timeout=config.queue_timeout):
            raise HTTPException(status_code=503, detail="at capacity, retry later")
        try:
            if config.mode == "mock":
                out = mock_inpaint(
                    image_png, mask_png, request.prompt, request.seed, request.steps, request.guidance, config
                )
            else:
                try:
                    out = backend.inpaint(
                        image_png, mask_png, request.prompt, request.seed, request.steps, request.guidance
                    )
                except RuntimeError as exc:
                    raise HTTPException(status_code=503, detail=str(exc))
        except HTTPException:
            raise
        except (OSError, ValueError) as exc:  # undecodable image or size mismatch
            raise HTTPException(status_code=400, detail=str(exc))
        finally:
            slots.release()
        return InpaintResponse(image_png_b64=base64.b64encode(out).decode("ascii"))

    return app

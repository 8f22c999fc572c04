"""Real-mode backend: Stable Diffusion inpainting via diffusers.

Loaded lazily so the mock service carries no accelerator dependencies; the
import error is surfaced as a clear message when real mode is requested on a
machine without the optional extras installed.
"""

from __future__ import annotations

import io
import threading

from .config import ServiceConfig


class RealBackend:
    def __init__(self, config: ServiceConfig) -> None:
        self.config = config
        self.pipeline = None
        self.error: str | None = None
        self._lock = threading.Lock()

    @property
    def ready(self) -> bool:
        return self.pipeline is not None

    def load(self) -> None:
        try:
            import torch
            from diffusers import StableDiffusionInpaintPipeline
        except ImportError as exc:
            self.error = f"real mode needs the [real] extras (torch, diffusers): {exc}"
            return
        try:
            device = "cuda" if torch.cuda.is_available() else "cpu"
            pipeline = StableDiffusionInpaintPipeline.from_pretrained(self.config.model_id)
            self.pipeline = pipeline.to(device)
        except Exception as exc:  # model download/load failure
            self.error = f"failed to load {self.config.model_id}: {exc}"

    def load_async(self) -> None:
        threading.Thread(target=self.load, daemon=True).start()

    def inpaint(self, image_png: bytes, mask_png: bytes, prompt: str, seed: int, steps: int, guidance: float) -> bytes:
        if self.pipeline is None:
            raise RuntimeError(self.error or "model still loading")
        import torch
        from PIL import Image

        image = Image.open(io.BytesIO(image_png)).convert("RGB")
        mask = Image.open(io.BytesIO(mask_png)).convert("L")
        with self._lock:
            generator = torch.Generator(device=self.pipeline.device).manual_seed(seed & 0x7FFFFFFF)
            result = self.pipeline(
                prompt=prompt,
                image=image,
                mask_image=mask,
                num_inference_steps=steps,
                guidance_scale=guidance,
                generator=generator,
                width=image.width,
                height=image.height,
            ).images[0]
        buf = io.BytesIO()
        result.save(buf, format="PNG")
        return buf.getvalue()

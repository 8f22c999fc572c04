"""Inpainting inference sidecar: HTTP wrapper around a diffusion inpainting
model, with a deterministic mock backend for CI."""

__version__ = "0.1.0"

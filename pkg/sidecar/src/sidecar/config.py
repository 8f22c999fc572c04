"""Service configuration, loadable from a YAML or JSON file."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import yaml


@dataclass
class ServiceConfig:
    mode: str = "mock"  # mock | real
    model_id: str = "stabilityai/stable-diffusion-2-inpainting"
    host: str = "127.0.0.1"
    port: int = 8901
    max_concurrent: int = 2
    queue_timeout: float = 30.0  # seconds to wait for a slot before 503
    default_steps: int = 50
    default_guidance: float = 7.5
    # mock backend constants (documented; keep in sync with clients that
    # implement the same wire contract in-process)
    fingerprint_freq: tuple[float, float] = (0.1, 0.1)
    fingerprint_amp: float = 3.0
    pass_blur_sigma: float = 0.5
    fill_base: float = 128.0
    fill_noise_sigma: float = 20.0
    fill_noise_smooth: float = 2.0

    def __post_init__(self) -> None:
        if self.mode not in ("mock", "real"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 1 <= self.port <= 65535:
            raise ValueError(f"invalid port {self.port}")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")

    @classmethod
    def load(cls, path: str | Path) -> "ServiceConfig":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
        if "fingerprint_freq" in data:
            data["fingerprint_freq"] = tuple(data["fingerprint_freq"])
        return cls(**data)

"""CLI entry point: load config, bind, serve."""

from __future__ import annotations

import argparse

import uvicorn

from .app import create_app
from .config import ServiceConfig


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="inpaint-sidecar", description=__doc__)
    parser.add_argument("--config", default=None, help="service config YAML/JSON")
    parser.add_argument("--mock", action="store_true", help="force mock mode")
    parser.add_argument("--host", default=None)
    parser.add_argument("--port", type=int, default=None)
    args = parser.parse_args(argv)

    config = ServiceConfig.load(args.config) if args.config else ServiceConfig()
    if args.mock:
        config.mode = "mock"
    if args.host:
        config.host = args.host
    if args.port:
        config.port = args.port

    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="info")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

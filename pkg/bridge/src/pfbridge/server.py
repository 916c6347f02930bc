"""Command-line entry point: load a checkpoint and serve it."""

from __future__ import annotations

import argparse

import uvicorn

from .model import load_checkpoint, make_tiny_checkpoint
from .service import create_app


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfbridge",
        description="Serve a latent-diffusion checkpoint over the "
                    "patch-fusion wire protocol")
    parser.add_argument("--checkpoint", required=True,
                        help="model checkpoint path")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8713)
    parser.add_argument("--max-batch", type=int, default=8, dest="max_batch")
    parser.add_argument("--make-tiny", action="store_true",
                        help="write a tiny random checkpoint to --checkpoint "
                             "first (for smoke testing)")
    return parser


def main(argv: list[str] | None = None) -> None:
    args = build_parser().parse_args(argv)
    if args.make_tiny:
        make_tiny_checkpoint(args.checkpoint)
    model = load_checkpoint(args.checkpoint, device=args.device)
    app = create_app(model, max_batch=args.max_batch)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


if __name__ == "__main__":
    main()

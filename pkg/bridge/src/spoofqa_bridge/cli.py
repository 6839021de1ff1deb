"""Command line for the bridge service."""

from __future__ import annotations

import argparse
import sys

from .service import ServeConfig, serve_stdio, serve_tcp


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spoofqa-bridge",
        description="Serve an audio chat model (or a scripted mock) over the line-JSON bridge protocol.",
    )
    parser.add_argument("--model", default="echo-mock",
                        choices=["echo-mock", "qwen2-audio", "salmonn"])
    parser.add_argument("--policy", default="fixed:bonafide",
                        help="echo-mock reply policy: fixed:<text> | alternating[:a,b] | hash[:a,b]")
    parser.add_argument("--checkpoint", help="model checkpoint path or hub id")
    parser.add_argument("--device", help="device hint, e.g. cuda:0")
    parser.add_argument("--max-new-tokens", type=int, default=64)
    parser.add_argument("--prompt-catalog", help="promptkit catalog JSON; lets requests pass template ids")
    parser.add_argument("--listen", default="stdio",
                        help="stdio or host:port (port 0 picks a free one)")
    parser.add_argument("--delay", type=float, default=0.0,
                        help="echo-mock: seconds to stall before each response")
    parser.add_argument("--garbage-every", type=int, default=0,
                        help="echo-mock: emit a non-JSON line before every Nth response")
    parser.add_argument("--reorder-window", type=int, default=1,
                        help="echo-mock: buffer k requests and answer them in reverse")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = ServeConfig(
        model=args.model,
        policy_spec=args.policy,
        checkpoint=args.checkpoint,
        device=args.device,
        max_new_tokens=args.max_new_tokens,
        prompt_catalog=args.prompt_catalog,
        delay_s=args.delay,
        garbage_every=args.garbage_every,
        reorder_window=args.reorder_window,
    )
    if args.listen == "stdio":
        serve_stdio(cfg)
        return 0
    host, _, port = args.listen.rpartition(":")
    try:
        serve_tcp(cfg, host or "127.0.0.1", int(port))
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())

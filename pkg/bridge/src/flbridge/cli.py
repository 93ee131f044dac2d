"""Command line: flbridge --server host:port --client-id id --data f --manifest m"""

from __future__ import annotations

import argparse
import sys

from .client import BridgeConfig, join_federation


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flbridge",
        description="Join a federation over TCP as an external PyTorch trainer.",
    )
    parser.add_argument("--server", required=True, help="server address host:port")
    parser.add_argument("--client-id", required=True)
    parser.add_argument("--data", required=True, help="binary dataset file (.dat)")
    parser.add_argument("--manifest", required=True,
                        help="JSON tensor-name mapping and shared-subset filter")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--connect-timeout", type=float, default=30.0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = BridgeConfig(
        server=args.server,
        client_id=args.client_id,
        data_path=args.data,
        manifest_path=args.manifest,
        seed=args.seed,
        connect_timeout=args.connect_timeout,
    )
    try:
        return join_federation(config)
    except Exception as exc:  # surface a one-line failure for scripting
        print(f"flbridge: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line entry point: gspace-extract warmup|gradients|features.

Exit codes follow the primary engine's convention: 0 success, 2 usage or
validation errors, 3 degenerate data.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from .extract import ExtractConfig, extract_features, extract_gradients, warmup_adapter


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gspace-extract",
        description="Per-example adapter-gradient and feature extraction to .gsg streams.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("warmup", "train the adapter on the warm-up split (base stays frozen)"),
        ("gradients", "write per-example flattened adapter gradients"),
        ("features", "write per-example mean-pooled encoder features"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="JSON ExtractConfig file")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = ExtractConfig.load(args.config)
        if args.command == "warmup":
            checkpoint = warmup_adapter(config)
            payload = {
                "adapter": config.adapter_path,
                "wrapped_modules": len(checkpoint["wrapped_modules"]),
                "warmup_subset_ids": checkpoint["warmup_subset_ids"],
                "base_hash_unchanged": checkpoint["base_hash_before"]
                == checkpoint["base_hash_after"],
            }
        elif args.command == "gradients":
            count = extract_gradients(config)
            payload = {"gradients": config.gradients_path, "count": count}
        else:
            count = extract_features(config)
            payload = {"features": config.features_path, "count": count}
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry: export a checkpoint to engine model + weight files."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparse-infer-export",
        description="Convert a PyTorch sequential CNN checkpoint into the "
        "inference engine's model text and FSNW weight file.",
    )
    parser.add_argument("checkpoint", help="torch.save()'d nn.Module")
    parser.add_argument("--model-out", required=True, metavar="PATH")
    parser.add_argument("--weights-out", required=True, metavar="PATH")
    parser.add_argument("--manifest-out", default=None, metavar="PATH")
    parser.add_argument("--input-hw", type=int, default=32,
                        help="spatial extent of the network input (default 32)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = export(
            args.checkpoint,
            args.model_out,
            args.weights_out,
            input_hw=args.input_hw,
            manifest_path=args.manifest_out,
        )
    except ExportError as e:
        print(f"export failed: {e}", file=sys.stderr)
        return 1
    for entry in manifest.layers:
        if entry.density is not None:
            print(f"layer {entry.index} conv {entry.shape}: density {entry.density:.4f}")
    print(f"overall weight density: {manifest.overall_density:.4f}")
    print(f"wrote {args.model_out} and {args.weights_out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

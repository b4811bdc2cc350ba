"""ttpe-export command line: export, export-baseline-prompt."""

from __future__ import annotations

import argparse
import sys

from .encoders import EncoderError
from .export import ExportError, ExportJob, export, export_baseline_prompt


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ttpe-export",
        description="encode image trajectories into TTPE containers")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("export", help="encode frame folders into a .ttpe file")
    s.add_argument("--in", dest="input_dir", required=True,
                   help="directory of per-trajectory frame folders")
    s.add_argument("--out", required=True, help="output .ttpe path")
    s.add_argument("--encoder", default="clip-vit-b32",
                   help="encoder id (clip-vit-b32 or hashed-pixel-<dim>)")
    s.add_argument("--stride", type=int, default=1,
                   help="uniform frame subsampling stride (last frame kept)")
    s.add_argument("--tag", default="export", help="dataset tag for the records")
    s.add_argument("--skip-bad-frames", action="store_true",
                   help="warn and skip undecodable frames instead of aborting")

    s = sub.add_parser("export-baseline-prompt",
                       help="encode a reference prompt into a vector file")
    s.add_argument("--text", required=True)
    s.add_argument("--encoder", default="clip-vit-b32")
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        if args.command == "export":
            records = export(ExportJob(
                input_dir=args.input_dir, output_path=args.out,
                encoder_id=args.encoder, stride=args.stride,
                dataset_tag=args.tag, skip_bad_frames=args.skip_bad_frames))
            d = records[0].d
            print(f"wrote {len(records)} trajectories (d={d}) to {args.out}")
        else:
            vec = export_baseline_prompt(args.text, args.encoder, args.out)
            print(f"wrote {vec.shape[0]}-dim prompt embedding to {args.out}")
        return 0
    except (ExportError, EncoderError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

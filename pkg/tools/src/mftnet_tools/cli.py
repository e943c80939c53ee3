"""Entry point for the companion tooling: MAT conversion and figure
rendering from the decoder's CSV exports."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .convert import ConversionError, convert_shu, parse_ids_from_name
from .montage import MontageError, default_shu32, load_montage


def cmd_convert(args) -> int:
    montage = load_montage(args.montage) if args.montage else default_shu32()
    out_dir = Path(args.out)
    reports = []
    for mat in args.mat:
        mat = Path(mat)
        sub, ses = parse_ids_from_name(mat)
        sub = args.subject if args.subject is not None else sub
        ses = args.session if args.session is not None else ses
        out_path = out_dir / f"sub{(sub or 0):02d}_sess{(ses or 0)}.etf"
        report = convert_shu(mat, montage, out_path, subject_id=sub,
                             session_id=ses, sample_rate=args.rate)
        reports.append(report)
        print(f"{mat.name}: {report.trials_written} trials -> {report.out_path} "
              f"(crc32 {report.checksum:08x})")
    return 0


def cmd_topomap(args) -> int:
    from .plots import plot_topomap
    montage = load_montage(args.montage) if args.montage else None
    out = plot_topomap(args.scores, montage, args.out, title=args.title)
    print(f"wrote {out}")
    return 0


def cmd_deletion_plot(args) -> int:
    from .plots import plot_deletion
    out = plot_deletion(args.curves, args.out)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mftnet-tools",
        description="MAT-to-ETF conversion and figure rendering for the "
                    "motor-imagery decoder's exports.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="MAT session file(s) -> ETF")
    p.add_argument("--mat", nargs="+", required=True, help="input MAT file(s)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--montage", help="montage JSON (default: packaged 32-channel order)")
    p.add_argument("--subject", type=int, help="override subject id")
    p.add_argument("--session", type=int, help="override session id")
    p.add_argument("--rate", type=float, default=250.0, help="sample rate in Hz")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("topomap", help="scalp map from a channel,score CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--montage", help="montage JSON naming the CSV's channels")
    p.add_argument("--out", required=True, help="output image (png/svg)")
    p.add_argument("--title")
    p.set_defaults(func=cmd_topomap)

    p = sub.add_parser("deletion-plot", help="confidence curves from a deletion CSV")
    p.add_argument("--curves", required=True)
    p.add_argument("--out", required=True, help="output image (png/svg)")
    p.set_defaults(func=cmd_deletion_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConversionError, MontageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""excp-convert: move checkpoints between PyTorch files and EXTS containers.

Exit codes: 0 success, 1 conversion/validation failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import sys

from .container import ContainerFormatError
from .convert import ConvertError, export_to_file, import_to_file


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="excp-convert", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_import = sub.add_parser("import", help="framework checkpoint -> container bundle")
    p_import.add_argument("--in", dest="infile", required=True, help="model file (or combined)")
    p_import.add_argument("--optimizer", help="optimizer state file, if separate")
    p_import.add_argument("--out", required=True, help="container bundle output path")
    p_import.add_argument("--name-map", dest="name_map", help="write the NameMap sidecar here")

    p_export = sub.add_parser("export", help="container bundle -> framework checkpoint")
    p_export.add_argument("--in", dest="infile", required=True, help="container bundle")
    p_export.add_argument("--out", required=True, help="framework checkpoint output path")
    p_export.add_argument("--name-map", dest="name_map", help="NameMap sidecar from import")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "import":
            name_map = import_to_file(
                args.infile, args.out, optimizer_file=args.optimizer,
                name_map_path=args.name_map,
            )
            print(f"out={args.out} tensors={len(name_map.tensors)} "
                  f"skipped={len(name_map.skipped)}")
        else:
            export_to_file(args.infile, args.out, name_map_path=args.name_map)
            print(f"out={args.out}")
        return 0
    except (ConvertError, ContainerFormatError) as exc:
        print(f"excp-convert: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"excp-convert: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

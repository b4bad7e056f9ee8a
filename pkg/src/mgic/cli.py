"""``mgic <command> --config <path> [--out <dir>] [--seed <u64>] [--head-width <n>]``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical
failure (including a failed gradient check), 3 I/O error.
"""

import argparse
import csv
import io
import json
import logging
import os
import subprocess
import sys

from .config import COMMANDS, config_hash, load_config, resolve
from .errors import ConfigurationError, FormatError, MgicError, NumericalError
from .experiments import COMMAND_TABLE

__all__ = ["main", "write_csv", "git_describe", "EXIT_OK", "EXIT_CONFIG", "EXIT_NUMERICAL", "EXIT_IO"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("mgic")


def git_describe():
    """``git describe --always --dirty`` of the source tree, or ``unknown``."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=10, check=True)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_text(table, seed, chash, describe):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.header)
    for row in table.rows:
        writer.writerow([_cell(v) for v in row])
    meta = [f"#git-describe={describe}", f"#seed={seed}", f"#config-hash={chash}"]
    meta += [f"#{k}={v}" for k, v in sorted(table.meta.items())]
    buf.write(",".join(meta) + "\n")
    return buf.getvalue()


def write_csv(path, table, seed, chash, describe=None):
    """Header row, data rows, then one trailing ``#key=value,...`` line."""
    describe = git_describe() if describe is None else describe
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(table, seed, chash, describe))


def _parser():
    p = argparse.ArgumentParser(prog="mgic", description="Multigrid-in-channels experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", default=".", help="output directory (default: .)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--head-width", type=int, help="approx: width of the regression head")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(args):
    doc = load_config(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigurationError("--seed must be an unsigned 64-bit integer")
        doc = dict(doc, seed=args.seed)
    if args.head_width is not None:
        if args.head_width < 1:
            raise ConfigurationError("--head-width must be positive")
        doc = dict(doc, approx=dict(doc.get("approx", {}), head_width=args.head_width))
    section, seed = resolve(doc, args.command)
    os.makedirs(args.out, exist_ok=True)

    kwargs = {}
    if args.command in ("approx", "classify") and args.verbose:
        kwargs["log"] = lambda row: log.info("%s", row)
    outcome = COMMAND_TABLE[args.command](section, seed, args.out, **kwargs)

    chash, describe = config_hash(doc), git_describe()
    for name, table in outcome.tables.items():
        write_csv(os.path.join(args.out, name), table, seed, chash, describe)
    for name, report in outcome.reports.items():
        with open(os.path.join(args.out, name), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(outcome.text)
    return EXIT_OK if outcome.ok else EXIT_NUMERICAL


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; usage errors are configuration errors here
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return run(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MgicError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

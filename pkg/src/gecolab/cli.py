"""Command line entry point: ``gecolab run|validate|version``.

Errors print one JSON record on stderr and exit with a code from
:mod:`gecolab.experiment` (2 parse, 3 invalid config, 4 unknown kind,
5 unwritable output, 1 numerical failure).
"""
import argparse
import json
import sys

from . import __version__
from .errors import GecolabError
from .experiment import (
    EXIT_INVALID,
    EXIT_OK,
    EXIT_RUNTIME,
    ExperimentError,
    load_config,
    run,
    validate_config,
)


def _fail(record, code):
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    parser = argparse.ArgumentParser(prog="gecolab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--output", help="output directory (overrides the config and GECOLAB_OUTPUT_ROOT)")
    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config")
    sub.add_parser("version", help="print the package version")
    args = parser.parse_args(argv)

    if args.command == "version":
        print(__version__)
        return EXIT_OK
    try:
        if args.command == "validate":
            diags = validate_config(load_config(args.config))
            for d in diags:
                print(d)
            return EXIT_INVALID if diags else EXIT_OK
        manifest = run(args.config, args.output)
    except ExperimentError as exc:
        return _fail(exc.record(), exc.code)
    except GecolabError as exc:
        return _fail({"error": type(exc).__name__, "code": EXIT_RUNTIME, "message": str(exc)}, EXIT_RUNTIME)
    print(json.dumps({"kind": manifest.kind, "files": [f["name"] for f in manifest.files]}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

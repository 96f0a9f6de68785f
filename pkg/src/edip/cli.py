"""``edip <command> --config <path> [--seed N] [--out DIR]``.

Exit status 0 on success; on failure a one-line JSON object is written to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .harness.commands import COMMANDS, MissingArtifactError, run_command
from .harness.config import ConfigError, load_config

EXIT_FAILURE, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING = 1, 2, 3, 4
OUT_ENV = "EDIP_OUTPUT_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edip", description="Sparse-view CT reconstruction experiments with pretrained deep image priors.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=None, help="restrict the command to one seed")
    p.add_argument("--out", default=None, help=f"output root (overrides config and ${OUT_ENV})")
    return p


def _fail(code: int, kind: str, message: str, command: str | None, **extra) -> int:
    payload = {"error": kind, "message": message, "command": command, "exit_code": code, **extra}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        config = load_config(args.config)
        out = args.out or os.environ.get(OUT_ENV) or None
        result = run_command(args.command, config, out, args.seed)
        detail = result.selected.name if hasattr(result, "selected") else str(result)
        print(json.dumps({"command": command, "status": "ok", "result": detail}))
        return 0
    except _UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc), command)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), command)
    except MissingArtifactError as exc:
        return _fail(EXIT_MISSING, "missing-artifact", str(exc), command, producer=exc.producer)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON report
        return _fail(EXIT_FAILURE, type(exc).__name__, str(exc), command)


if __name__ == "__main__":
    sys.exit(main())

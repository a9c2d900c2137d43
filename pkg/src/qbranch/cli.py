"""Command-line front end: ``qbranch run SCENARIO.json`` and ``qbranch list``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import jsonschema
from threadpoolctl import threadpool_limits

from . import __version__
from .artifacts import ArtifactWriter
from .errors import NtcViolation, PathOverflow, PremeasurementIncomplete, SplitRejected, ValueUndefined
from .experiments import EXPERIMENT_NAMES, EXPERIMENTS, Context, get, integer, num
from .robservable import Tolerance
from .tree import DEFAULT_MAX_PATHS

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2

_NUMBER = {"oneOf": [
    {"type": "number"},
    {"type": "string", "pattern": r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$"},
]}
_INTEGER = {"oneOf": [{"type": "integer"}, {"type": "string", "pattern": r"^[+-]?\d+$"}]}
_POS_NUMBER = {"allOf": [_NUMBER, {"not": {"type": "number", "maximum": 0}}]}

SCENARIO_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["schema", "experiment"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": "1"},
        "experiment": {"enum": list(EXPERIMENT_NAMES)},
        "seed": _INTEGER,
        "description": {"type": "string"},
        "output": {"type": "string"},
        "expect": {"enum": ["pass", "fail"]},
        "max_paths": _INTEGER,
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": _INTEGER,
                "env_dim": _INTEGER,
                "kind": {"enum": ["GUE", "GOE", "banded"]},
                "spacing": _POS_NUMBER,
                "strength": _NUMBER,
                "epsilon_ratio": _POS_NUMBER,
                "level_energies": {"type": "array", "items": _NUMBER},
                "level_factors": {"type": "array", "items": _NUMBER},
                "h_r": {"type": "array", "items": {"type": "array"}},
            },
        },
        "tolerance": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"eps_x": _POS_NUMBER, "k_accuracy": _POS_NUMBER},
        },
        "params": {"type": "object"},
    },
}

_WINDOW = {"type": "array", "items": _NUMBER, "minItems": 2, "maxItems": 2}
PARAM_REQUIRED = {
    "ntc": {"window": _WINDOW},
    "robs": {"window": _WINDOW},
    "measure": {"coefficients": {"type": "array", "minItems": 1}},
}

TOLERANCE_KEYS = ("eps_x", "k_accuracy")

log = logging.getLogger("qbranch")


class UsageError(Exception):
    pass


def _format_error(err: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    if err.validator == "required":
        return f"{where}: {err.message}"
    return f"field '{where}': {err.message}"


def validate_scenario(doc) -> None:
    validator = jsonschema.Draft7Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        raise UsageError("scenario schema violation:\n  " + "\n  ".join(_format_error(e) for e in errors))
    required = PARAM_REQUIRED.get(doc["experiment"])
    if required:
        schema = {"type": "object", "required": list(required), "properties": required}
        errors = list(jsonschema.Draft7Validator(schema).iter_errors(doc.get("params", {})))
        if errors:
            raise UsageError("scenario schema violation:\n  " + "\n  ".join(
                "params/" + _format_error(e).removeprefix("field '").removeprefix("<root>: ") for e in errors))


def load_scenario(path: Path) -> tuple[dict, bytes]:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read scenario {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    validate_scenario(doc)
    return doc, raw


def parse_tolerances(items: list[str] | None) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or key not in TOLERANCE_KEYS:
            raise UsageError(f"--tolerance expects KEY=VALUE with KEY in {TOLERANCE_KEYS}, got {item!r}")
        try:
            out[key] = float(value)
        except ValueError as exc:
            raise UsageError(f"--tolerance {key}: {value!r} is not a number") from exc
        if not out[key] > 0:
            raise UsageError(f"--tolerance {key} must be > 0")
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qbranch", description="Branching-tree quantum dynamics experiments")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one scenario file")
    run.add_argument("scenario", type=Path)
    run.add_argument("--out", type=Path, help="output directory (overrides the scenario's)")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--dry-run", action="store_true", help="validate the scenario and stop")
    run.add_argument("--tolerance", action="append", metavar="KEY=VALUE", help="e.g. eps_x=1e-3")
    run.add_argument("--max-paths", type=int, help="tree path cap")
    run.add_argument("--threads", type=int, help="bound on BLAS worker threads")
    run.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("list", help="list experiment kinds")
    return ap


def list_experiments() -> list[tuple[str, str]]:
    return [(e.name, e.description) for e in EXPERIMENTS]


def _run(args) -> int:
    doc, raw = load_scenario(args.scenario)
    overrides = parse_tolerances(args.tolerance)
    if args.max_paths is not None and args.max_paths < 1:
        raise UsageError("--max-paths must be >= 1")
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if args.dry_run:
        print(f"{args.scenario}: valid scenario for experiment '{doc['experiment']}'")
        return EXIT_OK
    seed = args.seed if args.seed is not None else integer(doc.get("seed", 0))
    tol_spec = {k: num(v) for k, v in doc.get("tolerance", {}).items()}
    tol_spec.update(overrides)
    tol = Tolerance(**tol_spec)
    max_paths = args.max_paths or integer(doc.get("max_paths", DEFAULT_MAX_PATHS))
    out_dir = args.out or Path(doc.get("output", Path("qbranch-out") / doc["experiment"]))
    writer = ArtifactWriter(out_dir)
    ctx = Context(doc, seed, tol, max_paths, writer)
    expect = doc.get("expect", "pass")
    started = time.perf_counter()
    error = None
    with threadpool_limits(limits=args.threads):
        try:
            checks = get(doc["experiment"]).run(ctx)
        except (PathOverflow, NtcViolation, SplitRejected, PremeasurementIncomplete, ValueUndefined) as exc:
            checks, error = {}, f"{type(exc).__name__}: {exc}"
    all_pass = error is None and all(checks.values())
    if error is not None:
        ok = False
    elif expect == "fail":
        ok = not all_pass
    else:
        ok = all_pass
    code = EXIT_OK if ok else EXIT_CHECK_FAILED
    writer.write_json("manifest.json", {
        "schema": "1",
        "tool": "qbranch",
        "version": __version__,
        "experiment": doc["experiment"],
        "scenario_sha256": hashlib.sha256(raw).hexdigest(),
        "seed": seed,
        "tolerance": {"eps_x": tol.eps_x, "k_accuracy": tol.k},
        "wall_time_s": round(time.perf_counter() - started, 3),
        "files": list(writer.files),
        "checks": checks,
        "expect": expect,
        "error": error,
        "exit_code": code,
    })
    for name, passed in checks.items():
        print(f"{'PASS' if passed else 'FAIL'}  {doc['experiment']}.{name}")
    if error is not None:
        print(f"error: {error}", file=sys.stderr)
    print(f"{doc['experiment']}: {'ok' if ok else 'FAILED'} (expect {expect}); artifacts in {writer.root}")
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "list":
        for name, desc in list_experiments():
            print(f"{name}\t{desc}")
        return EXIT_OK
    try:
        return _run(args)
    except UsageError as exc:
        print(f"qbranch: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

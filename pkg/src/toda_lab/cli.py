"""Command line entry point: ``toda-lab <experiment> [--config FILE] [--key value ...]``."""
from __future__ import annotations

import argparse
import json
import sys

from .experiments import DRIVERS, ConfigError, ExperimentConfig, run


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens: list[str]) -> dict:
    """Turn ``--key value`` / ``--key=value`` tokens into a dict of JSON-decoded values."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for --{key}")
            i += 1
            raw = tokens[i]
        out[key.replace("-", "_") if key.replace("-", "_") in ExperimentConfig.keys() else key] = \
            _parse_value(raw)
        i += 1
    return out


def build_config(experiment: str, config_path: str | None, overrides: list[str]) -> ExperimentConfig:
    data = {}
    if config_path is not None:
        try:
            with open(config_path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    data.update(parse_overrides(overrides))
    data["experiment"] = experiment
    return ExperimentConfig.from_mapping(data)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="toda-lab",
        description="Toda lattice experiments. Any config key can be overridden as --key value.")
    parser.add_argument("experiment", help="one of: " + ", ".join(DRIVERS))
    parser.add_argument("--config", help="JSON file with flat config keys")
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.experiment not in DRIVERS:
        print(f"toda-lab: unknown experiment {args.experiment!r}", file=sys.stderr)
        return 2
    try:
        cfg = build_config(args.experiment, args.config, rest)
    except ConfigError as exc:
        print(f"toda-lab: {exc}", file=sys.stderr)
        return 2
    try:
        status = run(cfg)
    except OSError as exc:
        print(f"toda-lab: cannot write outputs: {exc}", file=sys.stderr)
        return 2
    if status == 3:
        print(f"toda-lab: numerical failure, partial outputs in {cfg.output_dir}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())

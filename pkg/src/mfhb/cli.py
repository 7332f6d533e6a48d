"""Command-line runner: ``mfhb run``, ``mfhb preset`` and ``mfhb list-presets``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .core import ConfigError, RunConfig, sample_dataset
from .diagnostics import diagnostics_record, particle_free_energy
from .dynamics import NumericalAbort, records_csv, run_trajectory
from .presets import PRESETS, marginals_csv, run_preset

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3


def parse_value(text: str):
    """YAML scalar parsing, plus plain float syntax such as ``1e-2`` that YAML 1.1 leaves as text."""
    value = yaml.safe_load(text)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def parse_overrides(items: list[str] | None) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like KEY=VALUE, got {item!r}")
        out[key.strip()] = parse_value(value.strip())
    return out


def load_config_file(path) -> dict:
    """Flat mapping from a YAML (or JSON) file. A ``meta.json`` written by ``run`` is
    accepted too; its ``config`` entry is used."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        obj = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError(f"{p} must hold a mapping of config keys")
    if "config" in obj and "code_version" in obj:
        obj = obj["config"]
    return {k: _coerce(v) for k, v in obj.items()}


def _coerce(v):
    if isinstance(v, str):
        return parse_value(v)
    if isinstance(v, dict):
        return {k: _coerce(x) for k, x in v.items()}
    return v


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        threads = flag
    else:
        env = os.environ.get("MFHB_THREADS", "").strip()
        try:
            threads = int(env) if env else 1
        except ValueError as exc:
            raise ConfigError(f"MFHB_THREADS must be an integer, got {env!r}") from exc
    if threads < 1:
        raise ConfigError("thread count must be positive")
    return threads


def run(config_path, overrides: dict, out_dir, seed: int | None = None,
        threads: int = 1) -> int:
    """One trajectory plus enabled diagnostics, written as trajectory.csv, marginals.csv
    and meta.json."""
    try:
        flat = load_config_file(config_path) if config_path is not None else {}
        flat.update(overrides)
        if seed is not None:
            flat["seed"] = seed
        cfg = RunConfig.from_flat(flat)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = sample_dataset(cfg.d, cfg.n0, cfg.m, cfg.seed)
    try:
        ens, recs = run_trajectory(cfg, data, threads=threads)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    (out / "trajectory.csv").write_text(records_csv(recs))
    (out / "marginals.csv").write_text(marginals_csv(ens))
    meta = {"code_version": __version__, "config": cfg.to_dict(),
            "final": {"risk": recs[-1].risk, "loss": recs[-1].loss, "kinetic": recs[-1].kinetic}}
    if cfg.diagnostics and ens.n > 3:
        meta["final"]["free_energy_est"] = particle_free_energy(
            ens, data, cfg.act, cfg.regularizer, cfg.beta)
        lines = [diagnostics_record("run", r.step, entropy_est=r.entropy_est,
                                    free_energy_est=r.free_energy_est) for r in recs]
        (out / "diagnostics.jsonl").write_text("\n".join(lines) + "\n")
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def preset(name: str, out_dir, seed: int = 0, overrides: dict | None = None,
           threads: int = 1) -> int:
    if name not in PRESETS:
        print(f"config error: unknown preset {name!r}; choose from {', '.join(PRESETS)}",
              file=sys.stderr)
        return EXIT_CONFIG
    try:
        meta = run_preset(name, Path(out_dir), seed=seed, threads=threads, overrides=overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    print(json.dumps({k: v for k, v in meta.items() if k != "params"}, sort_keys=True, indent=2,
                     default=str))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfhb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="64-bit unsigned seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: $MFHB_THREADS or 1)")

    p_run = sub.add_parser("run", help="run one trajectory from a config file")
    p_run.add_argument("--config", default=None, help="YAML file with flat dotted keys")
    common(p_run)
    p_pre = sub.add_parser("preset", help="run a named experiment")
    p_pre.add_argument("name")
    common(p_pre)
    sub.add_parser("list-presets", help="show the available presets")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-presets":
        for name, (_, desc) in PRESETS.items():
            print(f"{name:24s} {desc}")
        return EXIT_OK
    try:
        threads = resolve_threads(args.threads)
        overrides = parse_overrides(args.set)
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "run":
        return run(args.config, overrides, args.out, seed=args.seed, threads=threads)
    return preset(args.name, args.out, seed=args.seed or 0, overrides=overrides, threads=threads)


if __name__ == "__main__":
    sys.exit(main())

"""``syk-battery`` command line.

Configuration is layered: built-in defaults, then ``--preset``, then the
``--config`` file (YAML or JSON), then explicit flags. Errors are printed to
stderr as one JSON object and the process exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import yaml

from .ensemble import EnsembleConfig, run_ensemble
from .errors import ConfigError, SykBatteryError
from .fermion_ops import battery_ground_state, majorana_local
from .linalg_core import TimeGrid, assemble
from .presets import PRESETS, preset
from .report import cmd_report
from .results_io import OTOC_COLUMNS, config_hash, write_csv, write_json, write_outputs
from .scrambling import otoc_trace

log = logging.getLogger("syk_battery")

CONFIG_KEYS = {f.name for f in fields(EnsembleConfig)}
KINDS = {
    "charge": ("charge",),
    "otoc": ("otoc",),
    "sweep": ("sweep",),
    "commutators": ("commutators",),
}
# what each command needs computed, on top of the preset/config
COMMAND_FLAGS = {
    "charge": {"energy": True},
    "otoc": {"otoc": True},
    "sweep": {},
    "commutators": {"commutators": True},
}


def load_config_file(path: str | Path) -> dict[str, Any]:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def resolve_config(args: argparse.Namespace) -> tuple[EnsembleConfig, Path, str | None]:
    layers: dict[str, Any] = {}
    preset_name = args.preset
    file_cfg = load_config_file(args.config) if args.config else {}
    preset_name = preset_name or file_cfg.pop("preset", None)
    out = file_cfg.pop("out", None)
    if preset_name:
        layers.update(preset(preset_name))
    unknown = set(file_cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    layers.update(file_cfg)
    layers.update(COMMAND_FLAGS[args.command])
    if args.n:
        layers["N_list"] = args.n
    if args.seed is not None:
        layers["base_seed"] = args.seed
    if args.realizations is not None:
        layers["realizations"] = args.realizations
        layers.pop("realizations_override", None)
    if args.variant:
        layers["variants"] = ["raw", "regularized"] if args.variant == "both" else [args.variant]
    if args.workers is not None:
        layers["workers"] = args.workers
    if args.backend:
        layers["backend"] = args.backend
    if getattr(args, "k_max", None) is not None:
        layers["k_max"] = args.k_max
    if args.out:
        out = args.out
    try:
        cfg = EnsembleConfig(**layers)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, Path(out or f"results/{args.command}"), preset_name


def _debug_zero_otoc(cfg: EnsembleConfig, out: Path) -> list[Path]:
    """OTOC with a vanishing charger: ``W(t) = W`` so ``F`` is zero throughout."""
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash({**cfg.to_dict(), "debug_zero_charger": True})
    paths = []
    grid = TimeGrid(0.0, cfg.horizon, cfg.n_steps)
    for N in cfg.N_list:
        H = assemble(dim=2**N, rows=[], cols=[], values=[])
        tr = otoc_trace(H, battery_ground_state(N), majorana_local(N, N), majorana_local(N - 1, N), grid, N=N, method="expm")
        rows = [[t, f, 0.0, 0] for t, f in zip(grid.times, tr.values)]
        p = out / f"otoc_N{N}_zero.csv"
        write_csv(p, OTOC_COLUMNS, rows, f"kind=otoc_debug config_hash={h} base_seed={cfg.base_seed}")
        paths.append(p)
    p = out / "manifest.json"
    write_json(p, {"command": "otoc", "debug_zero_charger": True, "config": cfg.to_dict(), "config_hash": h,
                   "preset": None, "files": sorted(x.name for x in paths)})
    return paths + [p]


def run_command(args: argparse.Namespace) -> list[Path]:
    if args.command == "report":
        return [cmd_report(args.results_dir, args.out)]
    cfg, out, preset_name = resolve_config(args)
    if args.command == "otoc" and args.debug_zero_charger:
        return _debug_zero_otoc(cfg, out)
    log.info("running %s with config hash %s", args.command, config_hash(cfg))
    summary = run_ensemble(cfg)
    kinds = list(KINDS[args.command])
    if args.command == "otoc" and cfg.energy:
        kinds.insert(0, "charge")
    if args.command == "sweep":
        kinds = (["charge"] if cfg.energy else []) + kinds + (["otoc"] if cfg.otoc else [])
    return write_outputs(summary, out, kinds, args.command, preset_name)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="syk-battery", description="SYK quantum battery charging and scrambling experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("charge", "energy, power and population traces"),
        ("otoc", "OTOC traces and Lyapunov fits"),
        ("sweep", "size sweep of optimal time, power, bounds, variances and bandwidth"),
        ("commutators", "nested-commutator norms"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML or JSON file with EnsembleConfig keys (plus 'out', 'preset')")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--n", type=int, nargs="+", help="system sizes")
        p.add_argument("--seed", type=int, help="base seed")
        p.add_argument("--realizations", type=int, help="realizations per size (overrides the schedule)")
        p.add_argument("--variant", choices=("raw", "regularized", "both"))
        p.add_argument("--workers", type=int)
        p.add_argument("--backend", choices=("expm", "spectral"))
        p.add_argument("--out", help="output directory")
        if name == "otoc":
            p.add_argument("--debug-zero-charger", action="store_true", help="replace the charger by zero (F must vanish)")
        if name == "commutators":
            p.add_argument("--k-max", type=int)
    p = sub.add_parser("report", help="collate result directories into a markdown summary")
    p.add_argument("results_dir")
    p.add_argument("--out", help="summary file (default <results_dir>/summary.md)")
    return ap


def error_record(exc: BaseException) -> dict[str, Any]:
    code = exc.code if isinstance(exc, SykBatteryError) else type(exc).__name__
    return {"error": code, "message": str(exc)}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        paths = run_command(args)
    except (SykBatteryError, OSError, ValueError) as exc:
        print(json.dumps(error_record(exc), sort_keys=True), file=sys.stderr)
        return 2
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())

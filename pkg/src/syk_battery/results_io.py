"""CSV/JSON persistence with config hashes and a reproducibility manifest.

Every CSV starts with one ``#`` metadata line carrying the config hash; the
header row follows. Floats are written with ``repr`` so reruns are
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .charging import ChargingResult, binomial_distribution
from .ensemble import EnsembleConfig, EnsembleSummary, realization_seeds

EXECUTION_ONLY = ("workers",)

CHARGE_COLUMNS = (
    "t", "energy", "energy_se", "normalized_energy", "normalized_energy_se", "power", "tau_star_marker",
)
CHARGE_TAIL = (
    "hellinger_of_mean", "hellinger_mean", "var_h0", "var_h0_local", "var_h0_entangled", "var_h1", "dev_h1",
    "t_qsl", "t_rqsl", "power_lower", "power_upper",
)
OTOC_COLUMNS = ("t", "F", "F_se", "tau_star_marker")
LYAPUNOV_COLUMNS = (
    "N", "lambda_fit", "a", "b", "fit_points", "residual", "t_start", "t_end", "ehrenfest_time", "tau_star", "otoc_at_tau_star",
)
SWEEP_COLUMNS = (
    "N", "realizations", "tau_star", "tau_star_realization_se", "p_star", "t_qsl", "t_rqsl", "power_lower", "power_upper",
    "bandwidth", "bandwidth_se", "var_h0", "var_h0_local", "var_h0_entangled", "var_h1", "normalized_energy_at_tau_star",
    "hellinger_at_tau_star", "hellinger_final",
)
COMMUTATOR_COLUMNS = ("N", "k", "mean_norm", "se", "overflow_count")
SINGLE_TAIL = (
    "hellinger", "var_h0", "var_h0_local", "var_h0_entangled", "var_h1", "dev_h1", "t_qsl", "t_rqsl", "power_lower", "power_upper",
)


def charge_columns(N: int) -> tuple[str, ...]:
    return CHARGE_COLUMNS + tuple(f"p_{k}" for k in range(N + 1)) + CHARGE_TAIL


def single_columns(N: int) -> tuple[str, ...]:
    return ("t", "energy", "power") + tuple(f"p_{k}" for k in range(N + 1)) + SINGLE_TAIL


def config_hash(cfg: EnsembleConfig | dict) -> str:
    d = cfg.to_dict() if isinstance(cfg, EnsembleConfig) else dict(cfg)
    for k in EXECUTION_ONLY:
        d.pop(k, None)
    blob = json.dumps(clean(d), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def clean(obj: Any) -> Any:
    """JSON-safe copy: numpy scalars/arrays unwrapped, non-finite floats -> None."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def fmt(x: Any) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if x is None:
        return "nan"
    return repr(float(x))


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence[Any]], meta: str) -> None:
    lines = [f"# {meta}", ",".join(columns)]
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"{path.name}: row of length {len(row)} for {len(columns)} columns")
        lines.append(",".join(fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def read_csv(path: Path) -> tuple[dict[str, str], list[str], np.ndarray]:
    """Return ``(meta, columns, data)`` of a file written by :func:`write_csv`."""
    text = Path(path).read_text().splitlines()
    meta = dict(tok.split("=", 1) for tok in text[0].lstrip("# ").split() if "=" in tok)
    cols = text[1].split(",")
    data = np.array([[float(v) for v in line.split(",")] for line in text[2:] if line], dtype=float)
    return meta, cols, data.reshape(-1, len(cols))


def write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(clean(obj), sort_keys=True, indent=2) + "\n")


def _meta(h: str, cfg: EnsembleConfig, kind: str) -> str:
    return f"syk-battery={__version__} kind={kind} config_hash={h} base_seed={cfg.base_seed}"


def _marker(times: np.ndarray, tau: float) -> np.ndarray:
    m = np.zeros(times.size, dtype=int)
    if np.isfinite(tau):
        m[int(np.argmin(np.abs(times - tau)))] = 1
    return m


def write_charge_traces(summary: EnsembleSummary, out: Path, h: str) -> list[Path]:
    cfg = summary.config
    paths = []
    for N, s in sorted(summary.sizes.items()):
        for v, vs in s.variants.items():
            if vs.populations is None:
                continue
            t = vs.grid.times
            tr, er = vs.traces, vs.errors
            mark = _marker(t, vs.scalars["tau_star"])
            rows = []
            for i in range(t.size):
                row = [t[i], tr["energy"][i], er["energy"][i], tr["normalized_energy"][i], er["normalized_energy"][i],
                       tr["power"][i], int(mark[i])]
                row += list(vs.populations[i])
                row += [tr["hellinger_of_mean"][i], tr["hellinger"][i]]
                row += [tr[k][i] for k in CHARGE_TAIL[2:]]
                rows.append(row)
            p = out / f"charge_N{N}_{v}.csv"
            write_csv(p, charge_columns(N), rows, _meta(h, cfg, "charge"))
            paths.append(p)

            times = [("tau_star", vs.scalars["tau_star"]), ("final", float(t[-1]))]
            times += [(f"t{x:g}", x) for x in cfg.hellinger_times]
            cols = ["k", "binomial"] + [f"p_{lab}" for lab, _ in times]
            binom = binomial_distribution(N)
            snap = [[k, binom[k]] + [float(np.interp(x, t, vs.populations[:, k])) if np.isfinite(x) else float("nan") for _, x in times]
                    for k in range(N + 1)]
            p = out / f"populations_N{N}_{v}.csv"
            write_csv(p, cols, snap, _meta(h, cfg, "populations"))
            paths.append(p)
    return paths


def write_otoc_traces(summary: EnsembleSummary, out: Path, h: str) -> list[Path]:
    cfg = summary.config
    paths = []
    tables: dict[str, list] = {}
    for N, s in sorted(summary.sizes.items()):
        for v, vs in s.variants.items():
            if vs.otoc is None:
                continue
            t = vs.grid.times
            ts = vs.scalars.get("tau_star", float("nan"))
            mark = _marker(t, ts)
            rows = [[t[i], vs.otoc[i], vs.otoc_se[i], int(mark[i])] for i in range(t.size)]
            p = out / f"otoc_N{N}_{v}.csv"
            write_csv(p, OTOC_COLUMNS, rows, _meta(h, cfg, "otoc"))
            paths.append(p)
            ly = vs.lyapunov or {}
            et = (summary.fits.get(v, {}).get("ehrenfest_times") or {}).get(str(N))
            tables.setdefault(v, []).append(
                [N, ly.get("lambda_fit"), ly.get("a"), ly.get("b"), ly.get("fit_points") or 0, ly.get("residual"),
                 ly.get("t_start"), ly.get("t_end"), et, ts, vs.scalars.get("otoc_at_tau_star")]
            )
    for v, rows in tables.items():
        p = out / f"lyapunov_{v}.csv"
        write_csv(p, LYAPUNOV_COLUMNS, rows, _meta(h, cfg, "lyapunov"))
        paths.append(p)
    return paths


def write_sweep_tables(summary: EnsembleSummary, out: Path, h: str) -> list[Path]:
    cfg = summary.config
    paths = []
    for v in cfg.variants:
        rows = []
        for N, s in sorted(summary.sizes.items()):
            sc = s.variants[v].scalars
            g = lambda k: sc.get(k, float("nan"))
            rows.append([
                N, s.count, g("tau_star"), g("tau_star_realization_se"), g("p_star"), g("t_qsl_at_tau_star"),
                g("t_rqsl_at_tau_star"), g("power_lower_at_tau_star"), g("power_upper_at_tau_star"), s.bandwidth_mean,
                s.bandwidth_se, g("var_h0_at_tau_star"), g("var_h0_local_at_tau_star"), g("var_h0_entangled_at_tau_star"),
                g("var_h1_at_tau_star"), g("normalized_energy_at_tau_star"), g("hellinger_at_tau_star"), g("hellinger_final"),
            ])
        p = out / f"sweep_{v}.csv"
        write_csv(p, SWEEP_COLUMNS, rows, _meta(h, cfg, "sweep"))
        paths.append(p)
    return paths


def write_commutator_table(summary: EnsembleSummary, out: Path, h: str) -> list[Path]:
    rows = []
    for N, s in sorted(summary.sizes.items()):
        if not s.commutators:
            continue
        for k, (m, se, n) in enumerate(zip(s.commutators["mean"], s.commutators["se"], s.commutators["overflow"])):
            rows.append([N, k, m, se, int(n)])
    p = out / "commutators.csv"
    write_csv(p, COMMUTATOR_COLUMNS, rows, _meta(h, summary.config, "commutators"))
    return [p]


def summary_dict(summary: EnsembleSummary, h: str) -> dict:
    sizes = {}
    for N, s in sorted(summary.sizes.items()):
        entry = {
            "realizations": s.count,
            "bandwidth_mean": s.bandwidth_mean,
            "bandwidth_se": s.bandwidth_se,
            "failures": s.failures,
            "variants": {},
        }
        for v, vs in s.variants.items():
            entry["variants"][v] = {
                "grid": {"t0": vs.grid.t0, "t1": vs.grid.t1, "n_steps": vs.grid.n_steps},
                "scalars": vs.scalars,
                "lyapunov": vs.lyapunov,
                "per_realization": vs.per_realization,
            }
        if s.commutators:
            entry["commutators"] = s.commutators
        sizes[str(N)] = entry
    return {"config_hash": h, "sizes": sizes, "fits": summary.fits}


def write_manifest(out: Path, cfg: EnsembleConfig, h: str, command: str, preset: str | None, files: list[Path]) -> Path:
    p = out / "manifest.json"
    write_json(p, {
        "config_hash": h,
        "command": command,
        "preset": preset,
        "code_version": f"syk_battery {__version__}",
        "config": cfg.to_dict(),
        "seeds": {str(k): v for k, v in realization_seeds(cfg).items()},
        "rng": "numpy Philox keyed by SeedSequence([base_seed, N, r])",
        "files": sorted(f.name for f in files),
    })
    return p


WRITERS = {
    "charge": write_charge_traces,
    "otoc": write_otoc_traces,
    "sweep": write_sweep_tables,
    "commutators": write_commutator_table,
}


def write_outputs(summary: EnsembleSummary, out: str | Path, kinds: Sequence[str], command: str, preset: str | None = None) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash(summary.config)
    files: list[Path] = []
    for kind in kinds:
        files += WRITERS[kind](summary, out, h)
    p = out / "summary.json"
    write_json(p, summary_dict(summary, h))
    files.append(p)
    files.append(write_manifest(out, summary.config, h, command, preset, files))
    return files


def write_charging_result(res: ChargingResult, stem: str | Path, meta: dict[str, Any]) -> tuple[Path, Path]:
    """One realization: ``<stem>.csv`` traces and ``<stem>.json`` scalars."""
    stem = Path(stem)
    N = res.populations.shape[1] - 1
    t = res.grid.times
    rows = []
    for i in range(t.size):
        rows.append([t[i], res.energy[i], res.power[i]] + list(res.populations[i]) + [getattr(res, k)[i] for k in SINGLE_TAIL])
    h = meta.get("config_hash", "none")
    csv_path = stem.with_suffix(".csv")
    write_csv(csv_path, single_columns(N), rows, f"syk-battery={__version__} kind=charging_result config_hash={h} seed={res.seed}")
    k = int(np.argmin(np.abs(t - res.tau_star))) if np.isfinite(res.tau_star) else -1
    scalars = {
        **meta,
        "variant": res.variant,
        "seed": res.seed,
        "bandwidth": res.bandwidth,
        "tau_star": res.tau_star,
        "p_star": res.p_star,
        "t_qsl_at_tau_star": res.t_qsl[k],
        "t_rqsl_at_tau_star": res.t_rqsl[k],
        "power_lower_at_tau_star": res.power_lower[k],
        "power_upper_at_tau_star": res.power_upper[k],
    }
    json_path = stem.with_suffix(".json")
    write_json(json_path, scalars)
    return csv_path, json_path

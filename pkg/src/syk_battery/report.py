"""Collate result directories into one markdown summary with invariant checks."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, MissingResults
from .results_io import read_csv

SANDWICH_RTOL = 1e-9
SUM_RULE_ATOL = 1e-9
NORM_ATOL = 1e-10
CROSS_CHECK_RTOL = 0.05


def _groups(results_dir: Path) -> list[tuple[Path, dict]]:
    manifests = sorted(results_dir.rglob("manifest.json"))
    if not manifests:
        raise MissingResults(f"no manifest.json under {results_dir}")
    return [(m.parent, json.loads(m.read_text())) for m in manifests]


def _check_hashes(folder: Path, manifest: dict) -> None:
    h = manifest["config_hash"]
    for p in sorted(folder.glob("*.csv")):
        meta, _, _ = read_csv(p)
        if meta.get("config_hash") != h:
            raise ConfigError(f"{p} carries config_hash={meta.get('config_hash')}, manifest has {h}; refusing to collate")
    s = folder / "summary.json"
    if s.exists() and json.loads(s.read_text()).get("config_hash") != h:
        raise ConfigError(f"{s} config hash differs from manifest {h}; refusing to collate")


def _col(cols: list[str], data: np.ndarray, name: str) -> np.ndarray:
    return data[:, cols.index(name)]


def trace_checks(path: Path) -> list[tuple[str, bool, str]]:
    """Pass/fail of the pointwise invariants in one averaged charge trace file."""
    _, cols, d = read_csv(path)
    t = _col(cols, d, "t")
    out = []
    P, lo, hi = (_col(cols, d, k) for k in ("power", "power_lower", "power_upper"))
    ok = np.isfinite(lo) & (t > 0)
    tol = SANDWICH_RTOL * np.maximum(1.0, np.abs(P))
    bad = int(np.sum(ok & ((lo > P + tol) | (P > hi + tol))))
    out.append(("power sandwich lower <= P <= upper", bad == 0, f"{int(ok.sum())} points, {bad} violations"))
    tq, tr = _col(cols, d, "t_qsl"), _col(cols, d, "t_rqsl")
    ok = np.isfinite(tq) & np.isfinite(tr) & (t > 0)
    tol = SANDWICH_RTOL * np.maximum(1.0, t)
    bad = int(np.sum(ok & ((tq > t + tol) | (t > tr + tol))))
    out.append(("speed limits T_QSL <= t <= T_RQSL", bad == 0, f"{int(ok.sum())} points, {bad} violations"))
    v, vl, ve = (_col(cols, d, k) for k in ("var_h0", "var_h0_local", "var_h0_entangled"))
    err = float(np.max(np.abs(vl + ve - v)))
    out.append(("variance sum rule local + entangled = total", err <= SUM_RULE_ATOL, f"max error {err:.2e}"))
    pk = [c for c in cols if c.startswith("p_")]
    err = float(np.max(np.abs(d[:, [cols.index(c) for c in pk]].sum(axis=1) - 1.0)))
    out.append(("populations sum to one", err <= NORM_ATOL, f"max error {err:.2e}"))
    return out


def _fmt(x: Any) -> str:
    if x is None:
        return "-"
    if isinstance(x, float):
        return "nan" if not math.isfinite(x) else f"{x:.6g}"
    return str(x)


def _table(header: list[str], rows: list[list[Any]]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(_fmt(v) for v in r) + " |" for r in rows]
    return lines


SCALAR_COLUMNS = ("tau_star", "p_star", "t_qsl_at_tau_star", "t_rqsl_at_tau_star", "power_lower_at_tau_star",
                  "power_upper_at_tau_star", "normalized_energy_at_tau_star", "hellinger_at_tau_star", "lambda_fit")


def cross_check_rows(summary: dict) -> list[list[Any]]:
    """``tau*_raw * bandwidth`` against ``tau*_reg`` for each size with both frames."""
    rows = []
    for N, e in sorted(summary["sizes"].items(), key=lambda kv: int(kv[0])):
        v = e["variants"]
        if "raw" not in v or "regularized" not in v:
            continue
        tr, tg = v["raw"]["scalars"].get("tau_star"), v["regularized"]["scalars"].get("tau_star")
        if tr is None or tg is None:
            continue
        conv = tr * e["bandwidth_mean"]
        rel = abs(conv - tg) / tg
        rows.append([int(N), tr, e["bandwidth_mean"], conv, tg, rel, "PASS" if rel <= CROSS_CHECK_RTOL else "FAIL"])
    return rows


def build_report(results_dir: str | Path) -> str:
    results_dir = Path(results_dir)
    if not results_dir.is_dir():
        raise MissingResults(f"{results_dir} is not a directory")
    lines = ["# syk-battery results summary", ""]
    for folder, man in _groups(results_dir):
        _check_hashes(folder, man)
        rel = folder.relative_to(results_dir)
        title = man.get("preset") or man.get("command")
        lines += [f"## {title} ({rel if str(rel) != '.' else './'})", ""]
        cfg = man["config"]
        lines += [f"- command: `{man['command']}`", f"- config hash: `{man['config_hash']}`",
                  f"- sizes: {cfg['N_list']}, variants: {cfg['variants']}, base seed: {cfg['base_seed']}", ""]
        spath = folder / "summary.json"
        if not spath.exists():
            lines += ["(no summary.json)", ""]
            continue
        summary = json.loads(spath.read_text())
        for v in cfg["variants"]:
            rows = []
            for N, e in sorted(summary["sizes"].items(), key=lambda kv: int(kv[0])):
                sc = e["variants"].get(v, {}).get("scalars", {})
                rows.append([int(N), e["realizations"], e["bandwidth_mean"]] + [sc.get(k) for k in SCALAR_COLUMNS])
            lines += [f"### {v} frame", ""] + _table(["N", "realizations", "bandwidth", *SCALAR_COLUMNS], rows) + [""]

        fit_rows = []
        for scope, fits in sorted(summary.get("fits", {}).items()):
            items = {"bandwidth": fits} if scope == "bandwidth" else {k: f for k, f in fits.items() if k not in ("ehrenfest_times",)}
            for key, f in sorted(items.items()):
                if not isinstance(f, dict):
                    continue
                if "error" in f:
                    fit_rows.append([scope, key, "-", "-", "-", f["error"]])
                elif "c" in f:
                    fit_rows.append([scope, key, f["a"], f["b"], f["c"], "degenerate" if f.get("degenerate") else "ok"])
                elif "lambda0" in f:
                    fit_rows.append([scope, key, f["lambda0"], f["lambda1"], f["lambda2"], "1/N expansion"])
        if fit_rows:
            lines += ["### Fits", ""] + _table(["scope", "quantity", "a / l0", "b / l1", "c / l2", "status"], fit_rows) + [""]

        check_rows = []
        for p in sorted(folder.glob("charge_N*_*.csv")):
            for name, ok, detail in trace_checks(p):
                check_rows.append([p.name, name, "PASS" if ok else "FAIL", detail])
        if check_rows:
            lines += ["### Invariant checks", ""] + _table(["file", "check", "result", "detail"], check_rows) + [""]

        cc = cross_check_rows(summary)
        if cc:
            hdr = ["N", "tau*_raw", "bandwidth", "tau*_raw x bandwidth", "tau*_reg", "rel diff", f"within {CROSS_CHECK_RTOL:g}"]
            lines += ["### Frame conversion cross-check", ""] + _table(hdr, cc) + [""]
    return "\n".join(lines)


def cmd_report(results_dir: str | Path, out: str | Path | None = None) -> Path:
    text = build_report(results_dir)
    path = Path(out) if out else Path(results_dir) / "summary.md"
    path.write_text(text + "\n")
    return path

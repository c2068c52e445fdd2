"""Disorder-averaged experiments over system sizes.

Realizations are independent work items keyed by ``(N, r)``; their seeds are
derived from ``(base_seed, N, r)`` alone, so the summary is the same whatever
the worker count. Traces are averaged pointwise first and the derived scalars
(optimal time, optimal power, Lyapunov fit) are taken from the averages.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import optimize
from threadpoolctl import threadpool_limits

from .charging import (
    ChargingResult,
    ObservableTrace,
    analyse_trajectory,
    build_charger,
    default_grid,
    energy_from_populations,
    evolve,
    hellinger_to_binomial,
    optimal_charging,
    reframe,
)
from .errors import EnsembleFailure, MaxAtBoundary, NoConvergence, RankDeficient, SykBatteryError
from .fermion_ops import battery_ground_state, majorana_local
from .linalg_core import DENSE_MAX_DIM, TimeGrid
from .scrambling import (
    F0_DEFAULT,
    F1_DEFAULT,
    OtocTrace,
    ehrenfest_time,
    fit_lyapunov,
    lyapunov_expansion,
    nested_commutator_norms,
    otoc_trace,
)
from .syk_charger import bandwidth, build_syk_hamiltonian, charger_sectors, realization_seed, sample_couplings

log = logging.getLogger(__name__)

REFERENCE_SCHEDULE = ((4, 10, 1000), (11, 13, 500), (14, 17, 200))


def realization_schedule(N: int, factor: float = 1.0) -> int:
    """Number of disorder realizations for size ``N`` (reference bands times ``factor``)."""
    if N < 4:
        raise ValueError("N must be at least 4")
    base = REFERENCE_SCHEDULE[-1][2]
    for lo, hi, count in REFERENCE_SCHEDULE:
        if lo <= N <= hi:
            base = count
            break
    return max(2, int(round(base * factor)))


@dataclass
class EnsembleConfig:
    N_list: list[int] = field(default_factory=lambda: [4, 5, 6, 7, 8, 9, 10, 11, 12])
    base_seed: int = 0
    variants: tuple[str, ...] = ("regularized",)
    realizations: int | None = None
    realizations_override: dict[int, int] = field(default_factory=dict)
    realization_factor: float = 0.1
    J: float = 1.0
    omega0: float = 1.0
    horizon: float = 16.0
    n_steps: int = 321
    backend: str = "expm"
    energy: bool = True
    otoc: bool = False
    otoc_max_N: int = 12
    commutators: bool = False
    commutators_max_N: int = 10
    k_max: int = 6
    memory_budget: float = 2e9
    F0: float = F0_DEFAULT
    F1: float = F1_DEFAULT
    fit_mode: str = "averaged"
    discard_smallest: int = 3
    workers: int = 1
    hellinger_times: tuple[float, ...] = ()

    def __post_init__(self):
        self.N_list = [int(n) for n in self.N_list]
        self.variants = tuple(self.variants)
        self.realizations_override = {int(k): int(v) for k, v in self.realizations_override.items()}
        self.hellinger_times = tuple(float(x) for x in self.hellinger_times)
        if any(n < 4 for n in self.N_list):
            raise ValueError("every N must be at least 4")
        for v in self.variants:
            if v not in ("raw", "regularized"):
                raise ValueError(f"unknown variant {v!r}")
        if self.backend not in ("expm", "spectral"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.fit_mode not in ("averaged", "per_realization"):
            raise ValueError(f"unknown fit mode {self.fit_mode!r}")
        for n in self.N_list:
            if self.count(n) < 2:
                raise ValueError("need at least two realizations per N")

    def count(self, N: int) -> int:
        if N in self.realizations_override:
            return self.realizations_override[N]
        if self.realizations is not None:
            return int(self.realizations)
        return realization_schedule(N, self.realization_factor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variants"] = list(self.variants)
        d["hellinger_times"] = list(self.hellinger_times)
        d["realizations_override"] = {str(k): v for k, v in sorted(self.realizations_override.items())}
        return d


# ---------------------------------------------------------------- workers


def _bandwidth_task(args) -> float:
    N, J, seed = args
    with threadpool_limits(1):
        H1 = build_syk_hamiltonian(sample_couplings(N, J, seed))
        return bandwidth(H1, charger_sectors(N))


def _realization_task(args) -> dict[str, Any]:
    N, seed, cfg, grids = args
    try:
        with threadpool_limits(1):
            return _realization(N, seed, cfg, grids)
    except (SykBatteryError, np.linalg.LinAlgError, ArithmeticError) as exc:
        return {"seed": seed, "error": f"{type(exc).__name__}: {exc}"}


def _realization(N: int, seed: int, cfg: EnsembleConfig, grids: dict[str, TimeGrid]) -> dict[str, Any]:
    want_otoc = cfg.otoc and N <= cfg.otoc_max_N
    spectral = cfg.backend == "spectral" or (want_otoc and 2**N <= DENSE_MAX_DIM)
    base = build_charger(N, cfg.J, seed, "raw", spectral=spectral)
    psi0 = battery_ground_state(N)
    out: dict[str, Any] = {"seed": seed, "bandwidth": base.bandwidth}
    V = majorana_local(N, N)
    W = majorana_local(N - 1, N)
    for v in cfg.variants:
        ch = reframe(base, v)
        grid = grids[v]
        rec: dict[str, Any] = {}
        if cfg.energy:
            states = evolve(ch, psi0, grid, cfg.backend)
            res = analyse_trajectory(states, grid, ch, N, cfg.omega0, seed)
            for name in ChargingResult.TRACE_FIELDS:
                rec[name] = getattr(res, name)
            rec["populations"] = res.populations
            rec["tau_star"] = res.tau_star
            rec["p_star"] = res.p_star
        if want_otoc:
            rec["otoc"] = otoc_trace(ch.matrix, psi0, V, W, grid, N=N, variant=v, propagator=ch.propagator).values
        out[v] = rec
    if cfg.commutators and N <= cfg.commutators_max_N:
        reg = reframe(base, "regularized")
        out["commutators"] = nested_commutator_norms(
            reg.matrix, W, cfg.k_max, include_zero=True, memory_budget=cfg.memory_budget, on_overflow="nan"
        )
    return out


def _pool_map(fn, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=1))


# ---------------------------------------------------------------- reduction


def mean_se(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean over axis 0 and its unbiased standard error; NaNs are skipped."""
    stack = np.asarray(stack, dtype=float)
    n = np.sum(~np.isnan(stack), axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.nansum(stack, axis=0) / n
        var = np.nansum((stack - mean) ** 2, axis=0) / (n - 1)
        se = np.sqrt(var / n)
    return mean, se


def _interp(grid: TimeGrid, values: np.ndarray, t: float) -> float:
    if not np.isfinite(t):
        return float("nan")
    return float(np.interp(t, grid.times, values))


@dataclass
class PowerLawFit:
    a: float
    b: float
    c: float
    cov: list[list[float]] | None
    n_points: int
    residual: float
    degenerate: bool = False


def _vp_residual(x, y, c):
    A = np.stack([np.ones_like(x), x**c], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef, float(np.sum((A @ coef - y) ** 2))


def power_law_fit(xs: Sequence[float], ys: Sequence[float], discard_smallest: int = 3) -> PowerLawFit:
    """Least-squares ``a + b*N^c`` after dropping the ``discard_smallest`` smallest N.

    Starting points come from a log-log regression of ``y - min(y) + eps`` and
    from a scan over ``c`` with ``a, b`` solved linearly; each is refined by
    Levenberg-Marquardt and the best one kept. A (numerically) constant
    ``ys`` gives a degenerate fit with ``b = 0`` and ``c = nan``.
    """
    order = np.argsort(np.asarray(xs, dtype=float), kind="stable")
    x = np.asarray(xs, dtype=float)[order][discard_smallest:]
    y = np.asarray(ys, dtype=float)[order][discard_smallest:]
    keep = np.isfinite(y)
    x, y = x[keep], y[keep]
    if x.size < 4 or np.unique(x).size < 3:
        raise RankDeficient(f"power-law fit needs at least 4 points after discarding, got {x.size}")
    scale = max(np.max(np.abs(y)), 1e-300)
    if np.ptp(y) <= 1e-10 * scale:
        return PowerLawFit(float(np.mean(y)), 0.0, float("nan"), None, int(x.size), 0.0, degenerate=True)

    starts = []
    eps = 1e-3 * np.ptp(y)
    for sgn in (1.0, -1.0):
        z = sgn * (y - (y.min() if sgn > 0 else y.max())) + eps
        c0, lb = np.polyfit(np.log(x), np.log(z), 1)
        starts.append(np.array([y.min() if sgn > 0 else y.max(), sgn * np.exp(lb), c0]))
    cs = np.linspace(-4.0, 4.0, 161)
    cs = cs[np.abs(cs) > 1e-9]
    best = min(cs, key=lambda c: _vp_residual(x, y, c)[1])
    (a0, b0), _ = _vp_residual(x, y, best)
    starts.append(np.array([a0, b0, best]))

    def resid(p):
        with np.errstate(over="ignore", invalid="ignore"):
            return p[0] + p[1] * x ** p[2] - y

    results = []
    for p0 in starts:
        try:
            sol = optimize.least_squares(resid, p0, method="lm", xtol=1e-14, ftol=1e-15, gtol=1e-15, max_nfev=4000)
        except ValueError:
            continue
        if np.all(np.isfinite(sol.x)):
            results.append((float(np.sum(sol.fun**2)), sol))
    if not results:
        raise NoConvergence("power-law fit did not converge")
    ssr, sol = min(results, key=lambda r: r[0])
    cov = None
    dof = x.size - 3
    try:
        jtj_inv = np.linalg.inv(sol.jac.T @ sol.jac)
        cov = (jtj_inv * (ssr / dof if dof > 0 else np.nan)).tolist()
    except np.linalg.LinAlgError:
        pass
    a, b, c = (float(v) for v in sol.x)
    return PowerLawFit(a, b, c, cov, int(x.size), ssr)


@dataclass
class VariantSummary:
    """Averaged traces and derived scalars of one frame at one size."""

    grid: TimeGrid
    count: int
    traces: dict[str, np.ndarray]
    errors: dict[str, np.ndarray]
    populations: np.ndarray | None
    scalars: dict[str, Any]
    per_realization: dict[str, list[float]]
    otoc: np.ndarray | None = None
    otoc_se: np.ndarray | None = None
    lyapunov: dict[str, Any] | None = None


@dataclass
class SizeSummary:
    N: int
    count: int
    seeds: list[int]
    bandwidth_mean: float
    bandwidth_se: float
    variants: dict[str, VariantSummary]
    commutators: dict[str, list[float]] | None = None
    failures: list[str] = field(default_factory=list)


@dataclass
class EnsembleSummary:
    config: EnsembleConfig
    sizes: dict[int, SizeSummary]
    fits: dict[str, Any]

    def scalar_table(self, variant: str) -> list[dict[str, Any]]:
        rows = []
        for N, s in sorted(self.sizes.items()):
            if variant not in s.variants:
                continue
            row = {"N": N, "realizations": s.count, "bandwidth": s.bandwidth_mean, "bandwidth_se": s.bandwidth_se}
            row.update(s.variants[variant].scalars)
            rows.append(row)
        return rows


def _lyapunov_dict(fit) -> dict[str, Any]:
    return {
        "a": fit.a,
        "b": fit.b,
        "lambda_fit": fit.lambda_fit,
        "fit_points": fit.fit_points,
        "residual": fit.residual,
        "t_start": fit.t_window[0],
        "t_end": fit.t_window[1],
    }


def _summarise_variant(N: int, v: str, recs: list[dict], grid: TimeGrid, cfg: EnsembleConfig) -> VariantSummary:
    traces, errors, scalars, per = {}, {}, {}, {}
    pops = None
    if cfg.energy:
        for name in ChargingResult.TRACE_FIELDS:
            traces[name], errors[name] = mean_se(np.stack([r[name] for r in recs]))
        pops, _ = mean_se(np.stack([r["populations"] for r in recs]))
        # power of the averaged energy, not average of powers
        t = grid.times
        traces["power"] = np.where(t > 0, traces["energy"] / np.where(t > 0, t, 1.0), 0.0)
        traces["normalized_energy"] = traces["energy"] / (N * cfg.omega0)
        errors["normalized_energy"] = errors["energy"] / (N * cfg.omega0)
        traces["hellinger_of_mean"] = hellinger_to_binomial(pops / pops.sum(axis=1, keepdims=True), N)
        traces["energy_from_populations"] = energy_from_populations(pops, cfg.omega0)
        per["tau_star"] = [float(r["tau_star"]) for r in recs]
        per["p_star"] = [float(r["p_star"]) for r in recs]
        try:
            ts, ps = optimal_charging(ObservableTrace("power", grid, traces["power"]))
        except MaxAtBoundary:
            ts, ps = float("nan"), float("nan")
        scalars["tau_star"] = ts
        scalars["p_star"] = ps
        tau_m, tau_se = mean_se(np.array(per["tau_star"]))
        scalars["tau_star_realization_mean"] = float(tau_m)
        scalars["tau_star_realization_se"] = float(tau_se)
        for key in ("energy", "normalized_energy", "t_qsl", "t_rqsl", "power_lower", "power_upper",
                    "var_h0", "var_h0_local", "var_h0_entangled", "var_h1", "dev_h1"):
            scalars[f"{key}_at_tau_star"] = _interp(grid, traces[key], ts)
        scalars["normalized_energy_final"] = float(traces["normalized_energy"][-1])
        if np.isfinite(ts):
            p_at = np.array([np.interp(ts, grid.times, pops[:, k]) for k in range(pops.shape[1])])
            scalars["hellinger_at_tau_star"] = float(hellinger_to_binomial(p_at / p_at.sum(), N))
        else:
            scalars["hellinger_at_tau_star"] = float("nan")
        scalars["hellinger_final"] = float(traces["hellinger_of_mean"][-1])
        for tq in cfg.hellinger_times:
            p_at = np.array([np.interp(tq, grid.times, pops[:, k]) for k in range(pops.shape[1])])
            scalars[f"hellinger_at_{tq:g}"] = float(hellinger_to_binomial(p_at / p_at.sum(), N))
    summary = VariantSummary(grid, len(recs), traces, errors, pops, scalars, per)
    if "otoc" in recs[0]:
        summary.otoc, summary.otoc_se = mean_se(np.stack([r["otoc"] for r in recs]))
        ts = scalars.get("tau_star", float("nan"))
        scalars["otoc_at_tau_star"] = _interp(grid, summary.otoc, ts)
        try:
            if cfg.fit_mode == "averaged":
                fit = fit_lyapunov(OtocTrace(grid, summary.otoc, N, v), cfg.F0, cfg.F1)
                summary.lyapunov = _lyapunov_dict(fit)
            else:
                lams = []
                for r in recs:
                    try:
                        lams.append(fit_lyapunov(OtocTrace(grid, r["otoc"], N, v), cfg.F0, cfg.F1).lambda_fit)
                    except SykBatteryError:
                        lams.append(float("nan"))
                m, se = mean_se(np.array(lams))
                summary.lyapunov = {"lambda_fit": float(m), "lambda_fit_se": float(se), "fit_points": None}
            scalars["lambda_fit"] = summary.lyapunov["lambda_fit"]
        except SykBatteryError as exc:
            summary.lyapunov = {"lambda_fit": None, "error": f"{type(exc).__name__}: {exc}"}
            scalars["lambda_fit"] = float("nan")
    return summary


def _fit_or_null(xs, ys, discard) -> dict[str, Any] | None:
    try:
        return asdict(power_law_fit(xs, ys, discard))
    except SykBatteryError as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}


SCALING_KEYS = ("tau_star", "p_star", "var_h0_at_tau_star", "var_h0_local_at_tau_star", "var_h0_entangled_at_tau_star", "var_h1_at_tau_star")


def _global_fits(sizes: dict[int, SizeSummary], cfg: EnsembleConfig) -> dict[str, Any]:
    fits: dict[str, Any] = {}
    Ns = sorted(sizes)
    fits["bandwidth"] = _fit_or_null(Ns, [sizes[n].bandwidth_mean for n in Ns], cfg.discard_smallest)
    for v in cfg.variants:
        sub: dict[str, Any] = {}
        if cfg.energy:
            for key in SCALING_KEYS:
                sub[key] = _fit_or_null(Ns, [sizes[n].variants[v].scalars[key] for n in Ns], cfg.discard_smallest)
        if cfg.otoc:
            pts = [(n, sizes[n].variants[v].scalars.get("lambda_fit", float("nan"))) for n in Ns]
            pts = [(n, lam) for n, lam in pts if lam is not None and np.isfinite(lam)]
            try:
                l0, l1, l2 = lyapunov_expansion(pts)
                sub["lyapunov_expansion"] = {"lambda0": l0, "lambda1": l1, "lambda2": l2}
            except RankDeficient as exc:
                sub["lyapunov_expansion"] = {"error": f"RankDeficient: {exc}"}
            et = {}
            for n, lam in pts:
                try:
                    et[str(n)] = ehrenfest_time(n, lam)
                except SykBatteryError:
                    et[str(n)] = None
            sub["ehrenfest_times"] = et
        fits[v] = sub
    return fits


def run_ensemble(cfg: EnsembleConfig) -> EnsembleSummary:
    """Run every realization of every size and reduce to averaged traces."""
    sizes: dict[int, SizeSummary] = {}
    for N in cfg.N_list:
        R = cfg.count(N)
        seeds = [realization_seed(cfg.base_seed, N, r) for r in range(R)]
        grids: dict[str, TimeGrid] = {}
        if "regularized" in cfg.variants:
            grids["regularized"] = default_grid("regularized", horizon=cfg.horizon, n_steps=cfg.n_steps)
        if "raw" in cfg.variants:
            bws = _pool_map(_bandwidth_task, [(N, cfg.J, s) for s in seeds], cfg.workers)
            grids["raw"] = default_grid("raw", float(np.mean(bws)), cfg.horizon, cfg.n_steps)
        log.info("N=%d: %d realizations", N, R)
        raw = _pool_map(_realization_task, [(N, s, cfg, grids) for s in seeds], cfg.workers)
        failures = [r["error"] for r in raw if "error" in r]
        good = [r for r in raw if "error" not in r]
        if failures:
            if len(failures) >= 0.01 * R:
                raise EnsembleFailure(f"N={N}: {len(failures)}/{R} realizations failed; first: {failures[0]}")
            log.warning("N=%d: dropping %d failed realizations", N, len(failures))
        bw_m, bw_se = mean_se(np.array([r["bandwidth"] for r in good]))
        variants = {v: _summarise_variant(N, v, [r[v] for r in good], grids[v], cfg) for v in cfg.variants}
        comm = None
        if cfg.commutators and N <= cfg.commutators_max_N:
            norms = np.array([r["commutators"] for r in good])
            m, se = mean_se(norms)
            with np.errstate(invalid="ignore"):
                top = np.nanmax(np.where(np.isnan(norms), -np.inf, norms), axis=0)
            comm = {"mean": m.tolist(), "se": se.tolist(), "max": top.tolist(), "overflow": np.isnan(norms).sum(axis=0).tolist()}
        sizes[N] = SizeSummary(N, len(good), [r["seed"] for r in good], float(bw_m), float(bw_se), variants, comm, failures)
    return EnsembleSummary(cfg, sizes, _global_fits(sizes, cfg))


def realization_seeds(cfg: EnsembleConfig) -> dict[int, list[int]]:
    return {N: [realization_seed(cfg.base_seed, N, r) for r in range(cfg.count(N))] for N in cfg.N_list}


def fit_finite(d: dict | None) -> bool:
    return bool(d) and "error" not in d and math.isfinite(d.get("c", float("nan")))

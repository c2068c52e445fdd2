"""Charging protocol and battery-side observables.

The charger is switched on at ``t=0`` and acts alone until ``tau``, so every
trajectory here is generated by the charger Hamiltonian only. Observables that
depend on the charging time ``tau`` are returned as traces over the grid:
entry ``k`` is the value for ``tau = t_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import MaxAtBoundary, NotNormalized, OverlapVanished, ZeroEnergy
from .fermion_ops import battery_ground_state, battery_hamiltonian, populations, y_probabilities, popcount
from .linalg_core import (
    SparseHamiltonian,
    SpectralPropagator,
    TimeGrid,
    cumulative_simpson,
    expm_action_grid,
    extremal_eigenvalues,
    simpson_integrate,
)
from .syk_charger import CouplingTensor, build_syk_hamiltonian, charger_sectors, regularize, sample_couplings

Variant = Literal["raw", "regularized"]
Backend = Literal["expm", "spectral"]

DEFAULT_HORIZON = 16.0
DEFAULT_STEPS = 321


@dataclass(frozen=True)
class ObservableTrace:
    name: str
    grid: TimeGrid
    values: np.ndarray
    units: str = ""

    def __post_init__(self):
        if len(self.values) != self.grid.n_steps:
            raise ValueError(f"{self.name}: {len(self.values)} values for {self.grid.n_steps} grid points")

    @property
    def times(self) -> np.ndarray:
        return self.grid.times


@dataclass(frozen=True)
class ChargingProtocol:
    N: int
    omega0: float = 1.0
    J: float = 1.0
    charger_variant: Variant = "regularized"
    grid: TimeGrid | None = None
    seed: int = 0

    def __post_init__(self):
        if self.grid is not None and self.grid.t0 != 0:
            raise ValueError("charging starts at t=0")
        if self.charger_variant not in ("raw", "regularized"):
            raise ValueError(f"unknown charger variant {self.charger_variant!r}")


@dataclass(frozen=True)
class Charger:
    """The Hamiltonian that generates the charging dynamics in one frame.

    ``ground_energy`` is the lowest eigenvalue of ``matrix`` (zero for the
    regularized variant) and ``bandwidth`` that of the raw SYK operator.
    """

    variant: Variant
    matrix: SparseHamiltonian
    ground_energy: float
    bandwidth: float
    raw_min: float
    couplings: CouplingTensor | None = None
    propagator: SpectralPropagator | None = field(default=None, repr=False)


def default_grid(variant: Variant, bandwidth: float | None = None, horizon: float = DEFAULT_HORIZON, n_steps: int = DEFAULT_STEPS) -> TimeGrid:
    """``[0, 16]`` in rescaled time, or ``[0, 16/bandwidth]`` for the raw charger."""
    if variant == "regularized":
        return TimeGrid(0.0, horizon, n_steps)
    if bandwidth is None:
        raise ValueError("raw-frame default grid needs the charger bandwidth")
    return TimeGrid(0.0, horizon / bandwidth, n_steps)


def build_charger(
    N: int,
    J: float = 1.0,
    seed: int = 0,
    variant: Variant = "regularized",
    *,
    spectral: bool = False,
) -> Charger:
    """Sample a realization and return its charger in the requested frame.

    With ``spectral=True`` the particle-number blocks are fully diagonalised
    and the resulting propagator is attached (and reused for the extremes).
    """
    c = sample_couplings(N, J, seed)
    H1 = build_syk_hamiltonian(c)
    sectors = charger_sectors(N)
    prop = SpectralPropagator.from_hamiltonian(H1, sectors) if spectral else None
    lo, hi = prop.extremes() if prop is not None else extremal_eigenvalues(H1, sectors)
    bw = hi - lo
    if variant == "raw":
        return Charger("raw", H1, lo, bw, lo, c, prop)
    reg = regularize(H1, extremes=(lo, hi))
    return Charger("regularized", reg.matrix, 0.0, bw, lo, c, prop.affine(lo, bw) if prop is not None else None)


def reframe(ch: Charger, variant: Variant) -> Charger:
    """The same realization expressed in the other frame."""
    if variant == ch.variant:
        return ch
    if variant == "regularized":
        m = ch.matrix.affine(ch.raw_min, ch.bandwidth)
        prop = ch.propagator.affine(ch.raw_min, ch.bandwidth) if ch.propagator is not None else None
        return Charger("regularized", m, 0.0, ch.bandwidth, ch.raw_min, ch.couplings, prop)
    m = ch.matrix.affine(-ch.raw_min / ch.bandwidth, 1.0 / ch.bandwidth)
    prop = ch.propagator.affine(-ch.raw_min / ch.bandwidth, 1.0 / ch.bandwidth) if ch.propagator is not None else None
    return Charger("raw", m, ch.raw_min, ch.bandwidth, ch.raw_min, ch.couplings, prop)


def evolve(ch: Charger, psi0: np.ndarray, grid: TimeGrid, backend: Backend = "expm") -> np.ndarray:
    if backend == "spectral":
        if ch.propagator is None:
            raise ValueError("spectral backend needs a charger built with spectral=True")
        return ch.propagator.evolve_grid(psi0, grid)
    # regularized spectrum lies in [0, 1], so any centring leaves norm <= 1
    nb = 1.0 if ch.variant == "regularized" else None
    return expm_action_grid(ch.matrix, psi0, grid, norm_bound=nb)


def charge(protocol: ChargingProtocol, backend: Backend = "expm") -> np.ndarray:
    """Trajectory ``(n_steps, 2**N)`` from the battery ground state."""
    ch = build_charger(protocol.N, protocol.J, protocol.seed, protocol.charger_variant, spectral=backend == "spectral")
    grid = protocol.grid or default_grid(protocol.charger_variant, ch.bandwidth)
    return evolve(ch, battery_ground_state(protocol.N), grid, backend)


# ---------------------------------------------------------------- energy & power


def energy_trace(states: np.ndarray, grid: TimeGrid, N: int, omega0: float = 1.0) -> ObservableTrace:
    """Injected energy ``<psi(t)|H0|psi(t)>`` with the shifted battery."""
    H0 = battery_hamiltonian(N, omega0)
    e = H0.expectation(states)
    return ObservableTrace("energy", grid, np.real(e), "omega0")


def energy_from_populations(pops: np.ndarray, omega0: float = 1.0) -> np.ndarray:
    k = np.arange(pops.shape[-1])
    return pops @ (k * omega0)


def power_trace(energy: ObservableTrace) -> ObservableTrace:
    """``E(tau)/tau`` with the ``tau -> 0`` limit taken as zero."""
    t = energy.times
    p = np.zeros_like(energy.values, dtype=float)
    nz = t > 0
    p[nz] = energy.values[nz] / t[nz]
    return ObservableTrace("power", energy.grid, p, "omega0/time")


def optimal_charging(power: ObservableTrace) -> tuple[float, float]:
    """Time and value of the maximum average power.

    The grid argmax (first one on ties) is refined by the vertex of the
    parabola through it and its two neighbours.
    """
    p = np.asarray(power.values, dtype=float)
    if p.size < 3:
        raise ValueError("need at least 3 samples")
    k = int(np.argmax(p))
    if k == p.size - 1:
        raise MaxAtBoundary("power still rising at the end of the grid; extend the horizon")
    if k == 0:
        raise MaxAtBoundary("power maximum at tau=0")
    t = power.times
    y0, y1, y2 = p[k - 1], p[k], p[k + 1]
    dt = power.grid.dt
    denom = y0 - 2 * y1 + y2
    if denom >= 0:
        return float(t[k]), float(y1)
    off = 0.5 * (y0 - y2) / denom
    return float(t[k] + off * dt), float(y1 - 0.25 * (y0 - y2) * off)


# ---------------------------------------------------------------- populations


def population_trace(states: np.ndarray, N: int) -> np.ndarray:
    """``(n_steps, N+1)`` level occupations."""
    return populations(states, N)


def binomial_distribution(N: int) -> np.ndarray:
    from math import comb

    return np.array([comb(N, k) for k in range(N + 1)], dtype=float) / 2.0**N


def hellinger_to_binomial(p: np.ndarray, N: int) -> np.ndarray | float:
    """Squared Hellinger distance between level occupations and the
    maximally mixed (binomial) distribution. Works row-wise on traces."""
    from math import comb

    p = np.asarray(p, dtype=float)
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-8) or np.any(p < -1e-12):
        raise NotNormalized("populations must be a probability vector")
    binom = np.array([comb(N, k) for k in range(N + 1)], dtype=float)
    h2 = 1.0 - np.sqrt(np.clip(p, 0.0, None) * binom).sum(axis=-1) / 2.0 ** (N / 2)
    h2 = np.clip(h2, 0.0, 1.0)
    return float(h2) if h2.ndim == 0 else h2


# ---------------------------------------------------------------- variances


def moments(H: SparseHamiltonian, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``<H>_t`` and ``<H^2>_t`` along a trajectory."""
    hv = (H.matrix @ states.T).T
    mean = np.real(np.einsum("ti,ti->t", states.conj(), hv))
    sq = np.real(np.einsum("ti,ti->t", hv.conj(), hv))
    return mean, sq


def variance_trace(H: SparseHamiltonian, states: np.ndarray) -> np.ndarray:
    mean, sq = moments(H, states)
    return np.clip(sq - mean**2, 0.0, None)


def _running_average(samples: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """``(1/tau) int_0^tau f`` for each grid tau; the tau=0 entry is ``f(0)``."""
    cum = cumulative_simpson(samples, grid.dt)
    t = grid.times - grid.t0
    out = np.empty_like(cum)
    out[0] = samples[0]
    out[1:] = cum[1:] / t[1:]
    return out


def averaged_moment_trace(H: SparseHamiltonian, states: np.ndarray, grid: TimeGrid, alpha: int) -> np.ndarray:
    if alpha not in (1, 2):
        raise ValueError("alpha must be 1 or 2")
    var = variance_trace(H, states)
    return _running_average(np.sqrt(var) if alpha == 1 else var, grid)


def averaged_moment(H: SparseHamiltonian, states: np.ndarray, grid: TimeGrid, alpha: int) -> float:
    """Time-averaged uncertainty (``alpha=1``) or variance (``alpha=2``) over the grid."""
    if alpha not in (1, 2):
        raise ValueError("alpha must be 1 or 2")
    var = variance_trace(H, states)
    f = np.sqrt(var) if alpha == 1 else var
    return float(simpson_integrate(f, grid.dt) / (grid.t1 - grid.t0))


def battery_variance_terms(states: np.ndarray, N: int, omega0: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Instantaneous local and entangled battery variances along a trajectory.

    Works in the sigma^y eigenbasis where every ``h_j`` is diagonal with
    eigenvalues ``+-omega0/2``.
    """
    prob = y_probabilities(np.atleast_2d(states), N)
    idx = np.arange(2**N, dtype=np.int64)
    z = np.stack([((idx >> (N - j)) & 1) * 2.0 - 1.0 for j in range(1, N + 1)], axis=1)
    m = prob @ z
    corr = np.einsum("ts,si,sj->tij", prob, z, z, optimize=True)
    cov = corr - m[:, :, None] * m[:, None, :]
    local = np.einsum("tii->t", cov)
    ent = cov.sum(axis=(1, 2)) - local
    q = omega0**2 / 4.0
    return q * local, q * ent


def battery_variance_split_trace(states, grid: TimeGrid, N: int, omega0: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    loc, ent = battery_variance_terms(states, N, omega0)
    return _running_average(loc, grid), _running_average(ent, grid)


def battery_variance_split(states, grid: TimeGrid, N: int, omega0: float = 1.0) -> tuple[float, float]:
    """Time-averaged local and entangled parts of the battery variance."""
    loc, ent = battery_variance_terms(states, N, omega0)
    T = grid.t1 - grid.t0
    return float(simpson_integrate(loc, grid.dt) / T), float(simpson_integrate(ent, grid.dt) / T)


def fubini_study_length(states, grid: TimeGrid, H1: SparseHamiltonian) -> float:
    return averaged_moment(H1, states, grid, 1) * (grid.t1 - grid.t0)


# ---------------------------------------------------------------- speed limits


def bures_angle(states: np.ndarray) -> np.ndarray:
    ov = np.abs(states @ states[0].conj())
    return np.arccos(np.clip(ov, 0.0, 1.0))


def qsl_trace(states: np.ndarray, grid: TimeGrid, H1: SparseHamiltonian, ground_energy: float | None = None) -> np.ndarray:
    """``max(L/E, L/dE)`` for every charging time on the grid.

    ``E`` is the time-averaged charger energy measured from its ground level
    and ``dE`` the time-averaged uncertainty.
    """
    if ground_energy is None:
        ground_energy = extremal_eigenvalues(H1)[0]
    mean, sq = moments(H1, states)
    E = _running_average(mean - ground_energy, grid)
    dE = _running_average(np.sqrt(np.clip(sq - mean**2, 0.0, None)), grid)
    L = bures_angle(states)
    out = np.zeros_like(L)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(E > 1e-12, L / E, np.where(L > 0, np.inf, 0.0))
        b = np.where(dE > 1e-12, L / dE, np.where(L > 0, np.inf, 0.0))
    out[:] = np.maximum(a, b)
    out[0] = 0.0
    return out


def qsl_time(states: np.ndarray, grid: TimeGrid, H1: SparseHamiltonian, ground_energy: float | None = None) -> float:
    """Quantum speed limit time for the final grid time."""
    if ground_energy is None:
        ground_energy = extremal_eigenvalues(H1)[0]
    mean, sq = moments(H1, states)
    T = grid.t1 - grid.t0
    E = simpson_integrate(mean - ground_energy, grid.dt) / T
    dE = simpson_integrate(np.sqrt(np.clip(sq - mean**2, 0.0, None)), grid.dt) / T
    if E < 1e-12 and dE < 1e-12:
        raise ZeroEnergy("both mean energy and uncertainty vanish")
    L = bures_angle(states[[0, -1]])[-1]
    cands = [L / x for x in (E, dE) if x >= 1e-12]
    return float(max(cands))


def _overlaps(states: np.ndarray) -> np.ndarray:
    """``<psi(t)|psi(0)>``."""
    return states.conj() @ states[0]


def rqsl_length_trace(states: np.ndarray, grid: TimeGrid, H1: SparseHamiltonian | None = None, method: str = "analytic") -> np.ndarray:
    """Geometric length of the phase-referenced curve up to every grid time.

    ``analytic`` integrates the exact speed
    ``sqrt(var_H + (d arg<psi(t)|psi0>/dt - <H>)^2)`` with Simpson's rule;
    ``chord`` sums ``|chi(t_{k+1}) - chi(t_k)|``. Entries after the overlap
    with the initial state vanishes are NaN.
    """
    g = _overlaps(states)
    ag = np.abs(g)
    bad = ag < 1e-10
    first_bad = int(np.argmax(bad)) if bad.any() else len(g)
    if method == "chord":
        chi = (g / np.where(bad, 1.0, ag))[:, None] * states
        steps = np.linalg.norm(np.diff(chi, axis=0), axis=1)
        ell = np.concatenate([[0.0], np.cumsum(steps)])
    elif method == "analytic":
        if H1 is None:
            raise ValueError("analytic RQSL length needs the charger")
        hv0 = H1.matrix @ states[0]
        gdot = 1j * (states.conj() @ hv0)
        mean, sq = moments(H1, states)
        with np.errstate(divide="ignore", invalid="ignore"):
            phidot = np.imag(gdot / g)
        speed2 = np.clip(sq - mean**2, 0.0, None) + (phidot - mean) ** 2
        speed = np.sqrt(np.where(bad, 0.0, speed2))
        ell = cumulative_simpson(speed, grid.dt)
    else:
        raise ValueError(f"unknown method {method!r}")
    ell = ell.astype(float)
    ell[first_bad:] = np.nan
    return ell


def rqsl_trace(states: np.ndarray, grid: TimeGrid, H1: SparseHamiltonian | None = None, method: str = "analytic") -> np.ndarray:
    """Reverse speed limit ``ell/dE`` for every charging time (NaN where undefined)."""
    ell = rqsl_length_trace(states, grid, H1, method)
    if H1 is None:
        raise ValueError("the energy uncertainty needs the charger")
    dE = averaged_moment_trace(H1, states, grid, 1)
    out = np.zeros_like(ell)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(dE > 1e-14, ell / dE, np.where(np.isnan(ell), np.nan, 0.0))
    out[0] = 0.0
    return out


def rqsl_time(states: np.ndarray, grid: TimeGrid, H1: SparseHamiltonian | None = None, method: str = "analytic") -> float:
    g = np.abs(_overlaps(states))
    if np.any(g < 1e-10):
        raise OverlapVanished("overlap with the initial state vanished; RQSL undefined")
    return float(rqsl_trace(states, grid, H1, method)[-1])


def power_bounds_trace(
    states: np.ndarray,
    grid: TimeGrid,
    H0: SparseHamiltonian,
    H1: SparseHamiltonian,
    energy: np.ndarray,
    t_rqsl: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Lower ``E/T_RQSL`` and upper ``2 sqrt(<var H0> <var H1>)`` power bounds per grid time."""
    if t_rqsl is None:
        t_rqsl = rqsl_trace(states, grid, H1)
    energy = np.asarray(energy, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        lower = np.where(t_rqsl > 0, energy / t_rqsl, 0.0)
    lower[np.isnan(t_rqsl)] = np.nan
    v0 = averaged_moment_trace(H0, states, grid, 2)
    v1 = averaged_moment_trace(H1, states, grid, 2)
    upper = 2.0 * np.sqrt(v0 * v1)
    return lower, upper


def power_bounds(states, grid: TimeGrid, H0: SparseHamiltonian, H1: SparseHamiltonian, energy: float | np.ndarray) -> tuple[float, float]:
    """Bounds at the final grid time. ``energy`` may be the full trace or its last value."""
    e = np.asarray(energy, dtype=float)
    if e.ndim == 0:
        e = np.full(grid.n_steps, np.nan)
        e[-1] = float(energy)
    lower, upper = power_bounds_trace(states, grid, H0, H1, e)
    return float(lower[-1]), float(upper[-1])


# ---------------------------------------------------------------- full protocol


@dataclass
class ChargingResult:
    """Every battery-side trace of one realization, plus derived scalars."""

    grid: TimeGrid
    variant: Variant
    energy: np.ndarray
    power: np.ndarray
    populations: np.ndarray
    hellinger: np.ndarray
    var_h0: np.ndarray
    var_h0_local: np.ndarray
    var_h0_entangled: np.ndarray
    var_h1: np.ndarray
    dev_h1: np.ndarray
    t_qsl: np.ndarray
    t_rqsl: np.ndarray
    power_lower: np.ndarray
    power_upper: np.ndarray
    bandwidth: float
    tau_star: float
    p_star: float
    seed: int = 0

    TRACE_FIELDS = (
        "energy",
        "power",
        "hellinger",
        "var_h0",
        "var_h0_local",
        "var_h0_entangled",
        "var_h1",
        "dev_h1",
        "t_qsl",
        "t_rqsl",
        "power_lower",
        "power_upper",
    )


def analyse_trajectory(states: np.ndarray, grid: TimeGrid, ch: Charger, N: int, omega0: float = 1.0, seed: int = 0) -> ChargingResult:
    """Compute every charging observable for one trajectory."""
    H0 = battery_hamiltonian(N, omega0)
    en = energy_trace(states, grid, N, omega0)
    pw = power_trace(en)
    pops = population_trace(states, N)
    hell = hellinger_to_binomial(pops, N)
    var_h0 = averaged_moment_trace(H0, states, grid, 2)
    loc, ent = battery_variance_split_trace(states, grid, N, omega0)
    var_h1 = averaged_moment_trace(ch.matrix, states, grid, 2)
    dev_h1 = averaged_moment_trace(ch.matrix, states, grid, 1)
    tq = qsl_trace(states, grid, ch.matrix, ch.ground_energy)
    tr = rqsl_trace(states, grid, ch.matrix)
    lower, upper = power_bounds_trace(states, grid, H0, ch.matrix, en.values, tr)
    try:
        ts, ps = optimal_charging(pw)
    except MaxAtBoundary:
        ts, ps = float("nan"), float("nan")
    return ChargingResult(
        grid, ch.variant, en.values, pw.values, pops, np.asarray(hell), var_h0, loc, ent, var_h1, dev_h1, tq, tr, lower, upper,
        ch.bandwidth, ts, ps, seed,
    )


def run_charging(protocol: ChargingProtocol, backend: Backend = "expm") -> ChargingResult:
    ch = build_charger(protocol.N, protocol.J, protocol.seed, protocol.charger_variant, spectral=backend == "spectral")
    grid = protocol.grid or default_grid(protocol.charger_variant, ch.bandwidth)
    states = evolve(ch, battery_ground_state(protocol.N), grid, backend)
    return analyse_trajectory(states, grid, ch, protocol.N, protocol.omega0, protocol.seed)


def occupation_numbers(N: int) -> np.ndarray:
    return popcount(np.arange(2**N, dtype=np.int64))

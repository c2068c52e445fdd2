from __future__ import annotations

import math
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from syk_battery.charging import (
    ChargingProtocol,
    ObservableTrace,
    analyse_trajectory,
    averaged_moment,
    averaged_moment_trace,
    battery_variance_split,
    battery_variance_split_trace,
    binomial_distribution,
    build_charger,
    charge,
    default_grid,
    energy_from_populations,
    energy_trace,
    evolve,
    fubini_study_length,
    hellinger_to_binomial,
    optimal_charging,
    power_bounds,
    power_trace,
    qsl_time,
    qsl_trace,
    reframe,
    rqsl_length_trace,
    rqsl_time,
    rqsl_trace,
    run_charging,
)
from syk_battery.errors import MaxAtBoundary, NotNormalized, OverlapVanished, ZeroEnergy
from syk_battery.fermion_ops import battery_ground_state, battery_hamiltonian, pauli_y, populations
from syk_battery.linalg_core import SpectralPropagator, TimeGrid, dense_evolve_oracle, fidelity, from_csr

SX = np.array([[0, 1], [1, 0]], dtype=complex)


def two_level():
    """``sigma_z/2`` shifted to ground energy zero, started on the equator."""
    H = from_csr(np.diag([1.0, 0.0]))
    psi0 = np.array([1.0, 1.0]) / np.sqrt(2)
    return H, psi0


def exact_two_level(grid):
    H, psi0 = two_level()
    return H, np.stack([dense_evolve_oracle(H, psi0, t) for t in grid.times])


@pytest.fixture(scope="module")
def n6_regularized():
    ch = build_charger(6, seed=5, variant="regularized", spectral=True)
    grid = default_grid("regularized")
    states = evolve(ch, battery_ground_state(6), grid)
    return ch, grid, states


# ---------------------------------------------------------------- charging


def test_charge_starts_in_ground_state_and_conserves_charger_energy():
    N = 5
    proto = ChargingProtocol(N, grid=TimeGrid(0.0, 16.0, 81), seed=3)
    states = charge(proto)
    np.testing.assert_allclose(states[0], battery_ground_state(N), atol=1e-15)
    ch = build_charger(N, seed=3)
    e = np.real(ch.matrix.expectation(states))
    assert np.max(np.abs(e - e[0])) <= 1e-8 * abs(e[0])


def test_charge_matches_dense_oracle():
    N = 4
    grid = TimeGrid(0.0, 2.0, 9)
    states = charge(ChargingProtocol(N, charger_variant="raw", grid=grid, seed=7))
    ch = build_charger(N, seed=7, variant="raw")
    assert fidelity(states[-1], dense_evolve_oracle(ch.matrix, battery_ground_state(N), 2.0)) >= 1 - 1e-9


def test_backends_agree():
    proto = ChargingProtocol(6, grid=TimeGrid(0.0, 16.0, 33), seed=2)
    a, b = charge(proto, "expm"), charge(proto, "spectral")
    assert min(fidelity(x, y) for x, y in zip(a, b)) >= 1 - 1e-10


def test_protocol_validation():
    with pytest.raises(ValueError):
        ChargingProtocol(4, grid=TimeGrid(1.0, 2.0, 3))
    with pytest.raises(ValueError):
        ChargingProtocol(4, charger_variant="centered")


def test_default_grids():
    g = default_grid("regularized")
    assert (g.t0, g.t1, g.n_steps) == (0.0, 16.0, 321)
    g = default_grid("raw", 4.0)
    assert (g.t1, g.n_steps) == (4.0, 321)
    with pytest.raises(ValueError):
        default_grid("raw")


# ---------------------------------------------------------------- energy and power


def test_energy_trace_and_population_consistency():
    N = 4
    grid = TimeGrid(0.0, 1.0, 11)
    states = charge(ChargingProtocol(N, charger_variant="raw", grid=grid, seed=1))
    e = energy_trace(states, grid, N)
    assert e.values[0] == pytest.approx(0.0, abs=1e-10)
    assert np.all(e.values >= -1e-12) and np.all(e.values <= N + 1e-12)
    pops = populations(states, N)
    np.testing.assert_allclose(e.values, energy_from_populations(pops), atol=1e-10)


def test_power_trace_examples():
    grid = TimeGrid(0.0, 4.0, 9)
    zero = power_trace(ObservableTrace("energy", grid, np.zeros(9)))
    np.testing.assert_array_equal(zero.values, 0.0)
    lin = power_trace(ObservableTrace("energy", grid, 2.5 * grid.times))
    assert lin.values[0] == 0.0
    np.testing.assert_allclose(lin.values[1:], 2.5)


def test_optimal_charging_parabola():
    grid = TimeGrid(0.0, 4.0, 41)
    p = ObservableTrace("power", grid, -((grid.times - 2) ** 2) + 4)
    ts, ps = optimal_charging(p)
    assert ts == pytest.approx(2.0, abs=1e-12)
    assert ps == pytest.approx(4.0, abs=1e-12)


def test_optimal_charging_refines_off_grid_vertex():
    grid = TimeGrid(0.0, 4.0, 9)
    p = ObservableTrace("power", grid, -((grid.times - 2.1) ** 2) + 4)
    ts, ps = optimal_charging(p)
    assert ts == pytest.approx(2.1, abs=1e-12) and ps == pytest.approx(4.0, abs=1e-12)


def test_optimal_charging_boundary():
    grid = TimeGrid(0.0, 4.0, 9)
    with pytest.raises(MaxAtBoundary):
        optimal_charging(ObservableTrace("power", grid, grid.times))
    with pytest.raises(MaxAtBoundary):
        optimal_charging(ObservableTrace("power", grid, -grid.times))


def test_averaged_power_has_single_interior_maximum():
    N = 6
    grid = default_grid("regularized")
    E = np.mean([run_charging(ChargingProtocol(N, seed=s, grid=grid), "spectral").energy for s in range(8)], axis=0)
    P = power_trace(ObservableTrace("energy", grid, E)).values
    k = int(np.argmax(P))
    assert 0 < k < grid.n_steps - 1
    assert np.all(np.diff(P[1 : k + 1]) > 0)
    assert 4.0 <= grid.times[k] <= 8.0


# ---------------------------------------------------------------- Hellinger


def test_hellinger_examples():
    for N in (3, 6, 10):
        assert hellinger_to_binomial(binomial_distribution(N), N) == pytest.approx(0.0, abs=1e-12)
    assert hellinger_to_binomial(np.eye(5)[0], 4) == pytest.approx(0.75, abs=1e-15)


def test_hellinger_not_normalized():
    with pytest.raises(NotNormalized):
        hellinger_to_binomial(np.array([0.5, 0.2, 0.2]), 2)
    with pytest.raises(NotNormalized):
        hellinger_to_binomial(np.array([1.5, -0.5, 0.0]), 2)


@settings(max_examples=50, deadline=None)
@given(N=st.integers(1, 12), seed=st.integers(0, 2**32 - 1))
def test_property_hellinger_in_unit_interval(N, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(N + 1))
    h = hellinger_to_binomial(p, N)
    ref = 1 - sum(math.sqrt(p[k] * comb(N, k)) for k in range(N + 1)) / 2 ** (N / 2)
    assert 0 <= h <= 1
    assert h == pytest.approx(ref, abs=1e-12)


# ---------------------------------------------------------------- variances


def test_averaged_moment_zero_in_eigenstate():
    N = 4
    ch = build_charger(N, seed=0, spectral=True)
    idx, w, U = ch.propagator.blocks[2]
    psi = np.zeros(2**N, dtype=complex)
    psi[idx] = U[:, 0]
    grid = TimeGrid(0.0, 5.0, 11)
    states = evolve(ch, psi, grid, "spectral")
    assert averaged_moment(ch.matrix, states, grid, 1) < 1e-7
    assert averaged_moment(ch.matrix, states, grid, 2) < 1e-12
    assert fubini_study_length(states, grid, ch.matrix) < 1e-6


def test_averaged_moment_constant_variance():
    a = 1.7
    H = from_csr(a * SX)
    grid = TimeGrid(0.0, 3.0, 10)
    states = np.tile(np.array([1.0, 0.0], dtype=complex), (10, 1))
    assert averaged_moment(H, states, grid, 2) == pytest.approx(a**2, rel=1e-14)
    assert averaged_moment(H, states, grid, 1) == pytest.approx(a, rel=1e-14)
    with pytest.raises(ValueError):
        averaged_moment(H, states, grid, 3)


def test_averaged_moment_matches_fine_trapezoid(n6_regularized):
    ch, grid, states = n6_regularized
    coarse = averaged_moment(ch.matrix, states, grid, 2)
    fine_grid = TimeGrid(0.0, 16.0, 64001)
    fine = ch.propagator.evolve_grid(battery_ground_state(6), fine_grid)
    H = ch.matrix.matrix
    hv = (H @ fine.T).T
    mean = np.real(np.einsum("ti,ti->t", fine.conj(), hv))
    var = np.real(np.einsum("ti,ti->t", hv.conj(), hv)) - mean**2
    ref = np.trapezoid(var, dx=fine_grid.dt) / 16.0
    assert coarse == pytest.approx(ref, rel=1e-6)


def test_averaged_trace_end_equals_scalar(n6_regularized):
    ch, grid, states = n6_regularized
    tr = averaged_moment_trace(ch.matrix, states, grid, 1)
    assert tr[-1] == pytest.approx(averaged_moment(ch.matrix, states, grid, 1), rel=1e-14)


def test_variance_split_ground_state_is_zero():
    N = 5
    grid = TimeGrid(0.0, 1.0, 5)
    states = np.tile(battery_ground_state(N), (5, 1))
    loc, ent = battery_variance_split(states, grid, N)
    assert abs(loc) < 1e-14 and abs(ent) < 1e-14


def dense_variance_split(psi, N, omega0=1.0):
    h = [0.5 * omega0 * pauli_y(j, N).toarray() for j in range(1, N + 1)]
    ev = [np.real(psi.conj() @ x @ psi) for x in h]
    loc = sum(np.real(psi.conj() @ x @ x @ psi) - m**2 for x, m in zip(h, ev))
    ent = sum(
        np.real(psi.conj() @ h[i] @ h[j] @ psi) - ev[i] * ev[j] for i in range(N) for j in range(N) if i != j
    )
    return loc, ent


def test_variance_split_ghz_dense_oracle():
    N = 4
    down = battery_ground_state(N)
    up = np.conj(down)
    ghz = (down + up) / np.sqrt(2)
    grid = TimeGrid(0.0, 1.0, 3)
    states = np.tile(ghz, (3, 1))
    loc, ent = battery_variance_split(states, grid, N, 1.3)
    ref_loc, ref_ent = dense_variance_split(ghz, N, 1.3)
    assert ent > 0
    assert loc == pytest.approx(ref_loc, abs=1e-12)
    assert ent == pytest.approx(ref_ent, abs=1e-12)


def test_variance_sum_rule(n6_regularized):
    ch, grid, states = n6_regularized
    loc, ent = battery_variance_split(states, grid, 6)
    total = averaged_moment(battery_hamiltonian(6), states, grid, 2)
    assert loc + ent == pytest.approx(total, rel=1e-9)
    lt, et = battery_variance_split_trace(states, grid, 6)
    tt = averaged_moment_trace(battery_hamiltonian(6), states, grid, 2)
    np.testing.assert_allclose(lt + et, tt, rtol=1e-9, atol=1e-12)


def test_variance_split_random_states_dense_oracle():
    N = 3
    rng = np.random.default_rng(4)
    for _ in range(3):
        v = rng.standard_normal(8) + 1j * rng.standard_normal(8)
        v /= np.linalg.norm(v)
        loc, ent = battery_variance_split(np.tile(v, (3, 1)), TimeGrid(0.0, 1.0, 3), N)
        ref = dense_variance_split(v, N)
        assert (loc, ent) == pytest.approx(ref, abs=1e-12)


def test_fubini_study_matches_fine_grid():
    N = 5
    ch = build_charger(N, seed=2, variant="raw", spectral=True)
    psi0 = battery_ground_state(N)
    grid = TimeGrid(0.0, 1.0, 101)
    states = evolve(ch, psi0, grid)
    fine = TimeGrid(0.0, 1.0, 20001)
    fs = ch.propagator.evolve_grid(psi0, fine)
    hv = (ch.matrix.matrix @ fs.T).T
    mean = np.real(np.einsum("ti,ti->t", fs.conj(), hv))
    dev = np.sqrt(np.clip(np.real(np.einsum("ti,ti->t", hv.conj(), hv)) - mean**2, 0, None))
    ref = np.trapezoid(dev, dx=fine.dt)
    assert fubini_study_length(states, grid, ch.matrix) == pytest.approx(ref, rel=1e-6)


# ---------------------------------------------------------------- speed limits


def test_qsl_two_level_saturates():
    grid = TimeGrid(0.0, math.pi, 201)
    H, states = exact_two_level(grid)
    assert qsl_time(states, grid, H, 0.0) == pytest.approx(math.pi, rel=1e-8)


def test_qsl_full_revival_is_zero():
    grid = TimeGrid(0.0, 2 * math.pi, 201)
    H, states = exact_two_level(grid)
    assert qsl_time(states, grid, H, 0.0) == pytest.approx(0.0, abs=1e-6)


def test_qsl_zero_energy():
    grid = TimeGrid(0.0, 1.0, 5)
    H = from_csr(np.diag([0.0, 1.0]))
    states = np.tile(np.array([1.0, 0.0], dtype=complex), (5, 1))
    with pytest.raises(ZeroEnergy):
        qsl_time(states, grid, H, 0.0)


def test_rqsl_stationary_is_zero():
    grid = TimeGrid(0.0, 1.0, 5)
    H = from_csr(np.diag([0.0, 1.0]))
    states = np.tile(np.array([1.0, 0.0], dtype=complex), (5, 1))
    assert rqsl_time(states, grid, H) == 0.0
    assert rqsl_time(states, grid, H, method="chord") == 0.0


def test_rqsl_two_level_bounds_time():
    grid = TimeGrid(0.0, 3.0, 301)
    H, states = exact_two_level(grid)
    t = rqsl_time(states, grid, H)
    assert math.isfinite(t) and t >= 3.0
    # exact: chi moves at speed 1/2 along a geodesic-free path; l(t) = t/2, dE = 1/2
    assert rqsl_length_trace(states, grid, H)[-1] == pytest.approx(1.5, rel=1e-10)


def test_rqsl_overlap_vanishes():
    grid = TimeGrid(0.0, math.pi, 11)
    H, states = exact_two_level(grid)
    with pytest.raises(OverlapVanished):
        rqsl_time(states, grid, H)
    assert np.isnan(rqsl_trace(states, grid, H)[-1])


def test_rqsl_chord_agrees_with_analytic(n6_regularized):
    ch, grid, states = n6_regularized
    a = rqsl_length_trace(states, grid, ch.matrix, "analytic")
    c = rqsl_length_trace(states, grid, ch.matrix, "chord")
    ok = np.isfinite(a)
    np.testing.assert_allclose(c[ok], a[ok], rtol=2e-3, atol=1e-12)
    assert np.all(c[ok] <= a[ok] + 1e-12)


def test_rqsl_halving_step_converges(n6_regularized):
    ch, grid, states = n6_regularized
    fine_grid = TimeGrid(0.0, 16.0, 641)
    fine = evolve(ch, battery_ground_state(6), fine_grid, "spectral")
    for method in ("analytic", "chord"):
        coarse = rqsl_trace(states, grid, ch.matrix, method)[-1]
        refined = rqsl_trace(fine, fine_grid, ch.matrix, method)[-1]
        tol = 1e-4 if method == "analytic" else 1e-3
        assert abs(coarse - refined) / refined < tol


def test_speed_limits_sandwich_every_grid_point(n6_regularized):
    ch, grid, states = n6_regularized
    tq = qsl_trace(states, grid, ch.matrix, ch.ground_energy)
    tr = rqsl_trace(states, grid, ch.matrix)
    t = grid.times
    ok = np.isfinite(tr)
    assert np.all(tq[ok] <= t[ok] + 1e-12)
    assert np.all(t[ok] <= tr[ok] + 1e-12)
    assert tq[-1] == pytest.approx(qsl_time(states, grid, ch.matrix, ch.ground_energy), rel=1e-12)


def test_power_bounds_zero_energy():
    N = 3
    H0 = battery_hamiltonian(N)
    grid = TimeGrid(0.0, 2.0, 9)
    states = np.tile(battery_ground_state(N), (9, 1))
    lower, upper = power_bounds(states, grid, H0, H0, 0.0)
    assert lower == 0.0 and upper >= 0.0


def test_power_bounds_sandwich_at_tau_star(n6_regularized):
    ch, grid, states = n6_regularized
    res = analyse_trajectory(states, grid, ch, 6)
    k = int(np.argmin(np.abs(grid.times - res.tau_star)))
    sub = TimeGrid(0.0, grid.times[k], k + 1)
    lower, upper = power_bounds(states[: k + 1], sub, battery_hamiltonian(6), ch.matrix, res.energy[k])
    P = res.energy[k] / grid.times[k]
    assert lower <= P <= upper
    assert lower == pytest.approx(res.power_lower[k], rel=1e-12)
    assert upper == pytest.approx(res.power_upper[k], rel=1e-12)


def test_upper_bound_grows_with_n():
    grid = TimeGrid(0.0, 5.0, 101)
    ups = []
    for N in (4, 6, 8):
        ups.append(np.mean([run_charging(ChargingProtocol(N, seed=s, grid=grid), "spectral").power_upper[-1] for s in range(4)]))
    assert ups[0] < ups[1] < ups[2]


# ---------------------------------------------------------------- full protocol


def test_analyse_trajectory_invariants(n6_regularized):
    ch, grid, states = n6_regularized
    r = analyse_trajectory(states, grid, ch, 6)
    assert r.energy[0] == pytest.approx(0.0, abs=1e-10)
    assert np.all((r.energy >= -1e-12) & (r.energy <= 6 + 1e-12))
    np.testing.assert_allclose(r.populations.sum(axis=1), 1.0, atol=1e-10)
    assert np.all((r.hellinger >= 0) & (r.hellinger <= 1))
    np.testing.assert_allclose(r.var_h0_local + r.var_h0_entangled, r.var_h0, rtol=1e-9, atol=1e-12)
    t = grid.times
    ok = np.isfinite(r.t_rqsl) & (t > 0)
    assert np.all(r.t_qsl[ok] <= t[ok] + 1e-12) and np.all(t[ok] <= r.t_rqsl[ok] + 1e-12)
    assert np.all(r.power_lower[ok] <= r.power[ok] + 1e-12) and np.all(r.power[ok] <= r.power_upper[ok] + 1e-12)
    assert r.p_star >= r.power.max() - 1e-12


def test_time_rescaling_between_frames():
    N = 6
    reg = build_charger(N, seed=9, variant="regularized", spectral=True)
    raw = reframe(reg, "raw")
    psi0 = battery_ground_state(N)
    g_reg = default_grid("regularized")
    g_raw = default_grid("raw", reg.bandwidth)
    r1 = analyse_trajectory(evolve(reg, psi0, g_reg), g_reg, reg, N)
    r2 = analyse_trajectory(evolve(raw, psi0, g_raw), g_raw, raw, N)
    np.testing.assert_allclose(r1.energy, r2.energy, atol=1e-8)
    assert abs(r2.tau_star * reg.bandwidth - r1.tau_star) <= g_reg.dt
    np.testing.assert_allclose(r2.t_qsl[1:] * reg.bandwidth, r1.t_qsl[1:], rtol=1e-8)
    np.testing.assert_allclose(r2.t_rqsl[1:] * reg.bandwidth, r1.t_rqsl[1:], rtol=1e-8)


def test_reframe_roundtrip():
    ch = build_charger(5, seed=1, variant="raw")
    back = reframe(reframe(ch, "regularized"), "raw")
    assert abs(back.matrix.matrix - ch.matrix.matrix).max() < 1e-12
    assert reframe(ch, "raw") is ch


def test_spectral_charger_uses_sector_extremes():
    a = build_charger(6, seed=3, variant="raw", spectral=True)
    b = build_charger(6, seed=3, variant="raw", spectral=False)
    assert a.ground_energy == pytest.approx(b.ground_energy, rel=1e-12)
    assert a.bandwidth == pytest.approx(b.bandwidth, rel=1e-12)
    assert isinstance(a.propagator, SpectralPropagator) and b.propagator is None

"""Out-of-time-order correlators, Lyapunov fits and nested commutators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy import optimize, sparse
from scipy.sparse import linalg as spla

from .errors import (
    ConvergenceFailure,
    FillInOverflow,
    NoGrowth,
    NonpositiveLambda,
    RankDeficient,
    WindowTooSparse,
)
from .fermion_ops import LadderOperator
from .linalg_core import (
    DENSE_MAX_DIM,
    SparseHamiltonian,
    SpectralPropagator,
    TimeGrid,
    expm_action,
    expm_action_grid,
)

F0_DEFAULT = 0.02
F1_DEFAULT = 0.2


@dataclass(frozen=True)
class OtocTrace:
    grid: TimeGrid
    values: np.ndarray
    N: int
    charger_variant: str = "regularized"


def _op(x):
    if isinstance(x, LadderOperator):
        return x.matrix.matrix
    if isinstance(x, SparseHamiltonian):
        return x.matrix
    return x


def otoc_trace(
    H1: SparseHamiltonian,
    psi0: np.ndarray,
    V: LadderOperator,
    W: LadderOperator,
    grid: TimeGrid,
    *,
    N: int | None = None,
    variant: str = "regularized",
    method: str = "auto",
    propagator: SpectralPropagator | None = None,
) -> OtocTrace:
    """``F(t) = 1 - |<psi0| W(t) V W(t) V |psi0>|^2`` with ``W(t) = e^{iHt} W e^{-iHt}``.

    ``method="spectral"`` batches all times through an eigendecomposition of
    ``H1`` (``propagator`` if given, else a dense one); ``method="expm"`` uses
    two grid evolutions plus two backward evolutions per time point.
    """
    Vm, Wm = _op(V), _op(W)
    psi0 = np.asarray(psi0, dtype=complex)
    if method == "auto":
        method = "spectral" if propagator is not None or H1.dim <= DENSE_MAX_DIM else "expm"
    if method == "spectral":
        P = propagator or SpectralPropagator.from_hamiltonian(H1)
        ph = P.phases(grid.times, -1)
        # |a> = W(t) V psi0
        x = P.from_eigen(ph * P.to_eigen(Vm @ psi0)[:, None])
        a = P.from_eigen(ph.conj() * P.to_eigen(Wm @ x))
        # |b> = V W(t) psi0
        x = P.from_eigen(ph * P.to_eigen(psi0)[:, None])
        b = Vm @ P.from_eigen(ph.conj() * P.to_eigen(Wm @ x))
        corr = np.einsum("it,it->t", b.conj(), a)
    elif method == "expm":
        phi = expm_action_grid(H1, psi0, grid)
        chi = expm_action_grid(H1, Vm @ psi0, grid)
        corr = np.empty(grid.n_steps, dtype=complex)
        for k, t in enumerate(grid.times):
            a = expm_action(H1, Wm @ chi[k], t, sign=1)
            b = Vm @ expm_action(H1, Wm @ phi[k], t, sign=1)
            corr[k] = np.vdot(b, a)
    else:
        raise ValueError(f"unknown method {method!r}")
    F = 1.0 - np.abs(corr) ** 2
    n = N if N is not None else int(np.log2(H1.dim))
    return OtocTrace(grid, F, n, variant)


@dataclass(frozen=True)
class LyapunovFit:
    a: float
    b: float
    lambda_fit: float
    window: tuple[float, float]
    fit_points: int
    residual: float
    t_window: tuple[float, float] = (np.nan, np.nan)


def fit_window(times: np.ndarray, F: np.ndarray, F0: float = F0_DEFAULT, F1: float = F1_DEFAULT) -> np.ndarray:
    """Indices of the first contiguous run with ``F0 <= F <= F1``."""
    inside = (F >= F0) & (F <= F1)
    if not np.any(F >= F0):
        raise NoGrowth(f"OTOC never reaches F0={F0}")
    if not inside.any():
        raise WindowTooSparse("no grid point inside the fit window")
    start = int(np.argmax(inside))
    stop = start
    while stop < len(F) and inside[stop]:
        stop += 1
    return np.arange(start, stop)


def _exp_model(p, t):
    return p[0] + p[1] * np.exp(p[2] * t)


def _linear_ab(t, f, lam):
    A = np.stack([np.ones_like(t), np.exp(lam * t)], axis=1)
    coef, *_ = np.linalg.lstsq(A, f, rcond=None)
    return coef, float(np.sum((A @ coef - f) ** 2))


def fit_exponential(t: np.ndarray, f: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares ``a + b*exp(lam*t)`` on the given samples.

    Starts from a log-linear fit of ``f - min(f)`` and from the best rate of a
    coarse scan with ``a, b`` solved linearly, refining both with
    Levenberg-Marquardt and keeping the smaller residual.
    """
    t = np.asarray(t, dtype=float)
    f = np.asarray(f, dtype=float)
    t0 = t[0]
    ts = t - t0
    starts = []
    shift = f.min() - 0.5 * max(np.min(np.diff(f)) if f.size > 1 else 0.0, 1e-12 * max(1.0, abs(f.min())))
    y = f - shift
    if np.all(y > 0):
        slope, icpt = np.polyfit(ts, np.log(y), 1)
        starts.append(np.array([shift, np.exp(icpt), slope]))
    span = max(ts[-1], 1e-12)
    lams = np.concatenate([-np.geomspace(1e-3, 50, 60)[::-1], np.geomspace(1e-3, 50, 60)]) / span
    best = min(lams, key=lambda lam: _linear_ab(ts, f, lam)[1])
    (a0, b0), _ = _linear_ab(ts, f, best)
    starts.append(np.array([a0, b0, best]))

    results = []
    for p0 in starts:
        try:
            sol = optimize.least_squares(
                lambda p: _exp_model(p, ts) - f, p0, method="lm", xtol=1e-10, ftol=1e-15, gtol=1e-15, max_nfev=200 * 4
            )
        except (ValueError, FloatingPointError):
            continue
        if np.all(np.isfinite(sol.x)):
            results.append((float(np.sum(sol.fun**2)), sol.x))
    if not results:
        raise ConvergenceFailure("exponential fit failed from every start")
    res, p = min(results, key=lambda r: r[0])
    a, b, lam = p
    # undo the time origin shift: b e^{lam (t - t0)} = (b e^{-lam t0}) e^{lam t}
    return np.array([a, b * np.exp(-lam * t0), lam]), res


def fit_lyapunov(trace: OtocTrace, F0: float = F0_DEFAULT, F1: float = F1_DEFAULT, min_points: int = 5) -> LyapunovFit:
    """Fit ``a + b exp(lambda t)`` to the first growth episode inside ``[F0, F1]``."""
    F = np.asarray(trace.values, dtype=float)
    t = trace.grid.times
    idx = fit_window(t, F, F0, F1)
    if idx.size < min_points:
        raise WindowTooSparse(f"only {idx.size} points inside [{F0}, {F1}]; refine the grid")
    p, res = fit_exponential(t[idx], F[idx])
    return LyapunovFit(float(p[0]), float(p[1]), float(p[2]), (F0, F1), int(idx.size), res, (float(t[idx[0]]), float(t[idx[-1]])))


def lyapunov_expansion(points: Sequence[tuple[float, float]]) -> tuple[float, float, float]:
    """Least-squares ``lambda(N) = l0 + l1/N + l2/N^2``."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or len(np.unique(pts[:, 0])) < 3:
        raise RankDeficient("need at least three distinct system sizes")
    x = 1.0 / pts[:, 0]
    A = np.stack([np.ones_like(x), x, x**2], axis=1)
    coef, *_ = np.linalg.lstsq(A, pts[:, 1], rcond=None)
    return float(coef[0]), float(coef[1]), float(coef[2])


def ehrenfest_time(N: float, lam: float) -> float:
    if not lam > 0:
        raise NonpositiveLambda(f"Lyapunov exponent must be positive, got {lam}")
    return float(np.log(N) / lam)


def _norm_of(C, hermitian: bool) -> float:
    """Spectral norm of a normal matrix that is Hermitian or anti-Hermitian."""
    M = C if hermitian else 1j * C
    if sparse.issparse(M):
        if M.nnz == 0:
            return 0.0
        if M.shape[0] <= DENSE_MAX_DIM:
            M = M.toarray()
        else:
            try:
                return float(abs(spla.eigsh(M, k=1, which="LM", tol=1e-10, return_eigenvectors=False)[0]))
            except spla.ArpackNoConvergence as exc:
                raise ConvergenceFailure(str(exc)) from exc
    w = scipy.linalg.eigvalsh(M, check_finite=False)
    return float(max(abs(w[0]), abs(w[-1])))


def nested_commutator_norms(
    H1: SparseHamiltonian,
    W: LadderOperator,
    k_max: int = 6,
    *,
    include_zero: bool = False,
    memory_budget: float = 2e9,
    dense_fraction: float = 0.2,
    on_overflow: str = "raise",
) -> list[float]:
    """Spectral norms of ``[H1, W]_k`` for ``k = 1..k_max`` (and ``k=0`` if asked).

    The nested commutators are built by repeated sparse products and switched
    to dense storage once they fill more than ``dense_fraction`` of the matrix.
    ``FillInOverflow`` is raised when the estimated working set of the next
    product exceeds ``memory_budget`` bytes; with ``on_overflow="nan"`` the
    remaining orders are reported as NaN instead.
    """
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    H = H1.matrix
    dim = H.shape[0]
    C = _op(W).tocsr().astype(complex)
    norms = [_norm_of(C, True)] if include_zero else []
    dense = False
    for k in range(1, k_max + 1):
        try:
            C, dense = _commutator_step(H, C, dense, k, memory_budget, dense_fraction)
        except FillInOverflow:
            if on_overflow != "nan":
                raise
            return norms + [float("nan")] * (k_max - k + 1)
        norms.append(_norm_of(C, hermitian=(k % 2 == 0)))
    return norms


def _commutator_step(H, C, dense: bool, k: int, memory_budget: float, dense_fraction: float):
    dim = H.shape[0]
    work = 4 * 16 * (dim * dim if dense else max(C.nnz, 1) * max(1, H.nnz // dim))
    if work > memory_budget:
        raise FillInOverflow(f"commutator order {k} needs ~{work / 1e9:.1f} GB > budget {memory_budget / 1e9:.1f} GB")
    if dense:
        return np.asarray(H @ C) - np.asarray((H.T @ C.T).T), True
    C = (H @ C - C @ H).tocsr()
    C.eliminate_zeros()
    if C.nnz > dense_fraction * dim * dim:
        if 16 * dim * dim * 4 > memory_budget:
            raise FillInOverflow(f"dense commutator of order {k} at dim {dim} exceeds budget")
        return C.toarray(), True
    return C, False

"""Sparse Hermitian operators, exponential action on states, and quadrature.

States travel through the package as complex ``ndarray`` rows: a single state
has shape ``(dim,)`` and a trajectory sampled on a :class:`TimeGrid` has shape
``(n_steps, dim)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import linalg as spla

from .errors import (
    ConvergenceFailure,
    DimensionMismatch,
    DimensionTooLarge,
    IndexOutOfRange,
    NotHermitian,
    TooFewSamples,
)

DENSE_MAX_DIM = 4096
ZERO_CUTOFF = 1e-15
HERMITIAN_RTOL = 1e-12


@dataclass(frozen=True)
class SparseHamiltonian:
    """CSR matrix over the ``2**N`` computational basis."""

    matrix: sparse.csr_matrix
    hermitian: bool = True

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def expectation(self, states: np.ndarray) -> np.ndarray:
        """``<psi|H|psi>`` for one state or for each row of a trajectory."""
        states = np.asarray(states)
        hv = (self.matrix @ states.T).T
        return np.einsum("...i,...i->...", states.conj(), hv)

    def affine(self, shift: float, scale: float) -> "SparseHamiltonian":
        """Return ``(H - shift*I) / scale``."""
        eye = sparse.identity(self.dim, dtype=complex, format="csr")
        m = ((self.matrix - shift * eye) / scale).tocsr()
        m.eliminate_zeros()
        return SparseHamiltonian(m, self.hermitian)


@dataclass(frozen=True)
class TimeGrid:
    """Equally spaced times with inclusive endpoints."""

    t0: float
    t1: float
    n_steps: int

    def __post_init__(self):
        if not (self.t1 > self.t0 >= 0):
            raise ValueError(f"need t1 > t0 >= 0, got t0={self.t0}, t1={self.t1}")
        if self.n_steps < 2:
            raise ValueError("n_steps must be at least 2")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / (self.n_steps - 1)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.t1, self.n_steps)

    def scaled(self, factor: float) -> "TimeGrid":
        return TimeGrid(self.t0 * factor, self.t1 * factor, self.n_steps)


def _check_hermitian(m: sparse.csr_matrix) -> None:
    if m.nnz == 0:
        return
    diff = abs(m - m.conj().T)
    dev = diff.max() if diff.nnz else 0.0
    scale = abs(m).max()
    if dev > HERMITIAN_RTOL * scale:
        raise NotHermitian(f"max |H - H^dag| = {dev:.3e} exceeds {HERMITIAN_RTOL:g} * {scale:.3e}")


def from_csr(m, hermitian: bool = True, check: bool = True) -> SparseHamiltonian:
    """Wrap any scipy sparse (or dense) matrix, dropping explicit near-zeros."""
    m = sparse.csr_matrix(m, dtype=complex)
    m.sum_duplicates()
    m.data[np.abs(m.data) < ZERO_CUTOFF] = 0
    m.eliminate_zeros()
    if m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"matrix must be square, got {m.shape}")
    if hermitian and check:
        _check_hermitian(m)
    return SparseHamiltonian(m, hermitian)


def assemble(
    triplets: Iterable[tuple[int, int, complex]] | None = None,
    dim: int = 0,
    hermitian: bool = True,
    *,
    rows: Sequence[int] | np.ndarray | None = None,
    cols: Sequence[int] | np.ndarray | None = None,
    values: Sequence[complex] | np.ndarray | None = None,
) -> SparseHamiltonian:
    """Build a :class:`SparseHamiltonian` from (row, col, value) triplets.

    Duplicated coordinates are summed and entries below ``1e-15`` in
    magnitude are dropped. Triplets may be given either as an iterable of
    tuples or, for large operators, as parallel ``rows``/``cols``/``values``
    arrays.
    """
    if dim <= 0 or dim & (dim - 1):
        raise DimensionMismatch(f"dim must be a power of two, got {dim}")
    if triplets is not None:
        trip = list(triplets)
        rows = np.array([t[0] for t in trip], dtype=np.int64)
        cols = np.array([t[1] for t in trip], dtype=np.int64)
        values = np.array([t[2] for t in trip], dtype=complex)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    values = np.asarray(values, dtype=complex)
    if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= dim or cols.max() >= dim):
        raise IndexOutOfRange(f"triplet index outside [0, {dim})")
    m = sparse.coo_matrix((values, (rows, cols)), shape=(dim, dim)).tocsr()
    return from_csr(m, hermitian=hermitian)


def _one_norm(m: sparse.csr_matrix) -> float:
    if m.nnz == 0:
        return 0.0
    return float(np.asarray(abs(m).sum(axis=0)).max())


def _taylor_apply(matrix, v, coef, tol, max_terms):
    """exp(coef * A) v by a truncated Taylor series with a two-term stopping test."""
    out = v.copy()
    term = v
    prev = np.inf
    for k in range(1, max_terms + 1):
        term = (coef / k) * (matrix @ term)
        out += term
        cur = np.linalg.norm(term)
        if cur + prev <= tol * np.linalg.norm(out):
            return out
        prev = cur
    raise ConvergenceFailure(f"Taylor series did not converge in {max_terms} terms (|coef*A| too large)")


@dataclass
class TaylorSettings:
    tol: float = 1e-13
    theta: float = 4.0
    max_terms: int = 80


def _evolve_span(A, mu, psi, span, sign, norm_bound, settings):
    if span == 0:
        return psi.copy()
    s = max(1, math.ceil(abs(span) * norm_bound / settings.theta))
    h = span / s
    coef = sign * 1j * h
    phase = np.exp(coef * mu)
    nrm = np.linalg.norm(psi)
    out = psi
    for _ in range(s):
        out = _taylor_apply(A, out, coef, settings.tol, settings.max_terms) * phase
        out *= nrm / np.linalg.norm(out)
    return out


def expm_action_grid(
    H: SparseHamiltonian,
    psi0: np.ndarray,
    grid: TimeGrid,
    sign: int = -1,
    *,
    norm_bound: float | None = None,
    settings: TaylorSettings | None = None,
) -> np.ndarray:
    """States ``exp(sign * i * H * t_k) psi0`` for every time of ``grid``.

    The spectrum is first centred on ``trace(H)/dim`` (restored afterwards as a
    global phase). Each grid interval is split into the same number of
    substeps, chosen from a 1-norm bound so that every Taylor series runs at
    argument at most ``settings.theta``; states are renormalised after every
    substep.

    Returns
    -------
    ndarray of shape ``(grid.n_steps, dim)``
    """
    if sign not in (-1, 1):
        raise ValueError("sign must be +1 or -1")
    settings = settings or TaylorSettings()
    psi0 = np.asarray(psi0, dtype=complex)
    if psi0.shape != (H.dim,):
        raise DimensionMismatch(f"state of length {psi0.shape} for dim {H.dim}")
    mu = float(np.real(H.matrix.diagonal().sum())) / H.dim
    A = (H.matrix - mu * sparse.identity(H.dim, dtype=complex, format="csr")).tocsr()
    if norm_bound is None:
        norm_bound = _one_norm(A)
    out = np.empty((grid.n_steps, H.dim), dtype=complex)
    cur = _evolve_span(A, mu, psi0, grid.t0, sign, norm_bound, settings)
    out[0] = cur
    for k in range(1, grid.n_steps):
        cur = _evolve_span(A, mu, cur, grid.dt, sign, norm_bound, settings)
        out[k] = cur
    return out


def expm_action(H: SparseHamiltonian, psi: np.ndarray, t: float, sign: int = -1, **kw) -> np.ndarray:
    """Single-time convenience wrapper around :func:`expm_action_grid`."""
    if t == 0:
        return np.asarray(psi, dtype=complex).copy()
    if t < 0:
        t, sign = -t, -sign
    return expm_action_grid(H, psi, TimeGrid(0.0, t, 2), sign, **kw)[-1]


def dense_evolve_oracle(H: SparseHamiltonian, psi0: np.ndarray, t: float, max_dim: int = DENSE_MAX_DIM) -> np.ndarray:
    """Exact ``exp(-iHt) psi0`` through a full Hermitian eigendecomposition."""
    if H.dim > max_dim:
        raise DimensionTooLarge(f"dense oracle limited to dim <= {max_dim}, got {H.dim}")
    w, U = scipy.linalg.eigh(H.toarray())
    c = U.conj().T @ np.asarray(psi0, dtype=complex)
    return U @ (np.exp(-1j * w * t) * c)


def number_sectors(N: int) -> np.ndarray:
    """Occupation count (popcount) of every computational basis index."""
    idx = np.arange(2**N, dtype=np.int64)
    count = np.zeros_like(idx)
    for b in range(N):
        count += (idx >> b) & 1
    return count


def _sector_blocks(dim: int, sectors: np.ndarray | None):
    if sectors is None:
        return [np.arange(dim)]
    sectors = np.asarray(sectors)
    if sectors.shape != (dim,):
        raise DimensionMismatch("sector labels must have one entry per basis state")
    return [np.flatnonzero(sectors == s) for s in np.unique(sectors)]


def _submatrix(H: SparseHamiltonian, idx: np.ndarray) -> np.ndarray:
    return H.matrix[idx][:, idx].toarray()


def extremal_eigenvalues(
    H: SparseHamiltonian,
    sectors: np.ndarray | None = None,
    max_dense_dim: int = DENSE_MAX_DIM,
) -> tuple[float, float]:
    """Smallest and largest eigenvalue of a Hermitian operator.

    ``sectors`` optionally labels a conserved quantity; each block is then
    diagonalised on its own. Blocks above ``max_dense_dim`` fall back to
    Lanczos.
    """
    lo, hi = np.inf, -np.inf
    for idx in _sector_blocks(H.dim, sectors):
        if idx.size <= max_dense_dim:
            w = scipy.linalg.eigvalsh(_submatrix(H, idx))
            lo, hi = min(lo, w[0]), max(hi, w[-1])
            continue
        sub = H.matrix[idx][:, idx]
        try:
            wl = spla.eigsh(sub, k=1, which="SA", tol=1e-12, return_eigenvectors=False)
            wh = spla.eigsh(sub, k=1, which="LA", tol=1e-12, return_eigenvectors=False)
        except spla.ArpackNoConvergence as exc:
            raise ConvergenceFailure(str(exc)) from exc
        lo, hi = min(lo, float(wl[0])), max(hi, float(wh[0]))
    return float(lo), float(hi)


def spectral_norm(H: SparseHamiltonian, sectors: np.ndarray | None = None) -> float:
    """Largest singular value."""
    if H.hermitian:
        lo, hi = extremal_eigenvalues(H, sectors)
        return max(abs(lo), abs(hi))
    if H.dim <= DENSE_MAX_DIM:
        return float(np.linalg.norm(H.toarray(), 2))
    try:
        return float(spla.svds(H.matrix, k=1, return_singular_vectors=False, tol=1e-12)[0])
    except spla.ArpackNoConvergence as exc:
        raise ConvergenceFailure(str(exc)) from exc


def simpson_integrate(samples: Sequence[float] | np.ndarray, dt: float) -> float:
    """Composite Simpson 1/3 rule on equally spaced samples.

    With an even number of samples the last interval is closed with the
    trapezoid rule.
    """
    f = np.asarray(samples)
    n = f.shape[0]
    if n < 3:
        raise TooFewSamples(f"Simpson's rule needs at least 3 samples, got {n}")
    if n % 2 == 0:
        return simpson_integrate(f[:-1], dt) + 0.5 * dt * (f[-2] + f[-1])
    return dt / 3.0 * (f[0] + f[-1] + 4.0 * f[1:-1:2].sum(axis=0) + 2.0 * f[2:-1:2].sum(axis=0))


def cumulative_simpson(samples: Sequence[float] | np.ndarray, dt: float) -> np.ndarray:
    """Integral from the first sample up to every sample.

    Entry ``k`` equals ``simpson_integrate(samples[:k+1], dt)`` for ``k >= 2``;
    entry 1 is a single trapezoid and entry 0 is zero.
    """
    f = np.asarray(samples, dtype=float)
    n = f.shape[0]
    out = np.zeros(n)
    if n < 2:
        return out
    panels = dt / 3.0 * (f[0:-2:2] + 4.0 * f[1:-1:2] + f[2::2])
    out[2::2] = np.cumsum(panels)
    out[1::2] = out[0:-1:2] + 0.5 * dt * (f[0:-1:2] + f[1::2])
    return out


@dataclass
class SpectralPropagator:
    """Exact propagator from a (block-)diagonalised Hermitian operator.

    ``blocks`` holds ``(indices, eigenvalues, eigenvectors)`` per conserved
    sector; eigen-coordinates are the concatenation of the per-block
    coefficients in block order.
    """

    dim: int
    blocks: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(repr=False)

    @classmethod
    def from_hamiltonian(
        cls,
        H: SparseHamiltonian,
        sectors: np.ndarray | None = None,
        max_dim: int = DENSE_MAX_DIM,
    ) -> "SpectralPropagator":
        blocks = []
        for idx in _sector_blocks(H.dim, sectors):
            if idx.size > max_dim:
                raise DimensionTooLarge(f"block of size {idx.size} exceeds {max_dim}")
            w, U = scipy.linalg.eigh(_submatrix(H, idx))
            blocks.append((idx, w, U))
        return cls(H.dim, blocks)

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.concatenate([b[1] for b in self.blocks])

    def extremes(self) -> tuple[float, float]:
        w = self.eigenvalues
        return float(w.min()), float(w.max())

    def affine(self, shift: float, scale: float) -> "SpectralPropagator":
        """Propagator of ``(H - shift) / scale``; eigenvectors are shared."""
        return SpectralPropagator(self.dim, [(i, (w - shift) / scale, U) for i, w, U in self.blocks])

    def to_eigen(self, v: np.ndarray) -> np.ndarray:
        """Coordinates in the eigenbasis; ``v`` is ``(dim,)`` or ``(dim, m)``."""
        return np.concatenate([U.conj().T @ v[idx] for idx, _, U in self.blocks], axis=0)

    def from_eigen(self, c: np.ndarray) -> np.ndarray:
        out = np.empty(c.shape, dtype=complex)
        pos = 0
        for idx, _, U in self.blocks:
            n = idx.size
            out[idx] = U @ c[pos : pos + n]
            pos += n
        return out

    def phases(self, times: np.ndarray, sign: int = -1) -> np.ndarray:
        """``exp(sign*i*w*t)`` with shape ``(dim_eigen, len(times))``."""
        return np.exp(sign * 1j * np.outer(self.eigenvalues, np.asarray(times, dtype=float)))

    def evolve_grid(self, psi0: np.ndarray, grid: TimeGrid, sign: int = -1) -> np.ndarray:
        """Same contract as :func:`expm_action_grid`."""
        c = self.to_eigen(np.asarray(psi0, dtype=complex))
        cols = self.phases(grid.times, sign) * c[:, None]
        return self.from_eigen(cols).T.copy()

    def evolve(self, psi: np.ndarray, t: float, sign: int = -1) -> np.ndarray:
        c = self.to_eigen(np.asarray(psi, dtype=complex))
        return self.from_eigen(np.exp(sign * 1j * self.eigenvalues * t) * c)


def fidelity(a: np.ndarray, b: np.ndarray) -> float:
    """``|<a|b>|^2`` for normalised states."""
    return float(abs(np.vdot(a, b)) ** 2)

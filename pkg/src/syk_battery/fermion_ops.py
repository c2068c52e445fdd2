"""Jordan-Wigner ladder operators and the local sigma^y battery.

Sites are numbered ``1..N`` with site 1 the leftmost tensor factor, i.e. the
most significant bit of a computational basis index. Bit value 1 means the
site is occupied; the annihilator is ``(sigma^x + i sigma^y)/2`` behind a
string of ``sigma^z`` on every site to its left.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Literal

import numpy as np
from scipy import sparse

from .errors import DimensionMismatch, SiteOutOfRange, SizeTooLarge
from .linalg_core import SparseHamiltonian, assemble, from_csr

MAX_SITES = 14

# columns: |down^y>, |up^y>; first amplitude real positive
Y_BASIS = np.array([[1.0, 1.0], [-1.0j, 1.0j]]) / np.sqrt(2.0)


def popcount(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    out = np.zeros_like(x)
    while np.any(x):
        out += x & 1
        x = x >> 1
    return out


def _check_site(site: int, N: int) -> None:
    if not 1 <= site <= N:
        raise SiteOutOfRange(f"site {site} outside [1, {N}]")


def _mask(site: int, N: int) -> int:
    return 1 << (N - site)


def apply_ladder(states: np.ndarray, site: int, N: int, create: bool):
    """Act with ``c_site`` (or its adjoint) on an array of basis indices.

    Returns ``(new_states, valid, sign)``; entries where the operator
    annihilates the state have ``valid`` False.
    """
    m = _mask(site, N)
    occupied = (states & m) != 0
    valid = ~occupied if create else occupied
    left = states >> (N - site + 1)
    sign = 1.0 - 2.0 * (popcount(left) & 1)
    return states ^ m, valid, sign


@dataclass(frozen=True)
class LadderOperator:
    site: int
    kind: Literal["annihilation", "creation", "majorana_sum"]
    matrix: SparseHamiltonian

    @property
    def dim(self) -> int:
        return self.matrix.dim

    def __matmul__(self, other):
        return self.matrix.matrix @ other


def jw_annihilation(site: int, N: int) -> LadderOperator:
    _check_site(site, N)
    states = np.arange(2**N, dtype=np.int64)
    new, valid, sign = apply_ladder(states, site, N, create=False)
    H = assemble(dim=2**N, hermitian=False, rows=new[valid], cols=states[valid], values=sign[valid])
    return LadderOperator(site, "annihilation", H)


def jw_creation(site: int, N: int) -> LadderOperator:
    c = jw_annihilation(site, N)
    return LadderOperator(site, "creation", from_csr(c.matrix.matrix.conj().T, hermitian=False))


def majorana_local(site: int, N: int) -> LadderOperator:
    """``c_site + c_site^dagger``: Hermitian and squares to one."""
    c = jw_annihilation(site, N).matrix.matrix
    return LadderOperator(site, "majorana_sum", from_csr(c + c.conj().T, hermitian=True))


def number_operator(N: int) -> SparseHamiltonian:
    """Total fermion number, diagonal in the computational basis."""
    counts = popcount(np.arange(2**N, dtype=np.int64)).astype(complex)
    return from_csr(sparse.diags(counts, format="csr"))


def pauli_y(site: int, N: int) -> SparseHamiltonian:
    _check_site(site, N)
    states = np.arange(2**N, dtype=np.int64)
    m = _mask(site, N)
    val = np.where(states & m, -1j, 1j)
    return assemble(dim=2**N, rows=states ^ m, cols=states, values=val)


def battery_hamiltonian(N: int, omega0: float = 1.0, shifted: bool = True, max_sites: int = MAX_SITES) -> SparseHamiltonian:
    """``(omega0/2) sum_j sigma^y_j``, plus ``N*omega0/2`` when ``shifted``.

    The shift puts the ground level at zero; the unshifted operator has
    exactly ``N * 2**N`` nonzeros.
    """
    if N < 1:
        raise ValueError("N must be positive")
    if N > max_sites:
        raise SizeTooLarge(f"N={N} exceeds cap {max_sites}")
    dim = 2**N
    states = np.arange(dim, dtype=np.int64)
    rows, cols, vals = [], [], []
    for site in range(1, N + 1):
        m = _mask(site, N)
        rows.append(states ^ m)
        cols.append(states)
        vals.append(np.where(states & m, -0.5j, 0.5j) * omega0)
    if shifted:
        rows.append(states)
        cols.append(states)
        vals.append(np.full(dim, 0.5 * N * omega0, dtype=complex))
    return assemble(dim=dim, rows=np.concatenate(rows), cols=np.concatenate(cols), values=np.concatenate(vals))


@dataclass(frozen=True)
class BatterySpectrum:
    """Shifted levels ``k*omega0`` with binomial multiplicities.

    ``basis_rotation`` is the single-site matrix whose N-fold tensor power
    diagonalises the battery.
    """

    N: int
    omega0: float
    levels: np.ndarray
    multiplicities: np.ndarray
    basis_rotation: np.ndarray


def battery_spectrum(N: int, omega0: float = 1.0) -> BatterySpectrum:
    k = np.arange(N + 1)
    mult = np.array([comb(N, int(j)) for j in k])
    return BatterySpectrum(N, omega0, k * omega0, mult, Y_BASIS.copy())


def battery_ground_state(N: int) -> np.ndarray:
    """Product of ``(1, -i)/sqrt(2)`` on every site."""
    counts = popcount(np.arange(2**N, dtype=np.int64))
    return (-1j) ** counts * 2.0 ** (-N / 2)


def product_state(N: int, up: bool) -> np.ndarray:
    """All sites down (``up=False``) or up along y."""
    if not up:
        return battery_ground_state(N)
    counts = popcount(np.arange(2**N, dtype=np.int64))
    return (1j) ** counts * 2.0 ** (-N / 2)


def to_y_basis(psi: np.ndarray, N: int) -> np.ndarray:
    """Amplitudes in the sigma^y eigenbasis (bit 1 = up along y).

    Accepts a state of shape ``(2**N,)`` or a trajectory ``(T, 2**N)``.
    """
    psi = np.asarray(psi, dtype=complex)
    if psi.shape[-1] != 2**N:
        raise DimensionMismatch(f"state length {psi.shape[-1]} != 2**{N}")
    lead = psi.shape[:-1]
    x = psi.reshape(lead + (2,) * N)
    rot = Y_BASIS.conj().T
    off = len(lead)
    for ax in range(N):
        x = np.moveaxis(np.tensordot(rot, x, axes=([1], [off + ax])), 0, off + ax)
    return x.reshape(psi.shape)


def y_probabilities(psi: np.ndarray, N: int) -> np.ndarray:
    return np.abs(to_y_basis(psi, N)) ** 2


def populations(psi: np.ndarray, N: int) -> np.ndarray:
    """Battery level occupations ``p_0..p_N`` (last axis) for a state or trajectory."""
    prob = y_probabilities(psi, N)
    k = popcount(np.arange(2**N, dtype=np.int64))
    onehot = (k[:, None] == np.arange(N + 1)[None, :]).astype(float)
    return prob @ onehot

"""Complex SYK couplings, the charger Hamiltonian, and bandwidth regularization."""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import NotHermitian, SizeTooSmall, ZeroBandwidth
from .fermion_ops import apply_ladder
from .linalg_core import SparseHamiltonian, assemble, extremal_eigenvalues, number_sectors

Part = Literal["all", "quartic", "hopping", "density"]


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) % 2**64))


def realization_seed(base_seed: int, N: int, index: int) -> int:
    """64-bit seed for realization ``index`` at size ``N`` (SeedSequence hash)."""
    ss = np.random.SeedSequence([int(base_seed) % 2**64, int(N), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class CouplingTensor:
    """One disorder realization.

    ``matrix[P, Q]`` is ``J_{ijkl}`` for the pairs ``P=(i,j)``, ``Q=(k,l)``
    with ``i<j`` and ``k<l`` (0-based, lexicographic). Hermiticity of the
    couplings makes ``matrix`` a Hermitian matrix over pairs.
    """

    N: int
    J: float
    seed: int
    pairs: np.ndarray
    matrix: np.ndarray

    def value(self, i: int, j: int, k: int, l: int) -> complex:
        """``J_ijkl`` for 1-based, arbitrarily ordered indices."""
        if i == j or k == l:
            return 0j
        sign = 1
        if i > j:
            i, j, sign = j, i, -sign
        if k > l:
            k, l, sign = l, k, -sign
        p = self._pair_index(i - 1, j - 1)
        q = self._pair_index(k - 1, l - 1)
        return sign * complex(self.matrix[p, q])

    def _pair_index(self, a: int, b: int) -> int:
        # lexicographic rank of (a, b), a < b
        N = self.N
        return a * (2 * N - a - 1) // 2 + (b - a - 1)

    def to_dict(self) -> dict:
        entries = []
        M = len(self.pairs)
        for p in range(M):
            for q in range(p, M):
                v = self.matrix[p, q]
                i, j = (int(x) + 1 for x in self.pairs[p])
                k, l = (int(x) + 1 for x in self.pairs[q])
                entries.append([i, j, k, l, float(v.real), float(v.imag)])
        return {"N": self.N, "J": self.J, "seed": self.seed, "convention": "i<j, k<l, (i,j)<=(k,l)", "entries": entries}

    @classmethod
    def from_dict(cls, d: dict) -> "CouplingTensor":
        N = int(d["N"])
        pairs = np.array(list(combinations(range(N), 2)), dtype=np.int64)
        M = len(pairs)
        mat = np.zeros((M, M), dtype=complex)
        tmp = cls(N, float(d["J"]), int(d["seed"]), pairs, mat)
        for i, j, k, l, re, im in d["entries"]:
            p, q = tmp._pair_index(i - 1, j - 1), tmp._pair_index(k - 1, l - 1)
            mat[p, q] = re + 1j * im
            mat[q, p] = re - 1j * im
        return tmp

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "CouplingTensor":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sample_couplings(N: int, J: float = 1.0, seed: int = 0) -> CouplingTensor:
    """Circular complex Gaussian couplings with ``E|J_ijkl|^2 = J^2/N^3``.

    Off-diagonal pair entries get independent real and imaginary parts of
    variance ``J^2/(2N^3)``; the pair diagonal (forced real) gets variance
    ``J^2/N^3``.
    """
    if N < 4:
        raise SizeTooSmall(f"complex SYK needs N >= 4, got {N}")
    pairs = np.array(list(combinations(range(N), 2)), dtype=np.int64)
    M = len(pairs)
    var = J**2 / N**3
    rng = make_rng(seed)
    iu = np.triu_indices(M, k=1)
    n_off = iu[0].size
    re = rng.standard_normal(n_off)
    im = rng.standard_normal(n_off)
    diag = rng.standard_normal(M)
    mat = np.zeros((M, M), dtype=complex)
    mat[iu] = (re + 1j * im) * np.sqrt(var / 2)
    mat = mat + mat.conj().T
    mat[np.diag_indices(M)] = diag * np.sqrt(var)
    return CouplingTensor(N, float(J), int(seed), pairs, mat)


def _pair_overlap(pairs: np.ndarray) -> np.ndarray:
    a = pairs[:, None, :, None] == pairs[None, :, None, :]
    return a.sum(axis=(2, 3))


def build_syk_hamiltonian(c: CouplingTensor, part: Part = "all") -> SparseHamiltonian:
    """Sparse ``sum_{ijkl} J_ijkl c_i^+ c_j^+ c_k c_l``.

    Antisymmetry folds the four index orderings of each canonical term into a
    factor 4. ``part`` restricts the sum to pair combinations sharing no index
    (``quartic``), one index (``hopping``) or both (``density``).
    """
    N = c.N
    dim = 2**N
    states = np.arange(dim, dtype=np.int64)
    overlap = _pair_overlap(c.pairs)
    keep = {"all": np.ones_like(overlap, dtype=bool), "quartic": overlap == 0, "hopping": overlap == 1, "density": overlap == 2}[part]
    coeff = 4.0 * np.where(keep, c.matrix, 0.0)

    # destination/sign of c_i^+ c_j^+ on every basis state, per creation pair
    n_pairs = len(c.pairs)
    cre_dst = np.empty((n_pairs, dim), dtype=np.int64)
    cre_ok = np.empty((n_pairs, dim), dtype=bool)
    cre_sign = np.empty((n_pairs, dim))
    for p, (i, j) in enumerate(c.pairs):
        a, ok1, s1 = apply_ladder(states, j + 1, N, create=True)
        b, ok2, s2 = apply_ladder(a, i + 1, N, create=True)
        cre_dst[p], cre_ok[p], cre_sign[p] = b, ok1 & ok2, s1 * s2

    rows, cols, vals = [], [], []
    for q, (k, l) in enumerate(c.pairs):
        a, ok1, s1 = apply_ladder(states, l + 1, N, create=False)
        b, ok2, s2 = apply_ladder(a, k + 1, N, create=False)
        ok = ok1 & ok2
        src, mid, sgn = states[ok], b[ok], (s1 * s2)[ok]
        ps = np.flatnonzero(coeff[:, q])
        if ps.size == 0 or src.size == 0:
            continue
        valid = cre_ok[ps][:, mid]
        rows.append(cre_dst[ps][:, mid][valid])
        cols.append(np.broadcast_to(src, valid.shape)[valid])
        vals.append((coeff[ps, q][:, None] * (cre_sign[ps][:, mid] * sgn[None, :]))[valid])
    if not rows:
        return assemble(dim=dim, rows=[], cols=[], values=[])
    try:
        return assemble(dim=dim, rows=np.concatenate(rows), cols=np.concatenate(cols), values=np.concatenate(vals))
    except NotHermitian as exc:
        raise NotHermitian(f"SYK assembly not Hermitian; coupling symmetries broken: {exc}") from exc


def quartic_nonzero_count(N: int) -> int:
    """Nonzeros of the all-distinct-index part: ``2^(N-4) C(N,2) C(N-2,2)``."""
    from math import comb

    return 2 ** (N - 4) * comb(N, 2) * comb(N - 2, 2)


def bandwidth(H1: SparseHamiltonian, sectors: np.ndarray | None = None) -> float:
    lo, hi = extremal_eigenvalues(H1, sectors)
    return hi - lo


@dataclass(frozen=True)
class RegularizedCharger:
    """``matrix = (H1 - shift) / scale`` with spectrum exactly ``[0, 1]``."""

    matrix: SparseHamiltonian
    shift: float
    scale: float
    bandwidth_original: float


def regularize(
    H1: SparseHamiltonian,
    sectors: np.ndarray | None = None,
    extremes: tuple[float, float] | None = None,
) -> RegularizedCharger:
    """Shift the lowest eigenvalue to zero and divide by the bandwidth.

    ``extremes`` may be passed when already known (e.g. from a spectral
    decomposition) to skip the eigenvalue computation.
    """
    lo, hi = extremes if extremes is not None else extremal_eigenvalues(H1, sectors)
    bw = hi - lo
    if not bw > 1e-12 * max(1.0, abs(hi), abs(lo)):
        raise ZeroBandwidth("charger spectrum is degenerate")
    return RegularizedCharger(H1.affine(lo, bw), lo, bw, bw)


def charger_sectors(N: int) -> np.ndarray:
    """Particle-number labels; the complex SYK charger is block diagonal in them."""
    return number_sectors(N)

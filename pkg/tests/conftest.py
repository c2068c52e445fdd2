from __future__ import annotations

from functools import reduce
from itertools import product

import numpy as np

I2 = np.eye(2)
SZ = np.diag([1.0, -1.0])
LOWER = np.array([[0, 1], [0, 0]], dtype=complex)


def dense_annihilation(site: int, N: int) -> np.ndarray:
    """Left Jordan-Wigner string from explicit Kronecker products (bit 1 = occupied)."""
    return reduce(np.kron, [SZ] * (site - 1) + [LOWER] + [I2] * (N - site))


def dense_syk(c) -> np.ndarray:
    """Brute-force sum over every index quadruple of J_ijkl c+_i c+_j c_k c_l."""
    N = c.N
    a = [dense_annihilation(s, N) for s in range(1, N + 1)]
    ad = [x.conj().T for x in a]
    H = np.zeros((2**N, 2**N), dtype=complex)
    for i, j, k, l in product(range(1, N + 1), repeat=4):
        v = c.value(i, j, k, l)
        if v != 0:
            H += v * ad[i - 1] @ ad[j - 1] @ a[k - 1] @ a[l - 1]
    return H

"""Liouville (superoperator) picture of states, channels and Choi matrices.

Conventions, used by every other module:

* ``vectorize`` stacks columns, so ``vec(X)[i + d*j] = X[i, j]``.
* ``liouville_of_unitary(u) = kron(conj(u), u)``, hence
  ``devectorize(L @ vectorize(rho)) == u @ rho @ u^dag``.
* A superoperator ``S`` maps ``vec(X_in)`` to ``vec(X_out)``; its Choi matrix
  orders the bipartition as (output, input):
  ``C[(a, i), (b, j)] = S[a + d_out*b, i + d_in*j]``.

Random sampling uses ``numpy.random.Generator`` (PCG64 via ``default_rng``).
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.linalg

from .tensors import ContractViolation, ShapeError, hermitian_eig

PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SWAP = np.eye(4)[[0, 2, 1, 3]].astype(complex)
H_SWAP = np.kron(PAULI_X, PAULI_X) + np.kron(PAULI_Y, PAULI_Y) + np.kron(PAULI_Z, PAULI_Z)


def _isqrt(n: int) -> int:
    r = int(round(np.sqrt(n)))
    if r * r != n:
        raise ShapeError(f"{n} is not a perfect square")
    return r


def vectorize(rho) -> np.ndarray:
    m = np.asarray(rho)
    if m.ndim != 2:
        raise ShapeError(f"vectorize expects a matrix, got shape {m.shape}")
    return m.T.reshape(-1).astype(complex)


def devectorize(v, d: int | None = None) -> np.ndarray:
    v = np.asarray(v).reshape(-1)
    if d is None:
        d = _isqrt(v.size)
    if v.size != d * d:
        raise ShapeError(f"vector of length {v.size} does not fit a {d}x{d} matrix")
    return v.reshape(d, d).T.copy()


def check_unitary(u, tol: float = 1e-10) -> np.ndarray:
    u = np.asarray(u, dtype=complex)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise ShapeError(f"unitary must be square, got {u.shape}")
    dev = np.max(np.abs(u.conj().T @ u - np.eye(u.shape[0])))
    if dev > tol:
        raise ContractViolation(f"matrix is not unitary: max |u^dag u - I| = {dev:.3e}")
    return u


def check_density_matrix(rho, tol: float = 1e-10) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ShapeError(f"density matrix must be square, got {rho.shape}")
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > tol:
        raise ContractViolation(f"density matrix not Hermitian ({herm:.3e})")
    w = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    if w.min() < -tol:
        raise ContractViolation(f"density matrix not PSD (min eigenvalue {w.min():.3e})")
    if abs(np.trace(rho) - 1) > tol:
        raise ContractViolation(f"density matrix trace {np.trace(rho).real:.12g} != 1")
    return rho


def liouville_of_unitary(u, check: bool = True) -> np.ndarray:
    u = check_unitary(u) if check else np.asarray(u, dtype=complex)
    return np.kron(u.conj(), u)


def superop_of_kraus(kraus: Sequence[np.ndarray]) -> np.ndarray:
    return sum(np.kron(np.conj(k), k) for k in kraus)


def choi_of_superop(S) -> np.ndarray:
    S = np.asarray(S, dtype=complex)
    d_out, d_in = _isqrt(S.shape[0]), _isqrt(S.shape[1])
    S4 = S.reshape(d_out, d_out, d_in, d_in)  # [b, a, j, i]
    return S4.transpose(1, 3, 0, 2).reshape(d_out * d_in, d_out * d_in)


def superop_of_choi(C, d_out: int, d_in: int) -> np.ndarray:
    C = np.asarray(C, dtype=complex)
    if C.shape != (d_out * d_in, d_out * d_in):
        raise ShapeError(f"Choi of shape {C.shape} does not match dims ({d_out}, {d_in})")
    C4 = C.reshape(d_out, d_in, d_out, d_in)  # [a, i, b, j]
    return C4.transpose(2, 0, 3, 1).reshape(d_out * d_out, d_in * d_in)


def partial_trace(m, dims: Sequence[int], keep: Sequence[int] | int) -> np.ndarray:
    """Trace out every subsystem not listed in ``keep`` (kron order of ``dims``)."""
    m = np.asarray(m)
    dims = list(dims)
    n = len(dims)
    total = int(np.prod(dims))
    if m.shape != (total, total):
        raise ShapeError(f"dims {dims} do not factorize a matrix of shape {m.shape}")
    keep = sorted({keep} if isinstance(keep, (int, np.integer)) else set(keep))
    t = m.reshape(dims + dims)
    letters = [chr(97 + i) for i in range(2 * n)]
    rows, cols = letters[:n], letters[n:]
    for i in range(n):
        if i not in keep:
            cols[i] = rows[i]
    out = [rows[i] for i in keep] + [cols[i] for i in keep]
    subs = "".join(rows) + "".join(cols) + "->" + "".join(out)
    dk = int(np.prod([dims[i] for i in keep])) if keep else 1
    return np.einsum(subs, t).reshape(dk, dk)


def partial_transpose(m, dims: Sequence[int], part: Sequence[int] | int) -> np.ndarray:
    m = np.asarray(m)
    dims = list(dims)
    n = len(dims)
    total = int(np.prod(dims))
    if m.shape != (total, total):
        raise ShapeError(f"dims {dims} do not factorize a matrix of shape {m.shape}")
    part = {part} if isinstance(part, (int, np.integer)) else set(part)
    perm = list(range(2 * n))
    for i in part:
        perm[i], perm[n + i] = n + i, i
    return m.reshape(dims + dims).transpose(perm).reshape(total, total)


def von_neumann_entropy(rho, base: float | None = None, clip: float = 1e-9) -> float:
    """-sum l log l over the spectrum; natural log unless ``base`` is given.

    Eigenvalues above ``-clip`` are clipped to zero; anything below -1e-6 is
    a contract violation.  No trace normalization is applied.
    """
    w, _ = hermitian_eig(rho, tol_herm=1e-8)
    if w.min() < -1e-6:
        raise ContractViolation(f"entropy of a non-PSD matrix (min eigenvalue {w.min():.3e})")
    w = w[w > clip]
    s = float(-np.sum(w * np.log(w)))
    return s / np.log(base) if base else s


# -- random sampling ---------------------------------------------------------------------------

def ginibre(rows: int, cols: int, rng: np.random.Generator, variance: float = 1.0) -> np.ndarray:
    """Complex Gaussian matrix with E|g_ij|^2 = variance."""
    scale = np.sqrt(variance / 2)
    return scale * (rng.normal(size=(rows, cols)) + 1j * rng.normal(size=(rows, cols)))


def haar_unitary(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(ginibre(d, d, rng))
    ph = np.diag(r) / np.abs(np.diag(r))
    return q * ph


def haar_isometry(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    return haar_unitary(rows, rng)[:, :cols]


def random_density_matrix(d: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Hilbert-Schmidt (induced Ginibre) random state."""
    g = ginibre(d, rank or d, rng)
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def random_kraus(d_in: int, d_out: int, rank: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Kraus operators of a random channel via a Haar Stinespring isometry."""
    v = haar_isometry(d_out * rank, d_in, rng).reshape(rank, d_out, d_in)
    return [v[k] for k in range(rank)]


def random_cptp(d: int, rng: np.random.Generator, rank: int = 2) -> np.ndarray:
    return superop_of_kraus(random_kraus(d, d, rank, rng))


def gue_hamiltonian(d: int, rng: np.random.Generator, variance: float = 1.0) -> np.ndarray:
    """H = (G + G^dag)/2 with G complex Ginibre, E|G_ij|^2 = variance.

    With this normalization E[tr H^2] = variance * d^2 / 2.
    """
    g = ginibre(d, d, rng, variance)
    return 0.5 * (g + g.conj().T)


def interp_hamiltonian(
    beta: float, a: int, rng: np.random.Generator, gue_variance: float = 1.0
) -> np.ndarray:
    """Two-qubit Hamiltonian interpolating a SWAP power (beta=0) and a GUE draw (beta=1).

    At beta=0, exp(-iH) equals SWAP^(a/3) up to a global phase.  Since
    H_SWAP = 2*SWAP - 1, this fixes the prefactor to a*pi/12.
    """
    if a not in (1, 2):
        raise ValueError(f"a must be 1 or 2, got {a}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    h = (1 - beta) * (a * np.pi / 12) * H_SWAP
    if beta > 0:
        h = h + beta * gue_hamiltonian(4, rng, gue_variance)
    return h


def unitary_of_hamiltonian(h) -> np.ndarray:
    return scipy.linalg.expm(-1j * np.asarray(h))


def proportional_up_to_phase(a, b, tol: float = 1e-10) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    k = np.unravel_index(np.argmax(np.abs(b)), b.shape)
    if abs(a[k]) < tol:
        return False
    phase = a[k] / b[k]
    return abs(abs(phase) - 1) < tol and np.max(np.abs(a - phase * b)) < tol


# -- channel checks ----------------------------------------------------------------------------

def choi_min_eig(C) -> float:
    C = np.asarray(C)
    return float(np.linalg.eigvalsh(0.5 * (C + C.conj().T)).min())


def tp_residual(S) -> float:
    """max |<<1| S - <<1|| for a superoperator (trace preservation)."""
    S = np.asarray(S)
    d_in, d_out = _isqrt(S.shape[1]), _isqrt(S.shape[0])
    one_out = vectorize(np.eye(d_out))
    one_in = vectorize(np.eye(d_in))
    return float(np.max(np.abs(one_out @ S - one_in)))


def is_cptp(S, tol: float = 1e-9) -> bool:
    return choi_min_eig(choi_of_superop(S)) >= -tol and tp_residual(S) <= tol


# -- leg-split Liouville tensors -----------------------------------------------------------------

def split_legs(S, dims_out: Sequence[int], dims_in: Sequence[int] | None = None) -> np.ndarray:
    """Reshape a composite-space superoperator (or vector) into per-factor Liouville legs.

    For ``S`` acting on a kron product with factor dims ``d_1..d_n`` the
    result has axes ``(out_1..out_n, in_1..in_n)``, each of size ``d_l**2``
    and each following the column-stacking convention of its own factor.
    A 1-D input (a vectorized operator) yields axes ``(leg_1..leg_n)``.
    """
    S = np.asarray(S)
    dims_out = list(dims_out)
    n = len(dims_out)
    if S.ndim == 1:
        t = S.reshape(dims_out + dims_out)  # (c_1..c_n, r_1..r_n)
        perm = [x for l in range(n) for x in (l, n + l)]
        return t.transpose(perm).reshape([d * d for d in dims_out])
    dims_in = list(dims_in if dims_in is not None else dims_out)
    m = len(dims_in)
    t = S.reshape(dims_out + dims_out + dims_in + dims_in)
    perm = [x for l in range(n) for x in (l, n + l)]
    perm += [2 * n + x for l in range(m) for x in (l, m + l)]
    return t.transpose(perm).reshape([d * d for d in dims_out] + [d * d for d in dims_in])


def leg_choi(t, n_legs: int | None = None) -> np.ndarray:
    """Choi matrix of a Liouville tensor: each leg splits into (ket, bra)."""
    t = np.asarray(t)
    n = t.ndim if n_legs is None else n_legs
    dims = [_isqrt(x) for x in t.shape]
    split = t.reshape([x for d in dims for x in (d, d)])  # per leg (bra, ket)
    kets = [2 * l + 1 for l in range(n)]
    bras = [2 * l for l in range(n)]
    D = int(np.prod(dims))
    return split.transpose(kets + bras).reshape(D, D)


def choi_to_legs(C, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`leg_choi` for legs with Hilbert dims ``dims``."""
    dims = list(dims)
    n = len(dims)
    t = np.asarray(C).reshape(dims + dims)  # kets then bras
    perm = [x for l in range(n) for x in (n + l, l)]
    return t.transpose(perm).reshape([d * d for d in dims])

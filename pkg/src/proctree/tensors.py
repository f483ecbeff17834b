"""Dense complex tensor algebra.

Entries of a :class:`DenseTensor` are stored row-major over the declared
shape; this order is part of the serialization format.  The kernels here
are thin wrappers over numpy/LAPACK with explicit pre/post-condition checks.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised on incompatible tensor dimensions."""


class ContractViolation(ValueError):
    """Raised when an input breaks a documented precondition."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver fails; carries the best residual reached."""

    def __init__(self, message: str, best_residual: float = float("nan")):
        super().__init__(message)
        self.best_residual = best_residual


@dataclass(frozen=True)
class DenseTensor:
    """Multi-index complex array with row-major linearization."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.complex128)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(n <= 0 for n in arr.shape):
            raise ShapeError(f"all dimensions must be positive, got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rank(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def permute(self, perm: Sequence[int]) -> "DenseTensor":
        return permute(self, perm)

    def reshape(self, new_shape: Sequence[int]) -> "DenseTensor":
        return reshape(self, new_shape)

    def to_bytes(self) -> bytes:
        header = struct.pack("<Q", self.rank) + struct.pack(f"<{self.rank}Q", *self.shape)
        return header + self.data.astype("<c16").tobytes(order="C")

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DenseTensor":
        (rank,) = struct.unpack_from("<Q", blob, 0)
        shape = struct.unpack_from(f"<{rank}Q", blob, 8)
        offset = 8 + 8 * rank
        n = int(np.prod(shape)) if rank else 1
        expected = offset + 16 * n
        if len(blob) != expected:
            raise ShapeError(f"payload holds {len(blob)} bytes, header implies {expected}")
        data = np.frombuffer(blob, dtype="<c16", count=n, offset=offset)
        return cls(data.reshape(shape).astype(np.complex128))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DenseTensor":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(frozen=True)
class MatrixView:
    """A tensor read as a matrix: the first ``n_row_axes`` axes index rows."""

    tensor: DenseTensor
    n_row_axes: int

    @property
    def rows(self) -> int:
        return int(np.prod(self.tensor.shape[: self.n_row_axes], dtype=int))

    @property
    def cols(self) -> int:
        return int(np.prod(self.tensor.shape[self.n_row_axes:], dtype=int))

    @property
    def matrix(self) -> np.ndarray:
        return self.tensor.data.reshape(self.rows, self.cols)


def as_matrix(m) -> np.ndarray:
    """Accept a MatrixView, a rank-2 DenseTensor or an array-like."""
    if isinstance(m, MatrixView):
        return m.matrix
    if isinstance(m, DenseTensor):
        if m.rank != 2:
            raise ShapeError(f"DenseTensor of rank {m.rank} needs an explicit MatrixView")
        return m.data
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {arr.shape}")
    return arr


def _data(t) -> np.ndarray:
    return t.data if isinstance(t, DenseTensor) else np.asarray(t, dtype=np.complex128)


def contract(a, b, pairs: Sequence[tuple[int, int]]) -> DenseTensor:
    """Sum over paired axes; the result keeps a's free axes then b's."""
    A, B = _data(a), _data(b)
    axes_a = [p[0] for p in pairs]
    axes_b = [p[1] for p in pairs]
    if len(set(axes_a)) != len(axes_a) or len(set(axes_b)) != len(axes_b):
        raise ShapeError(f"an axis appears twice in {list(pairs)}")
    for i, j in pairs:
        if not (0 <= i < A.ndim and 0 <= j < B.ndim):
            raise ShapeError(f"axis pair ({i}, {j}) out of range for ranks {A.ndim}, {B.ndim}")
        if A.shape[i] != B.shape[j]:
            raise ShapeError(
                f"dimension mismatch: axis {i} of a has {A.shape[i]}, axis {j} of b has {B.shape[j]}"
            )
    out = np.tensordot(A, B, axes=(axes_a, axes_b))
    return DenseTensor(out)


def permute(a, perm: Sequence[int]) -> DenseTensor:
    A = _data(a)
    perm = list(perm)
    if sorted(perm) != list(range(A.ndim)):
        raise ShapeError(f"{perm} is not a permutation of {A.ndim} axes")
    return DenseTensor(np.transpose(A, perm))


def reshape(a, new_shape: Sequence[int]) -> DenseTensor:
    A = _data(a)
    new_shape = tuple(int(n) for n in new_shape)
    if int(np.prod(new_shape, dtype=int)) != A.size:
        raise ShapeError(f"cannot reshape {A.size} entries into {new_shape}")
    return DenseTensor(A.reshape(new_shape))


def hermitian_eig(m, tol_herm: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and unitary eigenvector columns of a Hermitian matrix."""
    M = as_matrix(m)
    if M.shape[0] != M.shape[1]:
        raise ShapeError(f"hermitian_eig needs a square matrix, got {M.shape}")
    dev = np.max(np.abs(M - M.conj().T)) if M.size else 0.0
    if dev > tol_herm:
        raise ContractViolation(f"matrix is not Hermitian: max |m - m^dag| = {dev:.3e}")
    H = 0.5 * (M + M.conj().T)
    w, v = np.linalg.eigh(H)
    return w[::-1].copy(), v[:, ::-1].copy()


def singular_values(m) -> np.ndarray:
    """Singular values in descending order; their sum is the trace norm."""
    return np.linalg.svd(as_matrix(m), compute_uv=False)


def _order(vals: np.ndarray, tol: float) -> np.ndarray:
    """Indices sorting by magnitude (descending), ties broken by phase angle."""
    mags = np.abs(vals)
    scale = max(float(mags.max()) if mags.size else 0.0, 1e-300)
    keys = np.round(mags / (scale * max(tol, 1e-14)))
    return np.lexsort((np.angle(vals), -keys))


def _check_gap(vals: np.ndarray, tol: float, residual: float) -> None:
    if vals.size >= 2 and abs(abs(vals[1]) - abs(vals[0])) <= tol * max(abs(vals[0]), 1e-300):
        raise ConvergenceError(
            f"degenerate leading magnitude |l1|={abs(vals[0]):.12g}, |l2|={abs(vals[1]):.12g}",
            best_residual=residual,
        )


def _dense_leading(M: np.ndarray, count: int, tol: float):
    w, v = np.linalg.eig(M)
    idx = _order(w, tol)
    w, v = w[idx], v[:, idx]
    v = v / np.linalg.norm(v, axis=0)
    return w, v


def leading_eigs(
    m,
    count: int = 1,
    tol: float = 1e-10,
    max_iter: int = 20000,
    method: str = "auto",
    seed: int = 0,
) -> list[tuple[complex, np.ndarray]]:
    """Largest-magnitude eigenpairs of a (possibly non-normal) square matrix.

    ``method`` is ``"iterative"`` (block power iteration with Rayleigh-Ritz
    extraction and locking of converged pairs), ``"dense"`` (full eigensolve,
    allowed up to 64x64) or ``"auto"`` (iterative, falling back to dense for
    small matrices).  A tie |l1| == |l2| is reported as non-convergence.
    """
    M = as_matrix(m).astype(np.complex128)
    n = M.shape[0]
    if M.shape != (n, n):
        raise ShapeError(f"leading_eigs needs a square matrix, got {M.shape}")
    if not 1 <= count <= 4:
        raise ValueError("count must be between 1 and 4")
    count = min(count, n)
    norm = np.linalg.norm(M, 2) if n else 0.0
    if norm == 0.0:
        raise ConvergenceError("zero matrix has no dominant eigenvector", 0.0)
    thresh = tol * norm

    if method == "dense":
        if n > 64:
            raise ValueError("dense eigensolve is limited to matrices up to 64x64")
        w, v = _dense_leading(M, count, tol)
        res = float(np.max(np.linalg.norm(M @ v[:, :count] - v[:, :count] * w[:count], axis=0)))
        _check_gap(w, tol, res)
        return [(complex(w[i]), v[:, i]) for i in range(count)]
    if method not in ("auto", "iterative"):
        raise ValueError(f"unknown method {method!r}")

    # one extra Ritz pair beyond `count` resolves the gap check; guard vectors speed convergence
    p = min(n, count + 1 + 4)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(n, p)) + 1j * rng.normal(size=(n, p)))
    best = np.inf
    want = min(count + 1, n)
    for it in range(max_iter):
        Q, _ = np.linalg.qr(M @ Q)
        if it % 5 and it != max_iter - 1:
            continue
        Hs = Q.conj().T @ M @ Q
        theta, Y = np.linalg.eig(Hs)
        idx = _order(theta, tol)
        theta, Y = theta[idx], Y[:, idx]
        X = Q @ Y
        X = X / np.linalg.norm(X, axis=0)
        res = np.linalg.norm(M @ X[:, :want] - X[:, :want] * theta[:want], axis=0)
        worst = float(np.max(res[:count]))
        best = min(best, worst)
        if worst <= thresh and (want == count or res[count] <= max(thresh, 1e-6 * norm)):
            _check_gap(theta, tol, worst)
            return [(complex(theta[i]), X[:, i]) for i in range(count)]
    if method == "auto" and n <= 64:
        w, v = _dense_leading(M, count, tol)
        res = float(np.max(np.linalg.norm(M @ v[:, :count] - v[:, :count] * w[:count], axis=0)))
        _check_gap(w, tol, res)
        if res <= thresh:
            return [(complex(w[i]), v[:, i]) for i in range(count)]
        best = min(best, res)
    raise ConvergenceError(
        f"leading_eigs did not converge in {max_iter} iterations (best residual {best:.3e})", best
    )

"""Process tensors as Liouville-leg tensors / Choi states.

A k-slot process is stored as a tensor with 2k legs, each of size d**2,
ordered ``(i_k, o_{k-1}, i_{k-1}, ..., i_1, o_0)``.  Slot ``t`` (0-based, in
time order) is the leg pair ``(i_{t+1}, o_t)``: ``o_t`` is what the process
emits into the intervention and ``i_{t+1}`` is what the intervention hands
back.  An instrument acting at a slot is its Liouville matrix ``S[out, in]``,
which lines up with the slot pair as ``(i_{t+1}, o_t)``.

The Choi matrix is obtained by splitting each leg into (ket, bra); the
expectation value of instruments is then ``tr[Upsilon A^T]``, which in leg
form is a plain full contraction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import liouville as lv
from .tensors import ContractViolation, DenseTensor, ShapeError

# a dense k-slot qubit process has 4**(2k) entries; k <= 6 keeps it under 2**24
MAX_DENSE_ENTRIES = 4 ** 12


class GuardError(ValueError):
    """Raised when a dense construction would exceed the size guard."""


def dense_guard(d: int, k: int) -> None:
    if (d * d) ** (2 * k) > MAX_DENSE_ENTRIES:
        raise GuardError(
            f"dense {k}-slot process with d={d} needs {(d * d) ** (2 * k)} entries "
            f"(limit {MAX_DENSE_ENTRIES})"
        )


def slot_axes(k: int, t: int) -> tuple[int, int]:
    """Axes (i_{t+1}, o_t) of slot t in a k-slot process tensor."""
    if not 0 <= t < k:
        raise IndexError(f"slot {t} out of range for a {k}-slot process")
    base = 2 * (k - 1 - t)
    return base, base + 1


def leg_labels(k: int) -> list[str]:
    labels = []
    for j in range(k, 0, -1):
        labels += [f"i{j}", f"o{j - 1}"]
    return labels


def vec_identity(d: int) -> np.ndarray:
    return lv.vectorize(np.eye(d))


@dataclass(frozen=True)
class Instrument:
    """A slot operation given by its Liouville matrix ``S[out, in]`` (d**2 x d**2)."""

    liouville: np.ndarray
    label: str = ""

    @property
    def d(self) -> int:
        return lv._isqrt(self.liouville.shape[0])

    @property
    def choi(self) -> np.ndarray:
        return lv.choi_of_superop(self.liouville)

    @classmethod
    def from_choi(cls, C, d: int, label: str = "") -> "Instrument":
        return cls(lv.superop_of_choi(C, d, d), label)

    @classmethod
    def identity(cls, d: int) -> "Instrument":
        return cls(np.eye(d * d, dtype=complex), "identity")

    @classmethod
    def unitary(cls, u, label: str = "unitary") -> "Instrument":
        return cls(lv.liouville_of_unitary(u), label)

    @classmethod
    def kraus(cls, ops, label: str = "kraus") -> "Instrument":
        return cls(lv.superop_of_kraus(ops), label)

    @classmethod
    def measure_prepare(cls, observable, state, label: str = "measure-prepare") -> "Instrument":
        """X -> tr(observable X) * state: a causal break with a fixed preparation."""
        m = np.asarray(observable, dtype=complex)
        s = np.asarray(state, dtype=complex)
        return cls(np.outer(lv.vectorize(s), lv.vectorize(m.T)), label)

    def is_valid(self, tol: float = 1e-9) -> bool:
        """CP and trace non-increasing."""
        C = self.choi
        if lv.choi_min_eig(C) < -tol:
            return False
        d = self.d
        tin = lv.partial_trace(C, [d, d], keep=[1])
        return float(np.linalg.eigvalsh(np.eye(d) - 0.5 * (tin + tin.conj().T)).min()) >= -tol


def identity_supermap(d: int) -> Instrument:
    return Instrument.identity(d)


def _as_liouville(A, d: int) -> np.ndarray:
    m = A.liouville if isinstance(A, Instrument) else np.asarray(A, dtype=complex)
    if m.shape != (d * d, d * d):
        raise ShapeError(f"instrument of shape {m.shape} does not act on slot dimension {d}")
    return m


@dataclass(frozen=True)
class ProcessTensor:
    k: int
    d: int
    data: np.ndarray
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=complex)
        expected = (self.d * self.d,) * (2 * self.k)
        if arr.shape != expected:
            raise ShapeError(f"process data of shape {arr.shape}, expected {expected}")
        object.__setattr__(self, "data", arr)

    @property
    def labels(self) -> list[str]:
        return leg_labels(self.k)

    @property
    def choi(self) -> np.ndarray:
        return lv.leg_choi(self.data)

    def trace(self) -> complex:
        return full_trace(self.data, self.d)

    def tensor(self) -> DenseTensor:
        return DenseTensor(self.data)

    def save(self, stem) -> None:
        """Write ``<stem>.bin`` (tensor format) and ``<stem>.json`` (sidecar)."""
        DenseTensor(self.data).save(f"{stem}.bin")
        meta = {"k": self.k, "d": self.d, "legs": self.labels, "provenance": self.provenance}
        with open(f"{stem}.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, stem) -> "ProcessTensor":
        with open(f"{stem}.json") as fh:
            meta = json.load(fh)
        t = DenseTensor.load(f"{stem}.bin")
        return cls(meta["k"], meta["d"], t.data, meta.get("provenance", {}))


def full_trace(data: np.ndarray, d: int) -> complex:
    one = vec_identity(d)
    out = data
    for _ in range(data.ndim):
        out = np.tensordot(out, one, axes=([0], [0]))
    return complex(out)


def prepare_process(rho) -> ProcessTensor:
    """Single-slot process: emit ``rho``, trace whatever comes back."""
    rho = lv.check_density_matrix(rho, tol=1e-9)
    d = rho.shape[0]
    data = np.multiply.outer(vec_identity(d), lv.vectorize(rho))
    return ProcessTensor(1, d, data, {"construction": "prepare"})


def process_from_maps(maps: Sequence[np.ndarray], rho_se, d_s: int, d_e: int,
                      provenance: dict | None = None) -> ProcessTensor:
    """Dense process from system-environment superoperators between slots."""
    k = len(maps) + 1
    dense_guard(d_s, k)
    rho_se = np.asarray(rho_se, dtype=complex)
    if rho_se.shape != (d_s * d_e, d_s * d_e):
        raise ShapeError(f"rho_SE of shape {rho_se.shape} does not match d_S*d_E = {d_s * d_e}")
    T = lv.split_legs(lv.vectorize(rho_se), [d_s, d_e])  # [o_0, e]
    for L in maps:
        L = np.asarray(L, dtype=complex)
        if L.shape != ((d_s * d_e) ** 2,) * 2:
            raise ShapeError(f"map of shape {L.shape} does not act on d_S*d_E = {d_s * d_e}")
        U = lv.split_legs(L, [d_s, d_e])  # [s_out, e_out, s_in, e_in]
        T = np.tensordot(U, T, axes=([3], [T.ndim - 1]))  # [so, eo, si, ...]
        T = np.moveaxis(T, 1, -1)
    T = np.tensordot(T, vec_identity(d_e), axes=([T.ndim - 1], [0]))
    data = np.multiply.outer(vec_identity(d_s), T)
    return ProcessTensor(k, d_s, data, dict(provenance or {"construction": "maps"}))


def process_from_circuit(unitaries: Sequence[np.ndarray], rho_se, d_s: int, d_e: int) -> ProcessTensor:
    maps = [lv.liouville_of_unitary(u) for u in unitaries]
    return process_from_maps(maps, rho_se, d_s, d_e, {"construction": "circuit"})


def _check_cptp(L, tol: float = 1e-9) -> None:
    if not lv.is_cptp(L, tol):
        raise ContractViolation("map is not CPTP")


def mpo_process(channel, rho_se, d_s: int, d_e: int, k: int) -> ProcessTensor:
    """Translation-invariant process from repeating one CPTP map on SE."""
    _check_cptp(channel)
    p = process_from_maps([channel] * (k - 1), rho_se, d_s, d_e)
    return ProcessTensor(p.k, p.d, p.data, {"construction": "mpo"})


@dataclass
class CausalityReport:
    residuals: list[float]
    final_residual: float
    trace: complex
    tol: float

    @property
    def passed(self) -> bool:
        return all(r <= self.tol for r in self.residuals) and self.final_residual <= self.tol

    @property
    def max_residual(self) -> float:
        return max(self.residuals + [self.final_residual])


def check_causality(p: ProcessTensor, tol: float = 1e-8) -> CausalityReport:
    """Peel the causal chain from the latest leg down to the initial state.

    The first level checks that ``i_k`` factors out as an identity; every
    following level traces the latest output and checks that the freed input
    factors out as an identity.  The last number is |tr rho_0 - 1|.
    """
    d = p.d
    one = vec_identity(d)
    residuals = []
    cur = p.data  # leading leg is an input
    while True:
        reduced = np.tensordot(one / d, cur, axes=([0], [0]))
        residuals.append(float(np.max(np.abs(cur - np.multiply.outer(one, reduced)))))
        if reduced.ndim == 1:
            break
        cur = np.tensordot(one, reduced, axes=([0], [0]))  # trace latest output
    final = abs(complex(one @ reduced) - 1.0)
    return CausalityReport(residuals, final, p.trace(), tol)


def is_psd(p: ProcessTensor, tol: float = 1e-8) -> bool:
    return lv.choi_min_eig(p.choi) >= -tol


def apply_instruments(p: ProcessTensor, assignment: Mapping[int, object] | None = None,
                      default_identity: bool = True) -> complex:
    """<<Upsilon|A>> = tr[Upsilon A^T] for one instrument per slot."""
    assignment = dict(assignment or {})
    for t in assignment:
        if not 0 <= t < p.k:
            raise IndexError(f"slot {t} out of range for a {p.k}-slot process")
    out = p.data
    # contract from the latest slot (leading axes) to the earliest
    for t in range(p.k - 1, -1, -1):
        if t in assignment:
            A = _as_liouville(assignment[t], p.d)
        elif default_identity:
            A = np.eye(p.d * p.d)
        else:
            raise KeyError(f"slot {t} has no instrument")
        out = np.tensordot(A, out, axes=([0, 1], [0, 1]))
    return complex(out)


def marginal(p: ProcessTensor, keep_slots: Sequence[int], fill=None) -> np.ndarray:
    """Reduced tensor on the kept slots with ``fill`` (identity by default) elsewhere.

    The result keeps the process leg order restricted to the kept slots, i.e.
    for slots a < b it has legs ``(i_{b+1}, o_b, i_{a+1}, o_a)``.  Contracting
    the fill into the other slots is the same as assembling the Choi from the
    matrix-unit operator basis on the kept legs, one entry per basis pair.
    """
    keep = sorted(set(keep_slots))
    for t in keep:
        if not 0 <= t < p.k:
            raise IndexError(f"slot {t} out of range for a {p.k}-slot process")
    F = np.eye(p.d * p.d) if fill is None else _as_liouville(fill, p.d)
    out = p.data
    ax = 0
    for t in range(p.k - 1, -1, -1):
        if t in keep:
            ax += 2
        else:
            out = np.tensordot(F, out, axes=([0, 1], [ax, ax + 1]))
    return out


def mpo_marginal(channel, rho_se, d_s: int, d_e: int, k: int, keep_slots: Sequence[int],
                 fill=None) -> np.ndarray:
    """Reduced tensor of a repeated-channel process without building it densely.

    Streams the system-environment state through the chain, leaving the kept
    slots open; cost is linear in ``k``.  Leg order matches :func:`marginal`.
    """
    keep = set(keep_slots)
    for t in keep:
        if not 0 <= t < k:
            raise IndexError(f"slot {t} out of range for a {k}-slot process")
    L = lv.split_legs(np.asarray(channel, dtype=complex), [d_s, d_e])  # [so, eo, si, ei]
    F = np.eye(d_s * d_s) if fill is None else _as_liouville(fill, d_s)
    one_s, one_e = vec_identity(d_s), vec_identity(d_e)
    v = lv.split_legs(lv.vectorize(rho_se), [d_s, d_e])  # [s, e, open...]
    for t in range(k - 1):
        if t in keep:
            # the emitted system stays open as o_t, the map's system input opens as i_{t+1}
            v = np.tensordot(L, v, axes=([3], [1]))  # [so, eo, i_{t+1}, o_t, open...]
        else:
            v = np.tensordot(F, v, axes=([1], [0]))
            v = np.tensordot(L, v, axes=([2, 3], [0, 1]))
    if k - 1 in keep:
        v = np.moveaxis(np.multiply.outer(one_s, v), 2, 0)  # [e, i_k, o_{k-1}, open...]
    else:
        v = np.tensordot(F, v, axes=([1], [0]))
        v = np.tensordot(one_s, v, axes=([0], [0]))  # [e, open...]
    return np.tensordot(one_e, v, axes=([0], [0]))

"""Process trees built from one-to-two-slot bricks.

Leg conventions
---------------
A brick is a six-leg tensor ``W[i_c, o_c, i_f, o_f, i_fb, o_fb]``, every leg
of size ``D**2`` (column-stacked Liouville index).  ``(i_c, o_c)`` is the coarse
slot it replaces, ``fb`` ("f-bar") is the earlier fine slot and ``f`` the later
one.  Filling both fine slots with instruments (Liouville matrices ``A[out, in]``
read as ``A[i, o]``) gives the coarse instrument

    A_c[i_c, o_c] = sum W[i_c, o_c, i_f, o_f, i_fb, o_fb] A_f[i_f, o_f] A_fb[i_fb, o_fb]

Inside a brick, the coarse system wire C enters from ``o_c`` and leaves into
``i_c``.  A fresh wire N starts in ``rho`` and carries both fine slots, then is
traced: Lambda_3 on C(x)N, N out to ``o_fb`` and back from ``i_fb``,
Lambda_2 on C(x)N, N out to ``o_f`` and back from ``i_f``, Lambda_1 on C(x)N.
Composite superoperators use the kron order (C, N).

Tree slots at scale s are numbered 0..2**s - 1 in time order.  The brick
``(s, j)`` fine-grains slot j of scale s-1 into slots 2j (earlier) and 2j+1
(later) of scale s, so the binary digits of a finest slot, read from the least
significant end, say which child it is at each scale (1 = later).
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import liouville as lv
from . import process as pr
from .tensors import ConvergenceError, ContractViolation, DenseTensor, ShapeError, leading_eigs

HOMOGENEITY = ("generic", "th", "sth")

# contraction-count instrumentation: incremented once per brick move
MOVE_COUNTS: Counter = Counter()


def reset_move_counts() -> None:
    MOVE_COUNTS.clear()


def cup(d: int) -> np.ndarray:
    """The do-nothing instrument ``A[i, o]`` (Liouville identity)."""
    return np.eye(d * d, dtype=complex)


# -- brick assembly ------------------------------------------------------------------------------

def assemble_brick(lam1, lam2, lam3, rho, d: int) -> np.ndarray:
    """Six-leg brick from three superoperators on C(x)N and the initial state of N.

    No validity checks are done here; see :class:`YBrick` for the checked version.
    """
    dd = d * d
    maps = []
    for L in (lam1, lam2, lam3):
        L = np.asarray(L, dtype=complex)
        if L.shape != (dd * dd, dd * dd):
            raise ShapeError(f"brick map of shape {L.shape} does not act on two wires of dim {d}")
        maps.append(lv.split_legs(L, [d, d]))  # [C_out, N_out, C_in, N_in]
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (d, d):
        raise ShapeError(f"brick state of shape {rho.shape}, expected ({d}, {d})")
    one = pr.vec_identity(d)
    L1, L2, L3 = maps
    # L1[X,a,c,F]: a traced N, c mid coarse, F = i_f.  L2[c,G,e,H]: G = o_f, H = i_fb.
    # L3[e,I,B,n]: I = o_fb, B = o_c, n = N initial.
    t1 = np.tensordot(one, L1, axes=([0], [1]))                  # [x, c, f]
    t3 = np.tensordot(L3, lv.vectorize(rho), axes=([3], [0]))   # [e, I, B]
    t12 = np.tensordot(t1, L2, axes=([1], [0]))                 # [x, f, g, e, h]
    w = np.tensordot(t12, t3, axes=([3], [0]))                  # [x, f, g, h, I, B]
    return w.transpose(0, 5, 1, 2, 3, 4)


class _Brick:
    """Shared cached views: the six-leg tensor and the two transfer matrices."""

    d: int

    @cached_property
    def tensor(self) -> np.ndarray:
        raise NotImplementedError

    @cached_property
    def left_matrix(self) -> np.ndarray:
        """Acts on ``A.ravel()`` placed at the earlier fine slot, with the later one idle."""
        dd = self.d * self.d
        return np.einsum("abcdef,cd->abef", self.tensor, cup(self.d)).reshape(dd * dd, dd * dd)

    @cached_property
    def right_matrix(self) -> np.ndarray:
        """Acts on ``A.ravel()`` placed at the later fine slot, with the earlier one idle."""
        dd = self.d * self.d
        return np.einsum("abcdef,ef->abcd", self.tensor, cup(self.d)).reshape(dd * dd, dd * dd)


@dataclass(frozen=True, eq=False)
class YBrick(_Brick):
    """General brick: three CPTP maps on C(x)N and the initial state of N."""

    maps: tuple
    rho: np.ndarray
    d: int

    def __post_init__(self):
        if len(self.maps) != 3:
            raise ShapeError(f"a Y brick needs three maps, got {len(self.maps)}")
        for n, L in enumerate(self.maps, start=1):
            if np.asarray(L).shape != ((self.d ** 2) ** 2,) * 2:
                raise ShapeError(f"map {n} has shape {np.asarray(L).shape}, expected two wires of dim {self.d}")
            if not lv.is_cptp(L, 1e-9):
                raise ContractViolation(f"map {n} is not CPTP")
        lv.check_density_matrix(self.rho, tol=1e-9)

    @cached_property
    def tensor(self) -> np.ndarray:
        return assemble_brick(*self.maps, self.rho, self.d)


@dataclass(frozen=True, eq=False)
class WBrick(_Brick):
    """Unitary brick with maps (U2, U2^dag U1, U1^dag); the product is the identity."""

    u1: np.ndarray
    u2: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        u1 = lv.check_unitary(self.u1)
        u2 = lv.check_unitary(self.u2)
        if u1.shape != u2.shape:
            raise ShapeError(f"U1 {u1.shape} and U2 {u2.shape} differ in shape")
        d = lv._isqrt(u1.shape[0])
        if np.asarray(self.rho).shape != (d, d):
            raise ShapeError(f"rho of shape {np.asarray(self.rho).shape} does not match wire dim {d}")
        lv.check_density_matrix(self.rho, tol=1e-9)

    @classmethod
    def trusted(cls, u1, u2, rho) -> "WBrick":
        """Skip validation, for inputs that are unitary and a state by construction."""
        b = object.__new__(cls)
        for name, v in (("u1", u1), ("u2", u2), ("rho", rho)):
            object.__setattr__(b, name, v)
        return b

    @property
    def d(self) -> int:
        return lv._isqrt(np.asarray(self.u1).shape[0])

    @property
    def maps(self) -> tuple:
        u1, u2 = np.asarray(self.u1), np.asarray(self.u2)
        return (lv.liouville_of_unitary(u2, check=False),
                lv.liouville_of_unitary(u2.conj().T @ u1, check=False),
                lv.liouville_of_unitary(u1.conj().T, check=False))

    @cached_property
    def tensor(self) -> np.ndarray:
        return assemble_brick(*self.maps, self.rho, self.d)


@dataclass(frozen=True, eq=False)
class RawBrick(_Brick):
    """A brick known only through its six-leg tensor (loaded, gauged or hand-built)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=complex)
        if arr.ndim != 6 or len(set(arr.shape)) != 1:
            raise ShapeError(f"brick tensor needs six equal legs, got {arr.shape}")
        lv._isqrt(arr.shape[0])
        object.__setattr__(self, "data", arr)

    @property
    def d(self) -> int:
        return lv._isqrt(self.data.shape[0])

    @cached_property
    def tensor(self) -> np.ndarray:
        return self.data


def relaxed_brick(u1, u2, u3, rho) -> YBrick:
    """Unitary Y brick whose three unitaries need not multiply to the identity."""
    us = [lv.check_unitary(u) for u in (u1, u2, u3)]
    d = lv._isqrt(us[0].shape[0])
    return YBrick(tuple(lv.liouville_of_unitary(u) for u in us), np.asarray(rho, dtype=complex), d)


def ybrick_superop(b: YBrick) -> np.ndarray:
    return b.tensor


def wbrick_superop(b: WBrick) -> np.ndarray:
    return b.tensor


def as_brick(b) -> _Brick:
    return b if isinstance(b, _Brick) else RawBrick(np.asarray(b))


def _tensor(b) -> np.ndarray:
    return b.tensor if isinstance(b, _Brick) else np.asarray(b, dtype=complex)


def coarse_grain(brick, later, earlier) -> np.ndarray:
    """Coarse instrument from instruments on the later and earlier fine slots."""
    W = _tensor(brick)
    return np.einsum("abcdef,cd,ef->ab", W, later, earlier, optimize=True)


def _liou(A, d: int) -> np.ndarray:
    return pr._as_liouville(A, d)


# -- brick checks --------------------------------------------------------------------------------

def check_scale_consistency(brick, instrument=None) -> float:
    """max |coarse_grain(A, A) - A| for ``A`` the given instrument (idle instrument by default)."""
    W = _tensor(brick)
    d = lv._isqrt(W.shape[0])
    A = cup(d) if instrument is None else _liou(instrument, d)
    return float(np.max(np.abs(coarse_grain(W, A, A) - A)))


def fine_grain(p: pr.ProcessTensor, slot: int, brick) -> pr.ProcessTensor:
    """Replace slot ``slot`` of ``p`` by the two fine slots of ``brick``."""
    W = _tensor(brick)
    if W.shape[0] != p.d * p.d:
        raise ShapeError(f"brick leg size {W.shape[0]} does not match process slot size {p.d ** 2}")
    pr.dense_guard(p.d, p.k + 1)
    a, b = pr.slot_axes(p.k, slot)
    out = np.tensordot(p.data, W, axes=([a, b], [0, 1]))
    out = np.moveaxis(out, [-4, -3, -2, -1], [a, a + 1, a + 2, a + 3])
    return pr.ProcessTensor(p.k + 1, p.d, out, dict(p.provenance))


@dataclass
class SuperprocessReport:
    causality: list[float]
    trace_residuals: list[float]
    min_eigs: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return (all(r <= self.tol for r in self.causality)
                and all(r <= self.tol for r in self.trace_residuals)
                and all(e >= -self.tol for e in self.min_eigs))

    @property
    def max_trace_residual(self) -> float:
        return max(self.trace_residuals)


def random_process(d: int, k: int, rng: np.random.Generator, d_e: int = 2) -> pr.ProcessTensor:
    """Random valid k-slot process from a Haar system-environment circuit."""
    us = [lv.haar_unitary(d * d_e, rng) for _ in range(k - 1)]
    return pr.process_from_circuit(us, lv.random_density_matrix(d * d_e, rng), d, d_e)


def check_superprocess_validity(brick, trials: int, rng: np.random.Generator,
                                tol: float = 1e-8) -> SuperprocessReport:
    """Apply the brick to random valid processes (k <= 3) at random slots.

    Each output must be causal, PSD and carry trace ``d**(k+1)``.
    """
    W = _tensor(brick)
    d = lv._isqrt(W.shape[0])
    rep = SuperprocessReport([], [], [], tol)
    for _ in range(trials):
        k = int(rng.integers(1, 4))
        p = random_process(d, k, rng)
        q = fine_grain(p, int(rng.integers(0, k)), W)
        c = pr.check_causality(q, tol)
        rep.causality.append(c.max_residual)
        rep.trace_residuals.append(abs(q.trace() - d ** q.k) / d ** q.k)
        rep.min_eigs.append(lv.choi_min_eig(q.choi))
    return rep


def gauge_transform(b, V) -> np.ndarray:
    """Brick dressed so that it is scale consistent with respect to the unitary ``V``.

    The coarse legs are dressed with L(sqrt V) and each fine slot with
    L(sqrt V^dag) on both sides, so filling both fine slots with V yields V.
    """
    W = _tensor(b)
    d = lv._isqrt(W.shape[0])
    V = lv.check_unitary(V)
    if V.shape != (d, d):
        raise ShapeError(f"V of shape {V.shape} does not act on slot dimension {d}")
    w, vecs = np.linalg.eig(V)
    sqrt_v = vecs @ np.diag(np.sqrt(w.astype(complex))) @ np.linalg.inv(vecs)
    # V is normal; re-unitize to clean up the eigensolver's rounding
    uu, _, vh = np.linalg.svd(sqrt_v)
    sqrt_v = uu @ vh
    Lv = lv.liouville_of_unitary(sqrt_v, check=False)
    Lvd = lv.liouville_of_unitary(sqrt_v.conj().T, check=False)
    return np.einsum("Aa,bB,abcdef,cX,Yd,eZ,Tf->ABXYZT", Lv, Lv, W, Lvd, Lvd, Lvd, Lvd,
                     optimize=True)


# -- trees -------------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ProcessTree:
    """Height-N tree of bricks with a root state.

    ``levels[s-1][j]`` is the brick at scale s, position j (0-based).  For
    homogeneous tags the same object is shared across the level (th) or the
    whole table (sth).
    """

    height: int
    d: int
    levels: tuple
    rho0: np.ndarray
    homogeneity: str = "generic"
    provenance: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return 2 ** self.height

    def brick(self, s: int, j: int) -> _Brick:
        return self.levels[s - 1][j]

    @property
    def root(self) -> np.ndarray:
        """Root prepare process as ``Y0[i, o]``."""
        return np.multiply.outer(pr.vec_identity(self.d), lv.vectorize(self.rho0))

    def unique_bricks(self) -> list:
        seen, out = set(), []
        for level in self.levels:
            for b in level:
                if id(b) not in seen:
                    seen.add(id(b))
                    out.append(b)
        return out

    def truncate(self, s: int) -> "ProcessTree":
        if not 0 <= s <= self.height:
            raise ValueError(f"scale {s} outside [0, {self.height}]")
        return ProcessTree(s, self.d, self.levels[:s], self.rho0, self.homogeneity,
                           dict(self.provenance))

    @property
    def scale_consistent(self) -> bool:
        return all(check_scale_consistency(b) <= 1e-10 for b in self.unique_bricks())


def build_tree(bricks, rho0, height: int, homogeneity: str = "generic",
               provenance: dict | None = None) -> ProcessTree:
    """Assemble a tree from a brick table matching the homogeneity tag.

    generic: a sequence of levels, level s holding 2**(s-1) bricks;
    th: one brick per scale; sth: a single brick.
    """
    if homogeneity not in HOMOGENEITY:
        raise ValueError(f"homogeneity must be one of {HOMOGENEITY}, got {homogeneity!r}")
    rho0 = lv.check_density_matrix(rho0, tol=1e-9)
    d = rho0.shape[0]
    if homogeneity == "sth":
        if isinstance(bricks, (list, tuple)):
            if len(bricks) != 1:
                raise ValueError(f"sth tree needs exactly one brick, got {len(bricks)}")
            bricks = bricks[0]
        b = as_brick(bricks)
        levels = tuple((b,) * 2 ** (s - 1) for s in range(1, height + 1))
    elif homogeneity == "th":
        if len(bricks) != height:
            raise ValueError(f"th tree of height {height} needs {height} bricks, got {len(bricks)}")
        levels = tuple((as_brick(b),) * 2 ** s for s, b in enumerate(bricks))
    else:
        if len(bricks) != height:
            raise ValueError(f"generic tree of height {height} needs {height} levels, got {len(bricks)}")
        levels = []
        for s, level in enumerate(bricks, start=1):
            if len(level) != 2 ** (s - 1):
                raise ValueError(f"level {s} needs {2 ** (s - 1)} bricks, got {len(level)}")
            levels.append(tuple(as_brick(b) for b in level))
        levels = tuple(levels)
    for level in levels:
        for b in level:
            if b.d != d:
                raise ShapeError(f"brick slot dimension {b.d} does not match root dimension {d}")
    return ProcessTree(height, d, levels, rho0, homogeneity, dict(provenance or {}))


def sample_w_brick(d: int, rng: np.random.Generator, kind: str = "haar",
                   beta: float | None = None, gue_variance: float = 1.0) -> WBrick:
    """Random W brick: Haar unitaries, or the SWAP-power/GUE family for qubits."""
    if kind == "haar":
        u1, u2 = lv.haar_unitary(d * d, rng), lv.haar_unitary(d * d, rng)
    elif kind == "hamiltonian":
        if d != 2:
            raise ValueError("the hamiltonian family is defined for qubit slots only")
        if beta is None:
            raise ValueError("kind='hamiltonian' needs beta")
        # one GUE draw shared by both generators
        gue = lv.gue_hamiltonian(4, rng, gue_variance) if beta > 0 else np.zeros((4, 4))
        hs = [(1 - beta) * (a * np.pi / 12) * lv.H_SWAP + beta * gue for a in (1, 2)]
        u1, u2 = (lv.unitary_of_hamiltonian(h) for h in hs)
    else:
        raise ValueError(f"unknown brick kind {kind!r}")
    return WBrick(u1, u2, lv.random_density_matrix(d, rng))


def sample_uniform_tree(d: int, height: int, rng: np.random.Generator, kind: str = "haar",
                        beta: float | None = None, homogeneity: str = "sth",
                        gue_variance: float = 1.0) -> ProcessTree:
    """Random W tree; a single brick for sth, one per scale for th, all fresh for generic."""
    rho0 = lv.random_density_matrix(d, rng)

    def draw():
        return sample_w_brick(d, rng, kind, beta, gue_variance)

    if homogeneity == "sth":
        bricks = draw()
    elif homogeneity == "th":
        bricks = [draw() for _ in range(height)]
    else:
        bricks = [[draw() for _ in range(2 ** (s - 1))] for s in range(1, height + 1)]
    prov = {"kind": kind, "beta": beta, "d": d}
    if kind == "hamiltonian":
        prov["gue_variance"] = gue_variance
    return build_tree(bricks, rho0, height, homogeneity, prov)


# -- dense oracles -----------------------------------------------------------------------------

def densify(tree: ProcessTree) -> pr.ProcessTensor:
    """Dense process of the whole tree, fine-graining one scale at a time."""
    pr.dense_guard(tree.d, tree.k)
    p = pr.prepare_process(tree.rho0)
    for s in range(1, tree.height + 1):
        for j in range(2 ** (s - 1) - 1, -1, -1):
            p = fine_grain(p, j, tree.brick(s, j))
    return pr.ProcessTensor(p.k, p.d, p.data, {"construction": "tree", "height": tree.height})


class NetworkOracle:
    """Full-network contraction for trees too large to densify.

    The tree is densified down to scale N-1; then each finest-scale brick is
    contracted with the tensors on both of its slots (the idle instrument
    wherever nothing is given) and the result goes into the dense process.
    When scale N-1 is itself too large to densify, the same step recurses.
    No causal-cone pruning is done.  Slot tensors may be arbitrary
    ``D**2 x D**2`` arrays, which makes probe-based checks possible.
    """

    def __init__(self, tree: ProcessTree):
        if tree.height == 0:
            raise ValueError("a height-0 tree needs no oracle")
        self.tree = tree
        parent = tree.truncate(tree.height - 1)
        try:
            pr.dense_guard(tree.d, parent.k)
            self.parent = densify(parent)
        except pr.GuardError:
            self.parent = NetworkOracle(parent)

    def contract(self, tensors: Mapping[int, np.ndarray]) -> complex:
        tree, d = self.tree, self.tree.d
        for t in tensors:
            if not 0 <= t < tree.k:
                raise IndexError(f"slot {t} out of range for {tree.k} slots")
        idle = cup(d)
        coarse = {}
        for j in range(2 ** (tree.height - 1)):
            W = tree.brick(tree.height, j).tensor
            earlier = np.asarray(tensors.get(2 * j, idle), dtype=complex)
            later = np.asarray(tensors.get(2 * j + 1, idle), dtype=complex)
            coarse[j] = np.einsum("abcdef,cd,ef->ab", W, later, earlier)
        if isinstance(self.parent, NetworkOracle):
            return self.parent.contract(coarse)
        return pr.apply_instruments(self.parent, coarse)

    def expectation(self, assignment: Mapping[int, object]) -> complex:
        return self.contract({t: _liou(A, self.tree.d) for t, A in assignment.items()})


def dense_expectation(tree: ProcessTree, assignment: Mapping[int, object]) -> complex:
    """Expectation by full contraction: densify when allowed, else the network oracle."""
    if tree.height == 0:
        return pr.apply_instruments(pr.prepare_process(tree.rho0), assignment)
    try:
        pr.dense_guard(tree.d, tree.k)
    except pr.GuardError:
        return NetworkOracle(tree).expectation(assignment)
    return pr.apply_instruments(densify(tree), assignment)


def _unit(rng: np.random.Generator, shape) -> np.ndarray:
    g = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    return g / np.linalg.norm(g)


def check_tree_causality(tree: ProcessTree, rng: np.random.Generator | None = None,
                         probes: int = 4, tol: float = 1e-8) -> pr.CausalityReport:
    """Causality of the tree's process, densely when possible, else by random probes.

    The probe form follows the dense peel: with every later slot replaced by
    the trace-and-reprepare-1/d map, the input leg of slot t must factor out as
    an identity for any tensors on slot t's output leg and earlier slots.
    """
    try:
        pr.dense_guard(tree.d, tree.k)
        return pr.check_causality(densify(tree), tol)
    except pr.GuardError:
        pass
    rng = rng or np.random.default_rng(0)
    d, k = tree.d, tree.k
    one = pr.vec_identity(d)
    discard = np.multiply.outer(one / d, one)
    oracle = NetworkOracle(tree)
    residuals = []
    for t in range(k - 1, -1, -1):
        worst = 0.0
        for _ in range(probes):
            base = {u: discard for u in range(t + 1, k)}
            base.update({u: _unit(rng, (d * d, d * d)) for u in range(t)})
            g, h = _unit(rng, d * d), _unit(rng, d * d)
            x = oracle.contract({**base, t: np.multiply.outer(g, h)})
            ref = (g @ one) * oracle.contract({**base, t: np.multiply.outer(one / d, h)})
            worst = max(worst, abs(x - ref))
        residuals.append(worst)
    final = abs(oracle.contract({u: discard for u in range(k)}) - 1.0)
    return pr.CausalityReport(residuals, final, tree_trace(tree), tol)


def tree_trace(tree: ProcessTree) -> complex:
    """Trace of the tree's process Choi: every leg contracted with vec(1)."""
    one = pr.vec_identity(tree.d)
    full = np.multiply.outer(one, one)
    if tree.height == 0:
        return complex(np.sum(tree.root * full))
    return NetworkOracle(tree).contract({t: full for t in range(tree.k)})


# -- streaming contraction ---------------------------------------------------------------------

def left_move(brick, A):
    """Instrument on the earlier fine slot, idle later slot, pushed one scale up."""
    b = as_brick(brick)
    MOVE_COUNTS["left"] += 1
    out = (b.left_matrix @ _liou(A, b.d).ravel()).reshape(b.d ** 2, b.d ** 2)
    return pr.Instrument(out, "left") if isinstance(A, pr.Instrument) else out


def right_move(brick, A):
    """Instrument on the later fine slot, idle earlier slot, pushed one scale up."""
    b = as_brick(brick)
    MOVE_COUNTS["right"] += 1
    out = (b.right_matrix @ _liou(A, b.d).ravel()).reshape(b.d ** 2, b.d ** 2)
    return pr.Instrument(out, "right") if isinstance(A, pr.Instrument) else out


def fusion_move(brick, earlier, later):
    """Both fine slots occupied: ``earlier`` on the earlier slot, ``later`` on the later one."""
    b = as_brick(brick)
    MOVE_COUNTS["fusion"] += 1
    out = coarse_grain(b, _liou(later, b.d), _liou(earlier, b.d))
    if isinstance(earlier, pr.Instrument) or isinstance(later, pr.Instrument):
        return pr.Instrument(out, "fusion")
    return out


def expectation(tree: ProcessTree, assignment: Mapping[int, object] | None = None) -> complex:
    """Multi-slot expectation by pushing each instrument up its causal cone.

    Slots without an instrument are idle.  At each scale the occupied slots
    are paired by parent brick: one occupied child is a left or right move,
    two occupied children fuse.  Cost is linear in the height for a fixed
    number of instruments.
    """
    assignment = dict(assignment or {})
    d = tree.d
    current = {}
    for t, A in assignment.items():
        if not 0 <= t < tree.k:
            raise IndexError(f"slot {t} out of range for {tree.k} slots")
        current[t] = _liou(A, d)
    for s in range(tree.height, 0, -1):
        nxt = {}
        for j in sorted({t >> 1 for t in current}):
            b = tree.brick(s, j)
            earlier, later = current.get(2 * j), current.get(2 * j + 1)
            if earlier is not None and later is not None:
                nxt[j] = fusion_move(b, earlier, later)
            elif earlier is not None:
                nxt[j] = left_move(b, earlier)
            else:
                nxt[j] = right_move(b, later)
        current = nxt
    A = current.get(0, cup(d))
    return complex(np.sum(tree.root * A))


def expectation_at_scale(tree: ProcessTree, s: int, assignment: Mapping[int, object] | None = None) -> complex:
    """Expectation with instruments on the 2**s slots of scale s (finer scales idle).

    Scale consistency makes this the expectation on the height-s truncation.
    """
    if not 0 <= s <= tree.height:
        raise ValueError(f"scale {s} outside [0, {tree.height}]")
    return expectation(tree.truncate(s), assignment)


# -- transfer maps -----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TransferMaps:
    """Left/right transfer matrices ``D**4 x D**4`` acting on ``A.ravel()``."""

    left: np.ndarray
    right: np.ndarray
    d: int


def transfer_maps(brick) -> TransferMaps:
    b = as_brick(brick)
    return TransferMaps(b.left_matrix, b.right_matrix, b.d)


def transfer_choi(M: np.ndarray, d: int) -> np.ndarray:
    """Choi matrix of a transfer matrix seen as a map on instrument Choi matrices.

    A transfer matrix acts on Liouville-flattened instruments; conjugating by
    the (linear) Liouville-to-Choi reshuffle gives a map between
    ``d**2 x d**2`` matrices, whose Choi is PSD iff it is CP.
    """
    dd = d * d
    n = dd * dd
    P = np.zeros((n, n), dtype=complex)
    for col in range(n):
        e = np.zeros(n, dtype=complex)
        e[col] = 1
        P[:, col] = lv.vectorize(lv.choi_of_superop(e.reshape(dd, dd)))
    S = P @ M @ np.linalg.inv(P)
    return lv.choi_of_superop(S)


@dataclass
class Spectrum:
    lambda1: complex
    v1_residual: float
    lambda2_left: complex
    lambda2_right: complex
    alpha_pred: float
    degenerate: bool
    subleading_degenerate: bool
    spectral_radius_left: float
    spectral_radius_right: float
    mu_right: complex = 0j
    alpha_anchored: float = float("inf")


def _side(M: np.ndarray, tol: float):
    """Leading three eigenvalues; a tie in the leading magnitude is flagged, not raised."""
    try:
        pairs = leading_eigs(M, count=3, tol=tol)
        return [p[0] for p in pairs], [p[1] for p in pairs], False
    except ConvergenceError as err:
        if "degenerate" not in str(err):
            raise
        w, v = np.linalg.eig(M)
        idx = np.argsort(-np.abs(w), kind="stable")
        return list(w[idx[:3]]), [v[:, i] for i in idx[:3]], True


def transfer_spectrum(tm: TransferMaps, tol: float = 1e-10) -> Spectrum:
    """Leading eigenpair, subleading eigenvalues and the predicted decay exponent.

    Correlators at separation 2**n - 1 scale like |l2_left * l2_right|**n, so
    on log2 axes the slope is log2 of that product; ``alpha_pred`` is its modulus.

    For a correlator anchored at the first slot only the trace covector of the
    later instrument survives each right move.  ``mu_right`` is the subleading
    eigenvalue of the right map compressed onto that sector (input leg closed
    with the identity), and ``alpha_anchored`` is ``|log2 |l2_left * mu_right||``.
    """
    idle = cup(tm.d).ravel()
    idle_unit = idle / np.linalg.norm(idle)
    wl, vl, degl = _side(tm.left, tol)
    wr, vr, degr = _side(tm.right, tol)
    res = 0.0
    for w, v in ((wl, vl), (wr, vr)):
        x = v[0] / np.linalg.norm(v[0])
        phase = np.vdot(idle_unit, x)
        res = max(res, abs(w[0] - 1), float(np.max(np.abs(x - phase * idle_unit))) if abs(phase) > 0 else 1.0)
    l2l, l2r = wl[1], wr[1]
    prod = abs(l2l * l2r)
    alpha = float(abs(np.log2(prod))) if prod > 0 else float("inf")
    sub = False
    for w in (wl, wr):
        if len(w) > 2 and abs(abs(w[1]) - abs(w[2])) <= 1e-8 * max(abs(w[1]), 1.0):
            sub = True
    dd = tm.d * tm.d
    proj = np.kron(pr.vec_identity(tm.d)[None, :], np.eye(dd))
    we = np.linalg.eigvals(proj @ tm.right @ np.linalg.pinv(proj))
    we = we[np.argsort(-np.abs(we), kind="stable")]
    mu = complex(we[1]) if len(we) > 1 else 0j
    prod_e = abs(l2l * mu)
    alpha_e = float(abs(np.log2(prod_e))) if prod_e > 0 else float("inf")
    return Spectrum(wl[0], res, l2l, l2r, alpha, degl or degr, sub,
                    float(np.max(np.abs(np.linalg.eigvals(tm.left)))),
                    float(np.max(np.abs(np.linalg.eigvals(tm.right)))),
                    mu, alpha_e)


def transfer_correlator(brick, rho0, height: int, A, A_later, n: int, connected: bool = True) -> complex:
    """Anchored correlator at slots 0 and 2**n - 1 of an sth tree, by transfer matrices.

    ``A`` climbs n-1 left maps, ``A_later`` n-1 right maps, they fuse, and the
    result climbs the remaining height-n left maps to the root.
    """
    b = as_brick(brick)
    d = b.d
    if not 1 <= n <= height:
        raise ValueError(f"n must lie in [1, {height}]")
    ML, MR = b.left_matrix, b.right_matrix
    root = np.multiply.outer(pr.vec_identity(d), lv.vectorize(rho0)).ravel()
    a = _liou(A, d).ravel()
    a2 = _liou(A_later, d).ravel()
    mlp = np.linalg.matrix_power
    x = mlp(ML, n - 1) @ a
    y = mlp(MR, n - 1) @ a2
    fused = coarse_grain(b, y.reshape(d * d, d * d), x.reshape(d * d, d * d)).ravel()
    top = root @ mlp(ML, height - n)
    joint = top @ fused
    if not connected:
        return complex(joint)
    single_a = root @ mlp(ML, height) @ a
    single_b = top @ (MR @ y)
    return complex(joint - single_a * single_b)


# -- cached environments and sweeps --------------------------------------------------------------

class TreeCache:
    """Per-tree environments for fast many-pair evaluation.

    ``env[s][j]`` is the linear functional (over ``A.ravel()``) that a single
    instrument at slot j of scale s sees when everything else is idle.
    """

    def __init__(self, tree: ProcessTree):
        self.tree = tree
        env = [tree.root.ravel()[None, :]]
        for s in range(1, tree.height + 1):
            prev = env[-1]
            cur = np.empty((2 ** s, prev.shape[1]), dtype=complex)
            for j in range(2 ** (s - 1)):
                b = tree.brick(s, j)
                cur[2 * j] = prev[j] @ b.left_matrix
                cur[2 * j + 1] = prev[j] @ b.right_matrix
            env.append(cur)
        self.env = env

    def ascend(self, t: int, X: np.ndarray, to_scale: int) -> np.ndarray:
        """Push a finest-slot object (``D**4`` vector, or matrix with that many rows) up to ``to_scale``."""
        tree = self.tree
        c = t
        for s in range(tree.height, to_scale, -1):
            b = tree.brick(s, c >> 1)
            X = (b.right_matrix if c & 1 else b.left_matrix) @ X
            c >>= 1
        return X

    def single(self, t: int, A) -> complex:
        return complex(self.env[self.tree.height][t] @ _liou(A, self.tree.d).ravel())

    def meeting_scale(self, t: int, t2: int) -> int:
        """Scale of the brick where the cones of slots t != t2 fuse."""
        return self.tree.height - (int(t ^ t2).bit_length() - 1)

    def pair_tensor(self, t: int, X, t2: int, Y) -> np.ndarray:
        """Fuse ascended objects from slots t < t2 and contract with the environment.

        ``X`` and ``Y`` are ``D**4 x m`` matrices (columns are flattened
        instruments); the result is ``m_Y x m_X``.
        """
        tree = self.tree
        dd = tree.d ** 2
        s = self.meeting_scale(t, t2)
        Xs = self.ascend(t, X, s)
        Ys = self.ascend(t2, Y, s)
        j = t >> (tree.height - s + 1)
        W = tree.brick(s, j).tensor
        env = self.env[s - 1][j].reshape(dd, dd)
        return np.einsum("ab,abcdef,cdy,efx->yx", env, W,
                         Ys.reshape(dd, dd, -1), Xs.reshape(dd, dd, -1), optimize=True)

    def pair(self, t: int, A, t2: int, B) -> complex:
        if t == t2:
            raise ValueError("pair needs two distinct slots")
        if t > t2:
            t, A, t2, B = t2, B, t, A
        d = self.tree.d
        x = _liou(A, d).ravel()[:, None]
        y = _liou(B, d).ravel()[:, None]
        return complex(self.pair_tensor(t, x, t2, y)[0, 0])

    def slot_pair_marginal(self, a: int, b: int) -> np.ndarray:
        """Reduced Liouville tensor on slots a < b, legs ``(i_b, o_b, i_a, o_a)``."""
        if not 0 <= a < b < self.tree.k:
            raise IndexError(f"need 0 <= a < b < {self.tree.k}, got {a}, {b}")
        dd = self.tree.d ** 2
        basis = np.eye(dd * dd, dtype=complex)
        m = self.pair_tensor(a, basis, b, basis)
        return m.reshape(dd, dd, dd, dd)


def connected_correlator(cache: TreeCache, t: int, A, t2: int, B) -> complex:
    """<B at t2, A at t> - <B><A>."""
    return cache.pair(t, A, t2, B) - cache.single(t, A) * cache.single(t2, B)


def two_point_sweep(tree: ProcessTree, A, A_later, dts: Sequence[int]) -> dict[int, float]:
    """Mean |connected correlator| over all slot pairs (t, t + dt), for each dt."""
    cache = TreeCache(tree)
    d = tree.d
    a = _liou(A, d)
    b = _liou(A_later, d)
    singles_a = [cache.single(t, a) for t in range(tree.k)]
    singles_b = [cache.single(t, b) for t in range(tree.k)]
    out = {}
    for dt in dts:
        if not 1 <= dt < tree.k:
            raise ValueError(f"dt={dt} outside [1, {tree.k})")
        vals = [abs(cache.pair(t, a, t + dt, b) - singles_a[t] * singles_b[t + dt])
                for t in range(tree.k - dt)]
        out[int(dt)] = float(np.mean(vals))
    return out


def anchored_correlator(tree: ProcessTree, A, A_later, n: int) -> complex:
    """Connected correlator between slot 0 and slot 2**n - 1 via the streaming path."""
    t2 = 2 ** n - 1
    return (expectation(tree, {0: A, t2: A_later})
            - expectation(tree, {0: A}) * expectation(tree, {t2: A_later}))


# -- serialization -------------------------------------------------------------------------------

def save_tree(tree: ProcessTree, stem) -> None:
    """Write ``<stem>.json`` plus one tensor-format ``.bin`` per distinct brick and the root state.

    W bricks also store their unitaries and state so parameters survive a round trip.
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    uniq = tree.unique_bricks()
    index = {id(b): n for n, b in enumerate(uniq)}
    files = []
    for n, b in enumerate(uniq):
        entry = {"tensor": f"{stem.name}.brick{n}.bin", "type": type(b).__name__}
        DenseTensor(b.tensor).save(stem.parent / entry["tensor"])
        if isinstance(b, WBrick):
            for name in ("u1", "u2", "rho"):
                entry[name] = f"{stem.name}.brick{n}.{name}.bin"
                DenseTensor(getattr(b, name)).save(stem.parent / entry[name])
        files.append(entry)
    DenseTensor(tree.rho0).save(stem.parent / f"{stem.name}.rho0.bin")
    manifest = {
        "format": "proctree-tree/1",
        "height": tree.height,
        "d": tree.d,
        "dims": [tree.d] * (tree.height + 1),
        "homogeneity": tree.homogeneity,
        "rho0": f"{stem.name}.rho0.bin",
        "bricks": files,
        "table": [[index[id(b)] for b in level] for level in tree.levels],
        "provenance": tree.provenance,
    }
    with open(stem.parent / f"{stem.name}.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_tree(stem) -> ProcessTree:
    stem = Path(stem)
    if stem.suffix == ".json":
        stem = stem.with_suffix("")
    with open(stem.parent / f"{stem.name}.json") as fh:
        m = json.load(fh)
    base = stem.parent
    bricks = []
    for entry in m["bricks"]:
        if entry.get("type") == "WBrick" and "u1" in entry:
            u1, u2, rho = (DenseTensor.load(base / entry[x]).data for x in ("u1", "u2", "rho"))
            b = WBrick(u1, u2, rho)
            stored = DenseTensor.load(base / entry["tensor"]).data
            # the stored tensor is authoritative; it is what verify inspects
            b.__dict__["tensor"] = stored
        else:
            b = RawBrick(DenseTensor.load(base / entry["tensor"]).data)
        bricks.append(b)
    levels = tuple(tuple(bricks[i] for i in level) for level in m["table"])
    rho0 = DenseTensor.load(base / m["rho0"]).data
    if len(levels) != m["height"]:
        raise ShapeError(f"manifest declares height {m['height']} but holds {len(levels)} levels")
    return ProcessTree(m["height"], m["d"], levels, rho0, m["homogeneity"], m.get("provenance", {}))

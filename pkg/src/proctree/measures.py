"""Memory and entanglement diagnostics on two-slot marginals, plus sweep drivers.

Marginals are Liouville tensors over the legs ``(i_a, o_a, i_b, o_b)`` for
slots a < b, each leg of size d**2.  Their Choi matrix splits every leg in
(ket, bra) with the same leg order.  Entropies use the natural logarithm and
act on trace-normalized Choi matrices.
"""
from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import liouville as lv
from . import process as pr
from . import tree as tr
from .tensors import ShapeError, singular_values


# -- instrument presets --------------------------------------------------------------------------

GELL_MANN_1 = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]], dtype=complex)


def observable_preset(d: int) -> pr.Instrument:
    """Measure a fixed observable and reprepare |0>: sigma_x (d=2), first Gell-Mann (d=3), sigma_x (x) sigma_x (d=4)."""
    if d == 2:
        obs = lv.PAULI_X
    elif d == 3:
        obs = GELL_MANN_1
    elif d == 4:
        obs = np.kron(lv.PAULI_X, lv.PAULI_X)
    else:
        raise ValueError(f"no observable preset for d={d}")
    zero = np.zeros((d, d), dtype=complex)
    zero[0, 0] = 1
    return pr.Instrument.measure_prepare(obs, zero, f"observable-preset-d{d}")


# -- marginals ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class MPOSource:
    """A repeated-channel process described by its generator, evaluated without densifying."""

    channel: np.ndarray
    rho_se: np.ndarray
    d_s: int
    d_e: int
    k: int

    @property
    def d(self) -> int:
        return self.d_s


@dataclass(frozen=True, eq=False)
class TwoSlotMarginal:
    """Reduced process on slots a < b; ``tensor`` has legs ``(i_a, o_a, i_b, o_b)``."""

    a: int
    b: int
    d: int
    tensor: np.ndarray
    final_slot: bool = False  # b is the last slot of its source

    @property
    def choi(self) -> np.ndarray:
        return lv.leg_choi(self.tensor)

    @property
    def trace(self) -> complex:
        return pr.full_trace(self.tensor, self.d)

    def reduced(self, slot: str) -> np.ndarray:
        """Choi matrix of the single-slot marginal ("a" or "b"), other slot's legs traced."""
        one = pr.vec_identity(self.d)
        t = self.tensor
        if slot == "a":
            t = np.tensordot(np.tensordot(t, one, axes=([3], [0])), one, axes=([2], [0]))
        elif slot == "b":
            t = np.tensordot(one, np.tensordot(one, t, axes=([0], [0])), axes=([0], [0]))
        else:
            raise ValueError(f"slot must be 'a' or 'b', got {slot!r}")
        return lv.leg_choi(t)


def _source_k(source) -> int:
    if isinstance(source, (pr.ProcessTensor, MPOSource)):
        return source.k
    if isinstance(source, tr.ProcessTree):
        return source.k
    if isinstance(source, tr.TreeCache):
        return source.tree.k
    raise TypeError(f"unsupported marginal source {type(source).__name__}")


def two_slot_marginal(source, a: int, b: int) -> TwoSlotMarginal:
    """Marginal on slots a < b with every other slot idle.

    Trees are handled by tomography over the matrix-unit basis on both
    slots (all basis pairs in one batched contraction); dense processes and
    MPO sources reduce directly.  ``source`` may also be a prepared
    :class:`~proctree.tree.TreeCache` to amortize environments over many pairs.
    """
    k = _source_k(source)
    if not 0 <= a < b < k:
        raise IndexError(f"need 0 <= a < b < {k}, got a={a}, b={b}")
    if isinstance(source, pr.ProcessTensor):
        m = pr.marginal(source, [a, b])
        d = source.d
    elif isinstance(source, MPOSource):
        m = pr.mpo_marginal(source.channel, source.rho_se, source.d_s, source.d_e, source.k, [a, b])
        d = source.d_s
    else:
        cache = source if isinstance(source, tr.TreeCache) else tr.TreeCache(source)
        m = cache.slot_pair_marginal(a, b)
        d = cache.tree.d
    # process order (i_b, o_b, i_a, o_a) -> (i_a, o_a, i_b, o_b)
    return TwoSlotMarginal(a, b, d, np.transpose(m, (2, 3, 0, 1)), b == k - 1)


def _normalized(C: np.ndarray) -> np.ndarray:
    C = 0.5 * (C + C.conj().T)
    tr_ = np.trace(C).real
    if tr_ <= 0:
        raise ValueError("marginal has non-positive trace")
    return C / tr_


def qmi_nonmarkovianity(source, a: int | None = None, b: int | None = None) -> float:
    """S(Y_a) + S(Y_b) - S(Y_ba) on trace-normalized marginals, clipped at 0.

    ``source`` is a marginal source with slots a, b, or a :class:`TwoSlotMarginal`.
    """
    m = source if isinstance(source, TwoSlotMarginal) else two_slot_marginal(source, a, b)
    s_ab = lv.von_neumann_entropy(_normalized(m.choi))
    s_a = lv.von_neumann_entropy(_normalized(m.reduced("a")))
    s_b = lv.von_neumann_entropy(_normalized(m.reduced("b")))
    eta = s_a + s_b - s_ab
    if eta < -1e-8:
        raise ValueError(f"mutual information came out negative ({eta:.3e})")
    return max(eta, 0.0)


def negativity(source, t: int | None = None, t2: int | None = None) -> float:
    """(||Y^{T_t}||_1 - 1)/2 for the trace-normalized marginal on slots t < t2.

    The partial transpose acts on both legs of slot t.  When t2 is the final
    slot, its dangling input leg is closed with a |0> preparation first.
    """
    m = source if isinstance(source, TwoSlotMarginal) else two_slot_marginal(source, t, t2)
    d = m.d
    tens = m.tensor
    if m.final_slot:
        zero = np.zeros((d, d), dtype=complex)
        zero[0, 0] = 1
        tens = np.tensordot(tens, lv.vectorize(zero), axes=([2], [0]))  # (i_a, o_a, o_b)
    C = _normalized(lv.leg_choi(tens))
    n_legs = tens.ndim
    pt = lv.partial_transpose(C, [d] * n_legs, [0, 1])
    val = 0.5 * (float(np.sum(singular_values(pt))) - 1.0)
    return max(val, 0.0)


# -- 2-fidelity ---------------------------------------------------------------------------------

def _tree_overlap(x: tr.ProcessTree, y: tr.ProcessTree) -> complex:
    """sum over legs of X * conj(Y) for two trees of equal shape, without densifying.

    Equals tr(C_X C_Y) for Hermitian Choi matrices.  Pair environments
    E[i_c, o_c, i_c', o_c'] are built bottom-up, one per coarse slot.
    """
    if x.height != y.height or x.d != y.d:
        raise ShapeError(f"tree shapes differ: ({x.height}, {x.d}) vs ({y.height}, {y.d})")
    dd = x.d ** 2
    pair_cache = {}
    env = None
    for s in range(x.height, 0, -1):
        new = []
        for j in range(2 ** (s - 1)):
            bx, by = x.brick(s, j), y.brick(s, j)
            if env is None:
                key = (id(bx), id(by))
                if key not in pair_cache:
                    pair_cache[key] = np.tensordot(bx.tensor, by.tensor.conj(),
                                                   axes=([2, 3, 4, 5], [2, 3, 4, 5]))
                new.append(pair_cache[key])
            else:
                ef, efb = env[2 * j + 1], env[2 * j]
                # W_X[a,b,c,d,e,f] E_f[c,d,C,D] E_fb[e,f,E,F] conj(W_Y)[A,B,C,D,E,F]
                t = np.tensordot(bx.tensor, ef, axes=([2, 3], [0, 1]))  # a b e f C D
                t = np.tensordot(t, efb, axes=([2, 3], [0, 1]))  # a b C D E F
                new.append(np.tensordot(t, by.tensor.conj(), axes=([2, 3, 4, 5], [2, 3, 4, 5])))
        env = new
    rx, ry = x.root, y.root
    if env is None:
        return complex(np.sum(rx * ry.conj()))
    E = env[0].reshape(dd, dd, dd, dd)
    return complex(np.einsum("ab,abcd,cd->", rx, E, ry.conj()))


def _as_dense(x):
    if isinstance(x, pr.ProcessTensor):
        return x.data
    if isinstance(x, tr.ProcessTree):
        return tr.densify(x).data
    return np.asarray(x)


def hs_overlap(x, y) -> complex:
    """tr(C_x C_y) for Hermitian Choi states given as processes, trees or Choi matrices."""
    if isinstance(x, tr.ProcessTree) and isinstance(y, tr.ProcessTree):
        return _tree_overlap(x, y)
    X, Y = _as_dense(x), _as_dense(y)
    if X.shape != Y.shape:
        raise ShapeError(f"shape mismatch: {X.shape} vs {Y.shape}")
    if X.ndim == 2:
        return complex(np.sum(X * Y.T))
    return complex(np.vdot(Y, X))


def f2_fidelity(x, y) -> float:
    """tr(xy) / max(tr x^2, tr y^2)."""
    xy = hs_overlap(x, y).real
    xx = hs_overlap(x, x).real
    yy = hs_overlap(y, y).real
    den = max(xx, yy)
    if den <= 0:
        raise ValueError("2-fidelity of zero operators is undefined")
    return float(xy / den)


# -- sweeps ------------------------------------------------------------------------------------

@dataclass(frozen=True)
class EnsembleSpec:
    """Random sources for a sweep: ``kind`` in {haar, hamiltonian, mpo}."""

    d: int = 2
    height: int = 8
    kind: str = "haar"
    beta: float | None = None
    homogeneity: str = "sth"
    d_e: int = 2  # environment dim for the mpo kind
    k: int = 14  # slot count for the mpo kind
    gue_variance: float = 1.0  # hamiltonian kind only

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def sample(self, rng: np.random.Generator):
        if self.kind == "mpo":
            channel = lv.random_cptp(self.d * self.d_e, rng, rank=2)
            rho = lv.random_density_matrix(self.d * self.d_e, rng)
            return MPOSource(channel, rho, self.d, self.d_e, self.k)
        return tr.sample_uniform_tree(self.d, self.height, rng, self.kind, self.beta,
                                      self.homogeneity, self.gue_variance)

    @property
    def slots(self) -> int:
        return self.k if self.kind == "mpo" else 2 ** self.height


@dataclass
class Regression:
    slope: float
    intercept: float
    r2: float
    n_points: int


def regress(x: Sequence[float], y: Sequence[float]) -> Regression:
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if x.size < 2:
        return Regression(float("nan"), float("nan"), float("nan"), int(x.size))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else float("nan")
    return Regression(float(slope), float(intercept), r2, int(x.size))


def _safe_log(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, float)
    out = np.full(v.shape, np.nan)
    pos = v > 0
    out[pos] = np.log(v[pos])
    return out


@dataclass
class SweepResult:
    ensemble: EnsembleSpec
    measure: str
    dts: list[int]
    values: np.ndarray  # trials x len(dts)
    seeds: list[int]
    master_seed: int
    window: tuple[int, int]
    loglog: Regression = field(init=False)
    loglin: Regression = field(init=False)

    def __post_init__(self):
        mean = self.mean
        dts = np.asarray(self.dts, float)
        sel = (dts >= self.window[0]) & (dts <= self.window[1])
        self.loglog = regress(np.log(dts[sel]), _safe_log(mean[sel]))
        self.loglin = regress(dts[sel], _safe_log(mean[sel]))

    @property
    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    @property
    def decay_model(self) -> str:
        """'exponential' when the log-linear fit beats the log-log fit by at least 0.05 in R^2."""
        if self.loglin.r2 - self.loglog.r2 >= 0.05:
            return "exponential"
        if self.loglog.r2 - self.loglin.r2 >= 0.05:
            return "power-law"
        return "undecided"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", "dt", "value"])
            for trial, row in enumerate(self.values):
                for dt, v in zip(self.dts, row):
                    w.writerow([trial, dt, repr(float(v))])

    def summary(self) -> dict:
        return {
            "measure": self.measure,
            "ensemble": asdict(self.ensemble),
            "ensemble_hash": self.ensemble.hash(),
            "dts": list(self.dts),
            "mean": [float(v) for v in self.mean],
            "trials": int(self.values.shape[0]),
            "master_seed": self.master_seed,
            "trial_seeds": self.seeds,
            "window": list(self.window),
            "loglog": asdict(self.loglog),
            "loglin": asdict(self.loglin),
            "decay_model": self.decay_model,
        }


def _pairs(k: int, dt: int, max_pairs: int | None) -> list[int]:
    starts = list(range(k - dt))
    if max_pairs is not None and len(starts) > max_pairs:
        idx = np.linspace(0, len(starts) - 1, max_pairs).round().astype(int)
        starts = [starts[i] for i in sorted(set(idx))]
    return starts


def measure_curve(source, measure: str, dts: Sequence[int], instrument=None,
                  max_pairs: int | None = None) -> np.ndarray:
    """Mean over slot pairs (t, t + dt) of a measure, for each dt."""
    k = _source_k(source)
    if measure == "two_point":
        if not isinstance(source, tr.ProcessTree):
            raise TypeError("two_point sweeps need a process tree")
        A = instrument or observable_preset(source.d)
        cache = tr.TreeCache(source)
        singles = [cache.single(t, A) for t in range(k)]
        out = []
        for dt in dts:
            vals = [abs(cache.pair(t, A, t + dt, A) - singles[t] * singles[t + dt])
                    for t in _pairs(k, dt, max_pairs)]
            out.append(np.mean(vals))
        return np.asarray(out)
    if measure not in ("qmi", "negativity"):
        raise ValueError(f"unknown measure {measure!r}")
    fn = qmi_nonmarkovianity if measure == "qmi" else negativity
    src = tr.TreeCache(source) if isinstance(source, tr.ProcessTree) else source
    out = []
    for dt in dts:
        vals = [fn(two_slot_marginal(src, t, t + dt)) for t in _pairs(k, dt, max_pairs)]
        out.append(np.mean(vals))
    return np.asarray(out)


def sweep_driver(ensemble: EnsembleSpec, measure: str, dts: Sequence[int], trials: int,
                 seed: int, instrument=None, window: tuple[int, int] = (4, 10 ** 9),
                 max_pairs: int | None = None, threads: int = 1) -> SweepResult:
    """Per-trial curves over independent RNG streams spawned from ``seed``.

    Results are deterministic for a given seed regardless of ``threads``.
    """
    dts = [int(x) for x in dts]
    for dt in dts:
        if not 1 <= dt < ensemble.slots:
            raise ValueError(f"dt={dt} outside [1, {ensemble.slots})")
    children = np.random.SeedSequence(seed).spawn(trials)
    trial_seeds = [int(c.generate_state(1)[0]) for c in children]

    def run(child):
        src = ensemble.sample(np.random.default_rng(child))
        return measure_curve(src, measure, dts, instrument, max_pairs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run, children))
    else:
        rows = [run(c) for c in children]
    return SweepResult(ensemble, measure, dts, np.vstack(rows), trial_seeds, seed, tuple(window))

"""Variational fitting of process trees by 2-fidelity ascent.

Each brick's parameters are one flat real block: the real and imaginary parts
of two (W modes) or three (relaxed mode) complex D**2 x D**2 matrices, row
major, followed by D**2 reals for the brick state.  The root state adds
another D**2 reals.  A state vector holds the diagonal, then the real and
imaginary parts of the strict upper triangle.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import liouville as lv
from . import measures as ms
from . import process as pr
from . import tree as tr
from .tensors import ShapeError

log = logging.getLogger(__name__)

MODES = ("generic", "th", "sth", "relaxed")
_ALIASES = {"time_homogeneous": "th", "scale_time_homogeneous": "sth"}


def canonical_mode(mode: str) -> str:
    mode = _ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES} (or a long alias), got {mode!r}")
    return mode


def brick_count(mode: str, height: int) -> int:
    mode = canonical_mode(mode)
    if mode == "generic":
        return 2 ** height - 1
    if mode == "th":
        return height
    return 1


def _n_mats(mode: str) -> int:
    return 3 if canonical_mode(mode) == "relaxed" else 2


def block_size(mode: str, d: int) -> int:
    return 2 * _n_mats(mode) * d ** 4 + d * d


def parameter_count(mode: str, height: int, d: int) -> int:
    """Real parameters: every brick block plus the root state."""
    return brick_count(mode, height) * block_size(mode, d) + d * d


# -- projections -------------------------------------------------------------------------------

def unitize(m: np.ndarray) -> np.ndarray:
    """Nearest unitary in Frobenius norm (polar factor)."""
    u, _, vh = np.linalg.svd(m)
    return u @ vh


def hermitian_from_vector(v: np.ndarray, d: int) -> np.ndarray:
    v = np.asarray(v, float)
    if v.size != d * d:
        raise ShapeError(f"state block has {v.size} reals, expected {d * d}")
    h = np.diag(v[:d]).astype(complex)
    iu = np.triu_indices(d, 1)
    n = len(iu[0])
    h[iu] = v[d:d + n] + 1j * v[d + n:]
    h[(iu[1], iu[0])] = v[d:d + n] - 1j * v[d + n:]
    return h


def vector_from_hermitian(h: np.ndarray) -> np.ndarray:
    d = h.shape[0]
    iu = np.triu_indices(d, 1)
    return np.concatenate([np.diag(h).real, h[iu].real, h[iu].imag])


def project_state(v: np.ndarray, d: int) -> np.ndarray:
    """Hermitize, clip negative eigenvalues, renormalize; maximally mixed if nothing survives."""
    h = hermitian_from_vector(v, d)
    w, u = np.linalg.eigh(h)
    w = np.clip(w, 0, None)
    if w.sum() <= 1e-14:
        return np.eye(d, dtype=complex) / d
    rho = (u * (w / w.sum())) @ u.conj().T
    return 0.5 * (rho + rho.conj().T)


# -- parameters --------------------------------------------------------------------------------

@dataclass
class TreeParams:
    """Raw (pre-projection) parameters of a tree ansatz."""

    mode: str
    d: int
    height: int
    blocks: list
    root: np.ndarray

    def __post_init__(self):
        self.mode = canonical_mode(self.mode)
        want = brick_count(self.mode, self.height)
        if len(self.blocks) != want:
            raise ShapeError(f"mode {self.mode} at height {self.height} needs {want} blocks, got {len(self.blocks)}")
        size = block_size(self.mode, self.d)
        for b in self.blocks:
            if np.asarray(b).size != size:
                raise ShapeError(f"brick block has {np.asarray(b).size} reals, expected {size}")
        if np.asarray(self.root).size != self.d ** 2:
            raise ShapeError(f"root block has {np.asarray(self.root).size} reals, expected {self.d ** 2}")

    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(b, float) for b in self.blocks] + [np.asarray(self.root, float)])

    def with_vector(self, x: np.ndarray) -> "TreeParams":
        size = block_size(self.mode, self.d)
        n = len(self.blocks)
        blocks = [x[i * size:(i + 1) * size].copy() for i in range(n)]
        return TreeParams(self.mode, self.d, self.height, blocks, x[n * size:].copy())

    @classmethod
    def random(cls, mode: str, d: int, height: int, rng: np.random.Generator) -> "TreeParams":
        mode = canonical_mode(mode)
        size = block_size(mode, d)
        nm = _n_mats(mode) * 2 * d ** 4
        blocks = []
        for _ in range(brick_count(mode, height)):
            state = vector_from_hermitian(np.eye(d) / d) + 0.3 * rng.normal(size=d * d)
            blocks.append(np.concatenate([rng.normal(size=nm), state]))
            assert blocks[-1].size == size
        root = vector_from_hermitian(np.eye(d) / d) + 0.3 * rng.normal(size=d * d)
        return cls(mode, d, height, blocks, root)


def _mats_of_block(block: np.ndarray, mode: str, d: int) -> list[np.ndarray]:
    dd = d * d
    nm = _n_mats(mode)
    mats = []
    for m in range(nm):
        off = 2 * m * dd * dd
        re = block[off:off + dd * dd].reshape(dd, dd)
        im = block[off + dd * dd:off + 2 * dd * dd].reshape(dd, dd)
        mats.append(re + 1j * im)
    return mats


def _block_of(mats, rho) -> np.ndarray:
    parts = []
    for m in mats:
        parts += [m.real.ravel(), m.imag.ravel()]
    parts.append(vector_from_hermitian(rho))
    return np.concatenate(parts)


def realize_brick(block: np.ndarray, mode: str, d: int):
    mats = [unitize(m) for m in _mats_of_block(block, mode, d)]
    rho = project_state(block[-d * d:], d)
    if canonical_mode(mode) == "relaxed":
        maps = tuple(lv.liouville_of_unitary(u, check=False) for u in mats)
        return tr.RawBrick(tr.assemble_brick(*maps, rho, d))
    return tr.WBrick.trusted(mats[0], mats[1], rho)


def realize(params: TreeParams, height: int | None = None, rho0=None) -> tr.ProcessTree:
    """Project raw parameters onto the tree family and build the tree.

    ``height`` defaults to the parameters' own height; a different height is
    only meaningful for single-brick modes, where the brick is tiled.
    """
    height = params.height if height is None else height
    mode, d = params.mode, params.d
    bricks = [realize_brick(b, mode, d) for b in params.blocks]
    rho0 = project_state(params.root, d) if rho0 is None else rho0
    prov = {"mode": mode, "fit_height": params.height}
    if mode in ("sth", "relaxed"):
        return tr.build_tree(bricks[0], rho0, height, "sth", prov)
    if height != params.height:
        raise ValueError(f"mode {mode} parameters cannot be tiled to a different height")
    if mode == "th":
        return tr.build_tree(bricks, rho0, height, "th", prov)
    levels, i = [], 0
    for s in range(1, height + 1):
        levels.append(bricks[i:i + 2 ** (s - 1)])
        i += 2 ** (s - 1)
    return tr.build_tree(levels, rho0, height, "generic", prov)


def params_of_tree(tree: tr.ProcessTree, mode: str) -> TreeParams:
    """Read the raw parameters back out of a W tree (unitaries and states stored as-is)."""
    mode = canonical_mode(mode)
    if mode == "relaxed":
        raise ValueError("relaxed bricks keep only their Liouville maps; read-back needs W bricks")
    if mode == "sth":
        bricks = [tree.brick(1, 0)]
    elif mode == "th":
        bricks = [tree.brick(s, 0) for s in range(1, tree.height + 1)]
    else:
        bricks = [b for level in tree.levels for b in level]
    blocks = []
    for b in bricks:
        if not isinstance(b, tr.WBrick):
            raise TypeError(f"read-back needs W bricks, got {type(b).__name__}")
        blocks.append(_block_of([np.asarray(b.u1), np.asarray(b.u2)], np.asarray(b.rho)))
    return TreeParams(mode, tree.d, tree.height, blocks, vector_from_hermitian(np.asarray(tree.rho0)))


# -- objective ---------------------------------------------------------------------------------

def _realize_indexed(params: TreeParams):
    """Tree plus a map from each brick object to its parameter block index."""
    tree = realize(params)
    owner = {}
    if params.mode in ("sth", "relaxed"):
        owner[id(tree.brick(1, 0))] = 0 if tree.height else None
    elif params.mode == "th":
        for s in range(1, tree.height + 1):
            owner[id(tree.brick(s, 0))] = s - 1
    else:
        i = 0
        for level in tree.levels:
            for b in level:
                owner[id(b)] = i
                i += 1
    return tree, owner


class Objective:
    """F2 between the realized tree and a fixed target, with the target norm cached.

    For dense targets :meth:`value_and_grad` runs reverse mode through the
    fine-graining chain of the densified tree.  The Jacobian of each brick
    tensor (and of the root state) with respect to its raw block is taken by
    central differences, so the result equals the chain rule applied to a
    finite-difference derivative of the cheap projection step.
    """

    def __init__(self, template: TreeParams, target):
        self.template = template
        self.target = target
        self.dense = not isinstance(target, tr.ProcessTree)
        if not self.dense:
            if target.height != template.height or target.d != template.d:
                raise ShapeError("target tree shape does not match the ansatz")
        else:
            pr.dense_guard(template.d, 2 ** template.height)
            t = target.data if isinstance(target, pr.ProcessTensor) else np.asarray(target)
            if t.shape != ((template.d ** 2,) * (2 * 2 ** template.height)):
                raise ShapeError(f"target of shape {t.shape} does not match a height-{template.height} tree")
            self.target_data = np.asarray(t, dtype=complex)
        self.target_norm = ms.hs_overlap(target, target).real
        self.calls = 0

    def _model(self, x: np.ndarray):
        t = realize(self.template.with_vector(x))
        return tr.densify(t) if self.dense else t

    def __call__(self, x: np.ndarray) -> float:
        self.calls += 1
        m = self._model(x)
        xy = ms.hs_overlap(m, self.target).real
        xx = ms.hs_overlap(m, m).real
        return float(xy / max(xx, self.target_norm))

    def value_and_grad(self, x: np.ndarray, h: float = 1e-5) -> tuple[float, np.ndarray]:
        if not self.dense:
            return self(x), fd_gradient(self, x, h)
        self.calls += 1
        params = self.template.with_vector(x)
        tree, owner = _realize_indexed(params)
        d = tree.d
        # forward: keep every intermediate process for the backward pass
        p = tree.root
        tape = []
        for s in range(1, tree.height + 1):
            for j in range(2 ** (s - 1) - 1, -1, -1):
                b = tree.brick(s, j)
                k = p.ndim // 2
                a = 2 * (k - 1 - j)
                tape.append((p, a, b))
                out = np.tensordot(p, b.tensor, axes=([a, a + 1], [0, 1]))
                p = np.moveaxis(out, [-4, -3, -2, -1], [a, a + 1, a + 2, a + 3])
        T = self.target_data
        xy = float(np.vdot(T, p).real)
        xx = float(np.vdot(p, p).real)
        if xx >= self.target_norm:
            value = xy / xx
            G = T / xx - (2 * xy / xx ** 2) * p
        else:
            value = xy / self.target_norm
            G = T / self.target_norm
        # backward: G is the conjugate gradient, dF = Re sum conj(G) dX
        brick_grads = {}
        for p_in, a, b in reversed(tape):
            Gt = np.moveaxis(G, [a, a + 1, a + 2, a + 3], [-4, -3, -2, -1])
            pm = np.moveaxis(p_in, [a, a + 1], [-2, -1])
            rest = list(range(pm.ndim - 2))
            gw = np.tensordot(pm.conj(), Gt, axes=(rest, rest))
            brick_grads[id(b)] = brick_grads.get(id(b), 0) + gw
            gp = np.tensordot(Gt, b.tensor.conj(), axes=([-4, -3, -2, -1], [2, 3, 4, 5]))
            G = np.moveaxis(gp, [-2, -1], [a, a + 1])
        g_rho = np.tensordot(pr.vec_identity(d), G, axes=([0], [0]))  # over the root's vec(rho0)
        grad = np.zeros_like(x)
        size = block_size(params.mode, d)
        for bid, gw in brick_grads.items():
            i = owner[bid]
            block = params.blocks[i]
            e = np.zeros_like(block)
            for n in range(block.size):
                e[n] = h
                dW = (realize_brick(block + e, params.mode, d).tensor
                      - realize_brick(block - e, params.mode, d).tensor) / (2 * h)
                e[n] = 0.0
                grad[i * size + n] += float(np.vdot(gw, dW).real)
        off = len(params.blocks) * size
        e = np.zeros(d * d)
        for n in range(d * d):
            e[n] = h
            dr = (lv.vectorize(project_state(params.root + e, d))
                  - lv.vectorize(project_state(params.root - e, d))) / (2 * h)
            e[n] = 0.0
            grad[off + n] = float(np.vdot(g_rho, dr).real)
        return float(value), grad


def objective(params: TreeParams, target) -> float:
    return Objective(params, target)(params.vector())


def fd_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences, one coordinate at a time."""
    g = np.empty_like(x)
    e = np.zeros_like(x)
    for i in range(x.size):
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
        e[i] = 0.0
    return g


def gradient(params: TreeParams, target, h: float = 1e-5, method: str = "adjoint") -> np.ndarray:
    """Gradient of the objective in the raw parameters.

    ``method="fd"`` differences the whole objective; ``"adjoint"`` (dense
    targets) differences only the projection step and back-propagates the rest.
    """
    f = Objective(params, target)
    if method == "fd":
        return fd_gradient(f, params.vector(), h)
    if method != "adjoint":
        raise ValueError(f"unknown gradient method {method!r}")
    return f.value_and_grad(params.vector(), h)[1]


# -- optimizer ---------------------------------------------------------------------------------

@dataclass
class FitConfig:
    max_iter: int = 500
    grad_tol: float = 1e-7
    restarts: int = 20
    fd_step: float = 1e-5
    stop_at: float | None = None  # end the restart loop once a restart reaches this F2
    lbfgs_memory: int = 10


@dataclass
class RestartLog:
    seed: int
    final_f2: float
    iterations: int
    trace: list  # best-so-far F2 after each accepted step
    message: str
    failed: bool = False


@dataclass
class FitResult:
    best: TreeParams
    best_f2: float
    restarts: list
    config: FitConfig
    master_seed: int

    def manifest(self) -> dict:
        return {
            "mode": self.best.mode,
            "height": self.best.height,
            "d": self.best.d,
            "master_seed": self.master_seed,
            "config": asdict(self.config),
            "best_f2": self.best_f2,
            "restarts": [asdict(r) for r in self.restarts],
        }


def fit(target, mode: str, height: int, d: int = 2, seed: int = 0,
        config: FitConfig | None = None) -> FitResult:
    """Maximize F2 against ``target`` with L-BFGS-B from independent random starts.

    Restart seeds come from ``SeedSequence(seed).spawn``; ties in the best F2
    go to the earliest restart.  A restart that raises is logged and skipped.
    """
    cfg = config or FitConfig()
    mode = canonical_mode(mode)
    template = TreeParams.random(mode, d, height, np.random.default_rng(0))
    f = Objective(template, target)
    children = np.random.SeedSequence(seed).spawn(cfg.restarts)
    logs, best, best_f2 = [], None, -np.inf
    for child in children:
        rseed = int(child.generate_state(1)[0])
        x0 = TreeParams.random(mode, d, height, np.random.default_rng(child)).vector()
        f0 = f(x0)
        trace = [f0]
        state = {"best": f0, "x": x0.copy()}

        def track(xk):
            v = f(xk)
            if v > state["best"]:
                state["best"], state["x"] = v, xk.copy()
            trace.append(state["best"])

        try:
            def neg(x):
                v, g = f.value_and_grad(x, cfg.fd_step)
                return -v, -g

            res = minimize(neg, x0, jac=True, method="L-BFGS-B", callback=track,
                           options={"maxiter": cfg.max_iter, "gtol": cfg.grad_tol,
                                    "maxcor": cfg.lbfgs_memory})
            final = -float(res.fun)
            if final > state["best"]:
                state["best"], state["x"] = final, res.x.copy()
            logs.append(RestartLog(rseed, state["best"], int(res.nit), trace, str(res.message)))
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as err:
            log.warning("restart with seed %d failed: %s", rseed, err)
            logs.append(RestartLog(rseed, state["best"], len(trace) - 1, trace, str(err), True))
        if state["best"] > best_f2:
            best_f2, best = state["best"], template.with_vector(state["x"])
        if cfg.stop_at is not None and best_f2 >= cfg.stop_at:
            break
    return FitResult(best, float(best_f2), logs, cfg, seed)


def generalize(params: TreeParams, height: int) -> tr.ProcessTree:
    """Tile a single fitted brick to a taller tree."""
    if params.mode not in ("sth", "relaxed"):
        raise ValueError(f"only single-brick modes generalize, got {params.mode}")
    if height < params.height:
        raise ValueError(f"target height {height} is below the fit height {params.height}")
    return realize(params, height)


def save_fit(result: FitResult, stem) -> None:
    """Fit manifest (JSON) plus the best tree in the tree format."""
    tree = realize(result.best)
    tr.save_tree(tree, f"{stem}.tree")
    m = result.manifest()
    m["best_params"] = result.best.vector().tolist()
    with open(f"{stem}.json", "w") as fh:
        json.dump(m, fh, indent=2, sort_keys=True)


def load_params(stem) -> TreeParams:
    with open(f"{stem}.json") as fh:
        m = json.load(fh)
    template = TreeParams.random(m["mode"], m["d"], m["height"], np.random.default_rng(0))
    return template.with_vector(np.asarray(m["best_params"], float))

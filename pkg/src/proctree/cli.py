"""Batch front-end: seeded runners that write CSV and JSON for external plotting.

Every command can take its options from a JSON config file
(``{"version": 1, "command": ..., "options": {...}}``); command-line flags win
over the file.  The resolved options, minus output paths and thread count, are
hashed and the hash is stamped into every output along with the tool version
and all seeds.

Exit codes: 0 success, 2 invariant failure, 3 convergence failure, 4 config/IO.
"""
from __future__ import annotations

import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import fit as ft
from . import liouville as lv
from . import measures as ms
from . import process as pr
from . import tree as tr
from .tensors import ContractViolation, ConvergenceError, ShapeError

EXIT_OK, EXIT_INVARIANT, EXIT_CONVERGENCE, EXIT_CONFIG = 0, 2, 3, 4
CONFIG_VERSION = 1
# options that do not change results and are left out of the config hash
_UNHASHED = {"out", "threads"}

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    command: str
    options: dict = field(default_factory=dict)
    version: int = CONFIG_VERSION

    def canonical(self) -> str:
        opts = {k: v for k, v in self.options.items() if k not in _UNHASHED}
        return json.dumps({"version": self.version, "command": self.command, "options": opts},
                          sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        raw = json.loads(text)
        if not isinstance(raw, dict) or "command" not in raw:
            raise ValueError("config needs a 'command' entry")
        if raw.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {raw.get('version')}")
        opts = raw.get("options", {})
        if not isinstance(opts, dict):
            raise ValueError("config 'options' must be an object")
        return cls(raw["command"], opts, CONFIG_VERSION)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())


class InvariantFailure(Exception):
    """A structural check failed; maps to exit code 2."""


def _config_of(ctx: click.Context) -> ExperimentConfig:
    opts = {k: (list(v) if isinstance(v, tuple) else v) for k, v in ctx.params.items()}
    return ExperimentConfig(ctx.info_name, opts)


def _stamp(ctx: click.Context, payload: dict, seeds=None) -> dict:
    cfg = _config_of(ctx)
    out = dict(payload)
    out["config"] = {k: v for k, v in cfg.options.items() if k not in _UNHASHED}
    out["config_hash"] = cfg.hash()
    out["version"] = __version__
    if seeds is not None:
        out["seeds"] = seeds
    return out


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _cplx(z) -> list[float]:
    z = complex(z)
    return [z.real, z.imag]


def _parse_dts(text: str) -> list[int]:
    """Comma list of integers, or a power-of-two range ``pow2:lo:hi``."""
    text = text.strip()
    if text.startswith("pow2:"):
        _, lo, hi = text.split(":")
        return [2 ** n for n in range(int(lo), int(hi) + 1)]
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as err:
        raise click.BadParameter(f"cannot parse dt grid {text!r}") from err


def _load_any(path: str):
    """A tree (``proctree-tree/1`` manifest) or a dense process sidecar."""
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".bin") else p
    meta_path = stem.parent / f"{stem.name}.json"
    meta = json.loads(meta_path.read_text())
    if meta.get("format") == "proctree-tree/1":
        return tr.load_tree(stem)
    if "k" in meta and "d" in meta:
        return pr.ProcessTensor.load(stem)
    raise ValueError(f"{meta_path} is neither a tree nor a process file")


# -- shared options ----------------------------------------------------------------------------

def _ensemble_options(f):
    opts = [
        click.option("--d", "d", type=int, default=2, show_default=True, help="slot dimension"),
        click.option("--height", type=int, default=8, show_default=True, help="tree height N"),
        click.option("--kind", type=click.Choice(["haar", "hamiltonian", "mpo"]), default="haar",
                     show_default=True),
        click.option("--beta", type=float, default=None, help="randomness for kind=hamiltonian"),
        click.option("--homogeneity", type=click.Choice(["sth", "th", "generic"]), default="sth",
                     show_default=True),
        click.option("--d-e", "d_e", type=int, default=2, show_default=True,
                     help="environment dimension for kind=mpo"),
        click.option("--k", "k", type=int, default=14, show_default=True, help="slots for kind=mpo"),
        click.option("--gue-variance", type=float, default=1.0, show_default=True,
                     help="entry variance of the GUE draw for kind=hamiltonian"),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _seed_option(f):
    return click.option("--seed", type=int, default=0, show_default=True, help="master seed")(f)


def _threads_option(f):
    return click.option("--threads", type=int, default=1, show_default=True,
                        envvar="PROCTREE_THREADS", help="worker threads (env PROCTREE_THREADS)")(f)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON config whose options act as defaults for the command")
@click.option("-v", "--verbose", is_flag=True)
@click.version_option(__version__, prog_name="proctree")
@click.pass_context
def cli(ctx, config_path, verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if config_path:
        try:
            cfg = ExperimentConfig.load(config_path)
        except (OSError, ValueError) as err:
            raise click.BadParameter(str(err), param_hint="--config") from err
        ctx.default_map = {cfg.command: cfg.options}


# -- sample-tree -------------------------------------------------------------------------------

@cli.command("sample-tree")
@_ensemble_options
@_seed_option
@click.option("--out", required=True, help="output stem; writes <out>.json, .bin files and <out>.manifest.json")
@click.pass_context
def sample_tree_cmd(ctx, d, height, kind, beta, homogeneity, d_e, k, gue_variance, seed, out):
    """Sample a uniform W tree and write it with a manifest."""
    if kind == "mpo":
        raise click.BadParameter("sample-tree draws trees; kind=mpo is a sweep source", param_hint="--kind")
    tree = tr.sample_uniform_tree(d, height, np.random.default_rng(seed), kind, beta, homogeneity,
                                  gue_variance)
    tr.save_tree(tree, out)
    stem = Path(out)
    _write_json(stem.parent / f"{stem.name}.manifest.json",
                _stamp(ctx, {"tree": f"{stem.name}.json", "height": height, "d": d}, [seed]))
    click.echo(f"wrote {stem}.json")
    return EXIT_OK


# -- sweeps ------------------------------------------------------------------------------------

def _sweep(ctx, measure, d, height, kind, beta, homogeneity, d_e, k, gue_variance, dts, trials,
           seed, threads, max_pairs, window_lo, out):
    ens = ms.EnsembleSpec(d, height, kind, beta, homogeneity, d_e, k, gue_variance)
    grid = _parse_dts(dts)
    res = ms.sweep_driver(ens, measure, grid, trials, seed, window=(window_lo, 10 ** 9),
                          max_pairs=max_pairs, threads=threads)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    res.write_csv(outdir / f"{measure}.csv")
    summary = _stamp(ctx, res.summary(), {"master": seed, "trials": res.seeds})
    _write_json(outdir / f"{measure}.json", summary)
    click.echo(f"{measure}: loglog slope {res.loglog.slope:.4f} (R2 {res.loglog.r2:.3f}), "
               f"loglin R2 {res.loglin.r2:.3f}, model {res.decay_model}")
    return EXIT_OK


def _sweep_command(name, measure, default_dts, doc):
    @cli.command(name, help=doc)
    @_ensemble_options
    @click.option("--dts", default=default_dts, show_default=True,
                  help="dt grid: comma list or pow2:lo:hi")
    @click.option("--trials", type=int, default=10, show_default=True)
    @_seed_option
    @_threads_option
    @click.option("--max-pairs", type=int, default=None, help="cap on slot pairs per dt")
    @click.option("--window-lo", type=int, default=4, show_default=True,
                  help="smallest dt entering the slope fits")
    @click.option("--out", required=True, help="output directory")
    @click.pass_context
    def cmd(ctx, **kw):
        return _sweep(ctx, measure, **kw)

    return cmd


_sweep_command("correlators", "two_point", "pow2:2:7",
               "Mean |connected two-point correlator| vs dt for the preset instrument.")
_sweep_command("nonmarkov", "qmi", "1,2,4,8,16,32,64,128",
               "Mutual-information non-Markovianity of two-slot marginals vs dt.")
_sweep_command("negativity", "negativity", "1,2,3,4,6,8,10,12,16",
               "Temporal entanglement negativity of two-slot marginals vs dt.")


# -- spectrum ----------------------------------------------------------------------------------

@cli.command("spectrum")
@click.option("--tree", "tree_path", default=None, help="tree stem; sampled from the ensemble flags if absent")
@_ensemble_options
@_seed_option
@click.option("--n-min", type=int, default=3, show_default=True)
@click.option("--n-max", type=int, default=7, show_default=True)
@click.option("--tol-eig", type=float, default=1e-10, show_default=True, help="eigensolver residual")
@click.option("--tol-fixed-point", type=float, default=1e-8, show_default=True,
              help="bound on the leading-eigenpair residual")
@click.option("--out", required=True, help="output JSON path")
@click.pass_context
def spectrum_cmd(ctx, tree_path, d, height, kind, beta, homogeneity, d_e, k, gue_variance, seed,
                 n_min, n_max, tol_eig, tol_fixed_point, out):
    """Transfer spectrum of a scale-consistent tree and the anchored-correlator slope."""
    if tree_path:
        tree = tr.load_tree(tree_path)
    else:
        tree = tr.sample_uniform_tree(d, height, np.random.default_rng(seed), kind, beta, "sth",
                                      gue_variance)
    if tree.homogeneity != "sth":
        raise click.BadParameter("spectrum needs a single-brick (sth) tree")
    if not 1 <= n_min < n_max <= tree.height:
        raise click.BadParameter(f"need 1 <= n-min < n-max <= {tree.height}")
    brick = tree.brick(1, 0)
    try:
        sp = tr.transfer_spectrum(tr.transfer_maps(brick), tol_eig)
    except ConvergenceError as err:
        raise ConvergenceError(f"{err}; try a looser --tol-eig", err.best_residual) from err
    A = ms.observable_preset(tree.d)
    ns = list(range(n_min, n_max + 1))
    corr = [abs(tr.anchored_correlator(tree, A, A, n)) for n in ns]
    fitline = ms.regress(ns, np.log2(np.maximum(corr, 1e-300)))
    measured = -fitline.slope
    payload = {
        "lambda1": _cplx(sp.lambda1),
        "lambda1_residual": sp.v1_residual,
        "lambda2_left": _cplx(sp.lambda2_left),
        "lambda2_right": _cplx(sp.lambda2_right),
        "mu_right": _cplx(sp.mu_right),
        "alpha_pred": sp.alpha_pred,
        "alpha_anchored": sp.alpha_anchored,
        "degenerate": sp.degenerate,
        "anchored": {
            "n": ns,
            "dt": [2 ** n - 1 for n in ns],
            "abs_correlator": corr,
            "measured_alpha": measured,
            "r2": fitline.r2,
            "rel_err_alpha_pred": abs(measured - sp.alpha_pred) / sp.alpha_pred,
            "rel_err_alpha_anchored": abs(measured - sp.alpha_anchored) / sp.alpha_anchored,
        },
    }
    _write_json(Path(out), _stamp(ctx, payload, [seed]))
    click.echo(f"alpha_pred {sp.alpha_pred:.4f}  alpha_anchored {sp.alpha_anchored:.4f}  "
               f"measured {measured:.4f}")
    if sp.v1_residual > tol_fixed_point:
        raise InvariantFailure(f"leading eigenpair residual {sp.v1_residual:.2e} > {tol_fixed_point:.0e}")
    return EXIT_OK


# -- fit / generalize --------------------------------------------------------------------------

@cli.command("fit")
@click.option("--target", required=True, help="dense process stem or tree stem")
@click.option("--mode", type=click.Choice(list(ft.MODES) + ["time_homogeneous", "scale_time_homogeneous"]),
              default="sth", show_default=True)
@click.option("--height", type=int, default=2, show_default=True)
@click.option("--restarts", type=int, default=20, show_default=True)
@click.option("--max-iter", type=int, default=500, show_default=True)
@click.option("--grad-tol", type=float, default=1e-7, show_default=True)
@click.option("--fd-step", type=float, default=1e-5, show_default=True)
@click.option("--stop-at", type=float, default=None, help="stop restarting once this F2 is reached")
@_seed_option
@click.option("--out", required=True, help="output stem; writes <out>.json and <out>.tree.*")
@click.pass_context
def fit_cmd(ctx, target, mode, height, restarts, max_iter, grad_tol, fd_step, stop_at, seed, out):
    """Fit a tree ansatz to a target by F2 ascent."""
    tgt = _load_any(target)
    d = tgt.d
    cfg = ft.FitConfig(max_iter=max_iter, grad_tol=grad_tol, restarts=restarts,
                       fd_step=fd_step, stop_at=stop_at)
    res = ft.fit(tgt, mode, height, d, seed, cfg)
    stem = Path(out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    if res.best is not None:
        ft.save_fit(res, stem)
        manifest = json.loads((stem.parent / f"{stem.name}.json").read_text())
    else:
        manifest = res.manifest()
    _write_json(stem.parent / f"{stem.name}.json",
                _stamp(ctx, manifest, {"master": seed, "restarts": [r.seed for r in res.restarts]}))
    click.echo(f"best F2 {res.best_f2:.6f} over {len(res.restarts)} restarts")
    if res.best is None or all(r.failed for r in res.restarts):
        raise ConvergenceError("every restart failed", float("nan"))
    return EXIT_OK


@cli.command("generalize")
@click.option("--params", "params_path", required=True, help="fit stem written by `fit`")
@click.option("--height", type=int, required=True, help="height of the tiled tree")
@click.option("--target", default=None, help="optional target to score the tiled tree against")
@click.option("--out", required=True, help="output stem for the tiled tree and its manifest")
@click.pass_context
def generalize_cmd(ctx, params_path, height, target, out):
    """Tile a fitted single brick to a taller tree."""
    params = ft.load_params(params_path)
    tree = ft.generalize(params, height)
    tr.save_tree(tree, out)
    payload = {"mode": params.mode, "fit_height": params.height, "height": height}
    if target:
        payload["f2"] = ms.f2_fidelity(tree, _load_any(target))
        click.echo(f"F2 against target {payload['f2']:.6f}")
    stem = Path(out)
    _write_json(stem.parent / f"{stem.name}.manifest.json", _stamp(ctx, payload))
    return EXIT_OK


# -- demo artifacts ----------------------------------------------------------------------------

def write_demo(outdir, seed: int = 0) -> dict:
    """Deterministic demo inputs: a W tree, a Y-brick tree and a dense circuit target."""
    outdir = Path(outdir)
    rng = np.random.default_rng(seed)
    w_tree = tr.sample_uniform_tree(2, 3, rng)
    tr.save_tree(w_tree, outdir / "demo_tree")
    maps = tuple(lv.random_cptp(4, rng, rank=2) for _ in range(3))
    y = tr.YBrick(maps, lv.random_density_matrix(2, rng), 2)
    y_tree = tr.build_tree(y, np.eye(2) / 2, 2, "sth", {"demo": "y-tree", "seed": seed})
    tr.save_tree(y_tree, outdir / "demo_ytree")
    us = [lv.haar_unitary(4, rng) for _ in range(3)]
    target = pr.process_from_circuit(us, lv.random_density_matrix(4, rng), 2, 2)
    target.save(outdir / "demo_target")
    return {"tree": "demo_tree", "ytree": "demo_ytree", "target": "demo_target"}


@cli.command("demo")
@_seed_option
@click.option("--out", required=True, help="output directory")
@click.pass_context
def demo_cmd(ctx, seed, out):
    """Write the demo tree, Y-brick tree and 4-slot circuit target."""
    names = write_demo(out, seed)
    _write_json(Path(out) / "demo.manifest.json", _stamp(ctx, names, [seed]))
    for name in names.values():
        click.echo(f"wrote {Path(out) / name}.json")
    return EXIT_OK


# -- verify ------------------------------------------------------------------------------------

def _verify_tree(tree: tr.ProcessTree, tols: dict, seed: int) -> list[tuple[str, float, float, bool]]:
    rng = np.random.default_rng(seed)
    rows = []
    caus = tr.check_tree_causality(tree, rng, tol=tols["causality"])
    rows.append(("causality", caus.max_residual, tols["causality"], caus.max_residual <= tols["causality"]))
    tr_res = abs(tr.tree_trace(tree) - tree.d ** tree.k) / tree.d ** tree.k
    rows.append(("normalization", tr_res, tols["trace"], tr_res <= tols["trace"]))
    for n, b in enumerate(tree.unique_bricks()):
        sc = tr.check_scale_consistency(b)
        rows.append((f"brick{n}.scale_consistency", sc, tols["scale"], sc <= tols["scale"]))
        rep = tr.check_superprocess_validity(b, 6, rng, tol=tols["superprocess"])
        worst = max(max(rep.causality), rep.max_trace_residual, max(0.0, -min(rep.min_eigs)))
        rows.append((f"brick{n}.superprocess_validity", worst, tols["superprocess"], rep.passed))
        tm = tr.transfer_maps(b)
        cp = min(lv.choi_min_eig(tr.transfer_choi(M, tree.d)) for M in (tm.left, tm.right))
        rows.append((f"brick{n}.transfer_cp", max(0.0, -cp), tols["cp"], cp >= -tols["cp"]))
    return rows


def _verify_process(p: pr.ProcessTensor, tols: dict) -> list[tuple[str, float, float, bool]]:
    caus = pr.check_causality(p, tols["causality"])
    tr_res = abs(p.trace() - p.d ** p.k) / p.d ** p.k
    me = lv.choi_min_eig(p.choi)
    return [("causality", caus.max_residual, tols["causality"], caus.max_residual <= tols["causality"]),
            ("normalization", tr_res, tols["trace"], tr_res <= tols["trace"]),
            ("positivity", max(0.0, -me), tols["cp"], me >= -tols["cp"])]


@cli.command("verify")
@click.argument("path")
@click.option("--tol-causality", type=float, default=1e-8, show_default=True)
@click.option("--tol-trace", type=float, default=1e-6, show_default=True)
@click.option("--tol-scale", type=float, default=1e-10, show_default=True)
@click.option("--tol-superprocess", type=float, default=1e-8, show_default=True)
@click.option("--tol-cp", type=float, default=1e-9, show_default=True)
@_seed_option
@click.option("--out", default=None, help="optional JSON report path")
@click.pass_context
def verify_cmd(ctx, path, tol_causality, tol_trace, tol_scale, tol_superprocess, tol_cp, seed, out):
    """Run every structural check on a tree or process file and print residuals."""
    tols = {"causality": tol_causality, "trace": tol_trace, "scale": tol_scale,
            "superprocess": tol_superprocess, "cp": tol_cp}
    obj = _load_any(path)
    rows = _verify_tree(obj, tols, seed) if isinstance(obj, tr.ProcessTree) else _verify_process(obj, tols)
    for name, value, tol, ok in rows:
        click.echo(f"{'PASS' if ok else 'FAIL'}  {name:32s} {value:.3e}  (tol {tol:.0e})")
    if out:
        _write_json(Path(out), _stamp(ctx, {"checks": [
            {"name": n, "residual": v, "tol": t, "passed": ok} for n, v, t, ok in rows]}, [seed]))
    failed = [n for n, _, _, ok in rows if not ok]
    if failed:
        raise InvariantFailure("failed: " + ", ".join(failed))
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------------

def main(argv=None) -> int:
    """Console entry point; returns the exit code instead of raising."""
    try:
        rv = cli.main(args=argv, prog_name="proctree", standalone_mode=False)
    except click.ClickException as err:
        err.show()
        return EXIT_CONFIG
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_CONFIG
    except (InvariantFailure, ContractViolation) as err:
        click.echo(f"invariant failure: {err}", err=True)
        return EXIT_INVARIANT
    except ConvergenceError as err:
        click.echo(f"convergence failure: {err}", err=True)
        return EXIT_CONVERGENCE
    except (pr.GuardError, ShapeError, OSError, ValueError, KeyError) as err:
        click.echo(f"config/IO error: {err}", err=True)
        return EXIT_CONFIG
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

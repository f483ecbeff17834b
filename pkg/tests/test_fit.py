import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proctree import fit as ft
from proctree import liouville as lv
from proctree import measures as ms
from proctree import process as pr
from proctree import tree as tr
from proctree.tensors import ShapeError

seeds = st.integers(0, 2 ** 32 - 1)


def small_config(**kw):
    base = dict(max_iter=60, restarts=2)
    base.update(kw)
    return ft.FitConfig(**base)


# -- bookkeeping -------------------------------------------------------------------------------

def test_parameter_count():
    d = 2
    state = d * d
    w_block = 2 * 2 * d ** 4 + state  # two complex D^2 x D^2 matrices and a brick state
    r_block = 3 * 2 * d ** 4 + state
    for n in range(1, 6):
        assert ft.parameter_count("generic", n, d) == (2 ** n - 1) * w_block + state
        assert ft.parameter_count("th", n, d) == n * w_block + state
        assert ft.parameter_count("sth", n, d) == w_block + state
        assert ft.parameter_count("relaxed", n, d) == r_block + state
        for mode in ft.MODES:
            p = ft.TreeParams.random(mode, d, n, np.random.default_rng(n))
            assert p.vector().size == ft.parameter_count(mode, n, d)


def test_mode_aliases():
    assert ft.canonical_mode("scale_time_homogeneous") == "sth"
    assert ft.canonical_mode("time_homogeneous") == "th"
    with pytest.raises(ValueError):
        ft.canonical_mode("free")


def test_params_shape_checks():
    p = ft.TreeParams.random("th", 2, 3, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        ft.TreeParams("th", 2, 3, p.blocks[:2], p.root)
    with pytest.raises(ShapeError):
        ft.TreeParams("th", 2, 3, [b[:-1] for b in p.blocks], p.root)
    with pytest.raises(ShapeError):
        ft.TreeParams("th", 2, 3, p.blocks, p.root[:3])


# -- projections -------------------------------------------------------------------------------

def test_unitize_fixed_point_and_scale(rng):
    u = lv.haar_unitary(4, rng)
    assert np.abs(ft.unitize(u) - u).max() < 1e-12
    assert np.abs(ft.unitize(2 * u) - u).max() < 1e-12


def test_unitize_is_nearest(rng):
    m = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    u = ft.unitize(m)
    best = np.linalg.norm(m - u)
    for _ in range(50):
        assert np.linalg.norm(m - lv.haar_unitary(4, rng)) >= best - 1e-12


def test_project_state(rng):
    rho = lv.random_density_matrix(2, rng)
    assert np.abs(ft.project_state(ft.vector_from_hermitian(rho), 2) - rho).max() < 1e-12
    neg = ft.vector_from_hermitian(-np.eye(2))
    assert np.abs(ft.project_state(neg, 2) - np.eye(2) / 2).max() == 0
    clipped = ft.project_state(ft.vector_from_hermitian(np.diag([2.0, -1.0])), 2)
    assert np.abs(clipped - np.diag([1.0, 0.0])).max() < 1e-14


def test_relaxed_brick_valid_not_consistent(rng):
    p = ft.TreeParams.random("relaxed", 2, 1, rng)
    b = ft.realize_brick(p.blocks[0], "relaxed", 2)
    assert tr.check_superprocess_validity(b, 5, rng).passed
    assert tr.check_scale_consistency(b) > 1e-3


def test_w_modes_realize_valid_trees(rng):
    for mode in ("generic", "th", "sth"):
        t = ft.realize(ft.TreeParams.random(mode, 2, 2, rng))
        assert all(tr.check_scale_consistency(b) < 1e-10 for b in t.unique_bricks())
        assert pr.check_causality(tr.densify(t)).passed


# -- round trip and objective ------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["generic", "th", "sth"])
def test_round_trip(rng, mode):
    t = tr.sample_uniform_tree(2, 3, rng, homogeneity=mode)
    back = ft.realize(ft.params_of_tree(t, mode))
    for s in range(1, 4):
        for j in range(2 ** (s - 1)):
            assert np.abs(back.brick(s, j).tensor - t.brick(s, j).tensor).max() < 1e-12
    assert np.abs(back.rho0 - t.rho0).max() < 1e-12


def test_round_trip_rejects_relaxed(rng):
    t = tr.sample_uniform_tree(2, 2, rng)
    with pytest.raises(ValueError):
        ft.params_of_tree(t, "relaxed")


def test_objective_self_target(rng):
    p = ft.TreeParams.random("th", 2, 2, rng)
    target = tr.densify(ft.realize(p))
    assert abs(ft.objective(p, target) - 1) < 1e-12
    assert abs(ft.objective(p, ft.realize(p)) - 1) < 1e-12


def test_objective_scale_invariance(rng):
    p = ft.TreeParams.random("sth", 2, 2, rng)
    target = tr.densify(tr.sample_uniform_tree(2, 2, rng))
    f = ft.objective(p, target)
    blk = p.blocks[0].copy()
    nm = 2 * 2 * 2 ** 4
    blk[:nm] *= 3.7
    blk[nm:] *= 0.4
    q = ft.TreeParams("sth", 2, 2, [blk], 2.5 * p.root)
    assert abs(ft.objective(q, target) - f) < 1e-12


def test_objective_bounded(rng):
    target = tr.densify(tr.sample_uniform_tree(2, 2, rng))
    vals = []
    for _ in range(500):
        p = ft.TreeParams.random("sth", 2, 2, rng)
        vals.append(ft.objective(p, target))
    assert max(vals) < 1 - 1e-6
    assert min(vals) > -1e-12


@settings(max_examples=5, deadline=None)
@given(seeds)
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = ft.TreeParams.random("sth", 2, 2, rng)
    target = tr.densify(tr.sample_uniform_tree(2, 2, rng))
    g = ft.gradient(p, target)
    oracle = ft.gradient(p, target, h=1e-6, method="fd")
    assert np.abs(g - oracle).max() / np.abs(oracle).max() <= 1e-3


def test_gradient_generic_mode(rng):
    p = ft.TreeParams.random("generic", 2, 2, rng)
    target = tr.densify(tr.sample_uniform_tree(2, 2, rng, homogeneity="generic"))
    g = ft.gradient(p, target)
    oracle = ft.gradient(p, target, h=1e-6, method="fd")
    assert np.abs(g - oracle).max() / np.abs(oracle).max() <= 1e-3


def test_gradient_relaxed_mode(rng):
    p = ft.TreeParams.random("relaxed", 2, 2, rng)
    target = tr.densify(tr.sample_uniform_tree(2, 2, rng))
    g = ft.gradient(p, target)
    oracle = ft.gradient(p, target, h=1e-6, method="fd")
    assert np.abs(g - oracle).max() / np.abs(oracle).max() <= 1e-3
    with pytest.raises(ValueError):
        ft.gradient(p, target, method="autodiff")


def test_value_and_grad_value(rng):
    p = ft.TreeParams.random("th", 2, 2, rng)
    target = tr.densify(tr.sample_uniform_tree(2, 2, rng))
    f = ft.Objective(p, target)
    v, _ = f.value_and_grad(p.vector())
    assert abs(v - f(p.vector())) < 1e-12


# -- optimizer ---------------------------------------------------------------------------------

def test_fit_deterministic_and_monotone(rng):
    target = tr.densify(tr.sample_uniform_tree(2, 2, rng))
    a = ft.fit(target, "sth", 2, seed=7, config=small_config(max_iter=30))
    b = ft.fit(target, "sth", 2, seed=7, config=small_config(max_iter=30))
    assert a.best_f2 == b.best_f2
    assert np.abs(a.best.vector() - b.best.vector()).max() == 0
    for r in a.restarts:
        assert all(y >= x for x, y in zip(r.trace, r.trace[1:]))
        assert not r.failed
    assert a.best_f2 == max(r.final_f2 for r in a.restarts)
    assert abs(ft.objective(a.best, target) - a.best_f2) < 1e-12


def test_fit_stop_at(rng):
    target = tr.densify(tr.sample_uniform_tree(2, 2, rng))
    res = ft.fit(target, "sth", 2, seed=1, config=small_config(max_iter=5, restarts=5, stop_at=-1.0))
    assert len(res.restarts) == 1


def test_fit_improves_on_start(rng):
    target = tr.densify(tr.sample_uniform_tree(2, 2, rng))
    res = ft.fit(target, "sth", 2, seed=3, config=small_config(restarts=1))
    assert res.best_f2 > res.restarts[0].trace[0] + 0.05


def test_fit_markovian_target():
    reset = lv.superop_of_kraus([np.kron(np.outer(np.eye(2)[0], e), np.eye(2)) for e in np.eye(2)])
    rho = np.diag([1.0, 0.0])
    target = pr.process_from_maps([reset] * 3, np.kron(rho, rho), 2, 2)
    res = ft.fit(target, "sth", 2, seed=0, config=ft.FitConfig(max_iter=300, restarts=4, stop_at=0.95))
    assert res.best_f2 >= 0.95


def test_generalize(rng):
    p = ft.TreeParams.random("sth", 2, 2, rng)
    same = ft.generalize(p, 2)
    base = ft.realize(p)
    assert np.abs(tr.densify(same).data - tr.densify(base).data).max() == 0
    tall = ft.generalize(p, 4)
    assert tall.height == 4
    assert tr.check_tree_causality(tall, rng).passed
    assert tr.check_scale_consistency(tall.brick(1, 0)) < 1e-10
    with pytest.raises(ValueError):
        ft.generalize(ft.TreeParams.random("th", 2, 2, rng), 3)
    with pytest.raises(ValueError):
        ft.generalize(p, 1)


def test_save_and_load(tmp_path, rng):
    target = tr.densify(tr.sample_uniform_tree(2, 2, rng))
    res = ft.fit(target, "sth", 2, seed=2, config=small_config(max_iter=10, restarts=1))
    ft.save_fit(res, tmp_path / "fit")
    p = ft.load_params(tmp_path / "fit")
    assert np.abs(p.vector() - res.best.vector()).max() == 0
    m = json.loads((tmp_path / "fit.json").read_text())
    assert m["master_seed"] == 2 and m["config"]["restarts"] == 1
    t = tr.load_tree(tmp_path / "fit.tree")
    assert abs(ms.f2_fidelity(t, target) - res.best_f2) < 1e-10

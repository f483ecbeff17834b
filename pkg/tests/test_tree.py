import json

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from proctree import liouville as lv
from proctree import measures as ms
from proctree import process as pr
from proctree import tree as tr
from proctree.tensors import ContractViolation, ShapeError

from conftest import rand_c

seeds = st.integers(0, 2 ** 32 - 1)
CUP = tr.cup(2)


def haar_brick(rng):
    return tr.sample_w_brick(2, rng)


def random_slot_tensor(rng):
    return rand_c(rng, 4, 4)


def explicit_coarse(W, later, earlier):
    """Direct elementwise sum over the four fine legs."""
    D = W.shape[0]
    out = np.zeros((D, D), dtype=complex)
    for c in range(D):
        for d_ in range(D):
            for e in range(D):
                for f in range(D):
                    out += W[:, :, c, d_, e, f] * later[c, d_] * earlier[e, f]
    return out


# -- bricks --------------------------------------------------------------------------------------

def test_ybrick_identity_threading(rng):
    eye = np.eye(16)
    rho = np.diag([1.0, 0.0])  # pure state on the fine wire
    b = tr.YBrick((eye, eye, eye), rho, 2)
    p = tr.fine_grain(pr.prepare_process(np.eye(2) / 2), 0, b)
    assert p.k == 2
    assert pr.check_causality(p).passed
    assert pr.is_psd(p)
    assert abs(p.trace() - 4) < 1e-12


def test_wbrick_is_special_ybrick(rng):
    u1, u2 = lv.haar_unitary(4, rng), lv.haar_unitary(4, rng)
    rho = lv.random_density_matrix(2, rng)
    w = tr.WBrick(u1, u2, rho)
    maps = tuple(lv.liouville_of_unitary(u) for u in (u2, u2.conj().T @ u1, u1.conj().T))
    y = tr.YBrick(maps, rho, 2)
    assert np.abs(w.tensor - y.tensor).max() < 1e-13
    assert np.abs(tr.wbrick_superop(w) - tr.ybrick_superop(y)).max() < 1e-13


def test_wbrick_identity_is_wiring(rng):
    rho = lv.random_density_matrix(2, rng)
    rho0 = lv.random_density_matrix(2, rng)
    b = tr.WBrick(np.eye(4), np.eye(4), rho)
    p = tr.fine_grain(pr.prepare_process(rho0), 0, b)
    # earlier slot receives rho, its response goes straight to the later slot
    want = np.einsum("a,bc,d->abcd", pr.vec_identity(2), np.eye(4), lv.vectorize(rho))
    assert np.abs(p.data - want).max() < 1e-14


def test_brick_rejects_bad_input(rng):
    with pytest.raises(ContractViolation):
        tr.WBrick(np.diag([1, 1, 1, 2.0]), np.eye(4), np.eye(2) / 2)
    with pytest.raises(ContractViolation):
        tr.YBrick((2 * np.eye(16), np.eye(16), np.eye(16)), np.eye(2) / 2, 2)
    with pytest.raises(ShapeError):
        tr.YBrick((np.eye(16), np.eye(16)), np.eye(2) / 2, 2)
    with pytest.raises(ShapeError):
        tr.assemble_brick(np.eye(16), np.eye(16), np.eye(81), np.eye(2) / 2, 2)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_wbrick_scale_consistent(seed):
    b = haar_brick(np.random.default_rng(seed))
    assert tr.check_scale_consistency(b) <= 1e-10


def test_ybrick_not_scale_consistent(rng):
    maps = tuple(lv.random_cptp(4, rng, rank=2) for _ in range(3))
    y = tr.YBrick(maps, lv.random_density_matrix(2, rng), 2)
    assert tr.check_scale_consistency(y) > 1e-2
    assert tr.check_superprocess_validity(y, 10, rng).passed


def test_wbrick_superprocess_valid(rng):
    rep = tr.check_superprocess_validity(haar_brick(rng), 10, rng)
    assert rep.passed, rep


def test_trace_increasing_brick_fails_validity(rng):
    u1, u2 = lv.haar_unitary(4, rng), lv.haar_unitary(4, rng)
    bad = tr.RawBrick(tr.assemble_brick(lv.liouville_of_unitary(u2),
                                        1.5 * lv.liouville_of_unitary(u2.conj().T @ u1),
                                        lv.liouville_of_unitary(u1.conj().T),
                                        lv.random_density_matrix(2, rng), 2))
    rep = tr.check_superprocess_validity(bad, 5, rng)
    assert not rep.passed
    assert rep.max_trace_residual > 0.1


def test_relaxed_brick_reproduces_w(rng):
    u1, u2 = lv.haar_unitary(4, rng), lv.haar_unitary(4, rng)
    rho = lv.random_density_matrix(2, rng)
    r = tr.relaxed_brick(u2, u2.conj().T @ u1, u1.conj().T, rho)
    assert np.abs(r.tensor - tr.WBrick(u1, u2, rho).tensor).max() < 1e-13
    r2 = tr.relaxed_brick(*(lv.haar_unitary(4, rng) for _ in range(3)), rho)
    assert tr.check_superprocess_validity(r2, 5, rng).passed


def test_coarse_grain_matches_explicit_sum(rng):
    W = haar_brick(rng).tensor
    A, B = random_slot_tensor(rng), random_slot_tensor(rng)
    assert np.abs(tr.coarse_grain(W, A, B) - explicit_coarse(W, A, B)).max() < 1e-12


# -- gauge -------------------------------------------------------------------------------------

def test_gauge_identity_unchanged(rng):
    b = haar_brick(rng)
    assert np.abs(tr.gauge_transform(b, np.eye(2)) - b.tensor).max() < 1e-13


def test_gauge_consistent_against_v(rng):
    b = haar_brick(rng)
    V = lv.haar_unitary(2, rng)
    WV = tr.gauge_transform(b, V)
    assert tr.check_scale_consistency(WV, pr.Instrument.unitary(V)) <= 1e-10
    assert tr.check_scale_consistency(WV) > 1e-3


def _dress_slot(data, a, Lvd):
    out = np.moveaxis(np.tensordot(Lvd, data, axes=([0], [a])), 0, a)
    return np.moveaxis(np.tensordot(Lvd, out, axes=([1], [a + 1])), 0, a + 1)


def test_gauge_tree_equals_boundary_dressed_tree(rng):
    b = haar_brick(rng)
    V = lv.haar_unitary(2, rng)
    rho0 = lv.random_density_matrix(2, rng)
    sv = scipy.linalg.sqrtm(V)
    gauged = tr.build_tree(tr.RawBrick(tr.gauge_transform(b, V)), rho0, 2, "sth")
    plain = tr.build_tree(b, sv @ rho0 @ sv.conj().T, 2, "sth")
    Lvd = lv.liouville_of_unitary(sv.conj().T, check=False)
    want = tr.densify(plain).data
    for t in range(4):
        want = _dress_slot(want, pr.slot_axes(4, t)[0], Lvd)
    assert np.abs(tr.densify(gauged).data - want).max() < 1e-10


# -- trees and the dense oracle -----------------------------------------------------------------

def test_height_zero_is_prepare_process(rng):
    rho0 = lv.random_density_matrix(2, rng)
    t = tr.build_tree(haar_brick(rng), rho0, 0, "sth")
    assert np.abs(tr.densify(t).data - pr.prepare_process(rho0).data).max() == 0


def test_height_one_is_one_brick(rng):
    b = haar_brick(rng)
    rho0 = lv.random_density_matrix(2, rng)
    t = tr.build_tree(b, rho0, 1, "sth")
    want = tr.fine_grain(pr.prepare_process(rho0), 0, b)
    assert np.abs(tr.densify(t).data - want.data).max() == 0


@pytest.mark.parametrize("homogeneity", ["sth", "th", "generic"])
def test_dense_tree_invariants(rng, homogeneity):
    t = tr.sample_uniform_tree(2, 2, rng, homogeneity=homogeneity)
    p = tr.densify(t)
    assert p.k == 4
    assert pr.check_causality(p).passed
    assert pr.is_psd(p)
    assert abs(p.trace() - 2 ** 4) < 1e-9
    assert abs(pr.apply_instruments(p) - 1) < 1e-12
    assert abs(tr.tree_trace(t) - p.trace()) < 1e-9


def test_build_tree_table_checks(rng):
    b = haar_brick(rng)
    rho0 = np.eye(2) / 2
    with pytest.raises(ValueError):
        tr.build_tree([b, b], rho0, 3, "th")
    with pytest.raises(ValueError):
        tr.build_tree([[b], [b]], rho0, 2, "generic")
    with pytest.raises(ValueError):
        tr.build_tree(b, rho0, 2, "nope")
    t = tr.build_tree([b, haar_brick(rng)], rho0, 2, "th")
    assert t.brick(2, 0) is t.brick(2, 1)


def test_h3_causality_by_probes(rng):
    t = tr.sample_uniform_tree(2, 3, rng, homogeneity="generic")
    rep = tr.check_tree_causality(t, rng)
    assert rep.passed, rep
    assert abs(rep.trace - 2 ** 8) / 2 ** 8 < 1e-9


def test_h3_probe_detects_broken_brick(rng):
    b = haar_brick(rng)
    W = b.tensor.copy()
    W[0, 1] *= -1
    t = tr.build_tree(tr.RawBrick(W), np.eye(2) / 2, 3, "sth")
    assert not tr.check_tree_causality(t, rng).passed


def test_network_oracle_matches_dense_at_h2(rng):
    t = tr.sample_uniform_tree(2, 2, rng, homogeneity="generic")
    p = tr.densify(t)
    oracle = tr.NetworkOracle(t)
    for _ in range(20):
        slots = rng.choice(4, size=int(rng.integers(1, 5)), replace=False)
        tensors = {int(s): random_slot_tensor(rng) for s in slots}
        assert abs(oracle.contract(tensors) - pr.apply_instruments(p, tensors)) < 1e-10


# -- moves and streaming expectation ------------------------------------------------------------

def test_moves_keep_cup(rng):
    b = haar_brick(rng)
    assert np.abs(tr.left_move(b, CUP) - CUP).max() < 1e-10
    assert np.abs(tr.right_move(b, CUP) - CUP).max() < 1e-10
    assert np.abs(tr.fusion_move(b, CUP, CUP) - CUP).max() < 1e-10


def test_moves_match_explicit_contraction(rng):
    b = haar_brick(rng)
    A = random_slot_tensor(rng)
    assert np.abs(tr.left_move(b, A) - explicit_coarse(b.tensor, CUP, A)).max() < 1e-10
    assert np.abs(tr.right_move(b, A) - explicit_coarse(b.tensor, A, CUP)).max() < 1e-10
    B = random_slot_tensor(rng)
    assert np.abs(tr.fusion_move(b, A, B) - explicit_coarse(b.tensor, B, A)).max() < 1e-10
    inst = pr.Instrument.unitary(lv.haar_unitary(2, rng))
    assert isinstance(tr.left_move(b, inst), pr.Instrument)


def test_expectation_empty_is_one(rng):
    t = tr.sample_uniform_tree(2, 5, rng)
    assert abs(tr.expectation(t) - 1) < 1e-10
    with pytest.raises(IndexError):
        tr.expectation(t, {32: CUP})


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_expectation_matches_dense_h2(seed):
    rng = np.random.default_rng(seed)
    t = tr.sample_uniform_tree(2, 2, rng, homogeneity="generic")
    p = tr.densify(t)
    slots = rng.choice(4, size=int(rng.integers(1, 5)), replace=False)
    assignment = {int(s): random_slot_tensor(rng) for s in slots}
    assert abs(tr.expectation(t, assignment) - pr.apply_instruments(p, assignment)) < 1e-9


def test_expectation_matches_oracle_h3(rng):
    t = tr.sample_uniform_tree(2, 3, rng, homogeneity="generic")
    oracle = tr.NetworkOracle(t)
    obs = ms.observable_preset(2)
    assert abs(tr.expectation(t, {5: obs}) - oracle.expectation({5: obs})) < 1e-9
    for _ in range(10):
        slots = rng.choice(8, size=3, replace=False)
        assignment = {int(s): random_slot_tensor(rng) for s in slots}
        assert abs(tr.expectation(t, assignment) - oracle.expectation(assignment)) < 1e-9


def test_routing_binary_expansion(rng):
    # slot 8 = 0b1000 at height 4: three left moves then one right move
    t = tr.sample_uniform_tree(2, 4, rng, homogeneity="generic")
    A = random_slot_tensor(rng)
    x = tr.left_move(t.brick(4, 4), A)
    x = tr.left_move(t.brick(3, 2), x)
    x = tr.left_move(t.brick(2, 1), x)
    x = tr.right_move(t.brick(1, 0), x)
    assert abs(np.sum(t.root * x) - tr.expectation(t, {8: A})) < 1e-12
    y = A
    c = 8
    for s in range(4, 0, -1):
        y = (tr.right_move if c & 1 else tr.left_move)(t.brick(s, c >> 1), y)
        c >>= 1
    assert abs(np.sum(t.root * y) - tr.expectation(t, {8: A})) < 1e-12


def test_expectation_at_scale(rng):
    t = tr.sample_uniform_tree(2, 3, rng, homogeneity="generic")
    A, B = random_slot_tensor(rng), random_slot_tensor(rng)
    assert tr.expectation_at_scale(t, 3, {2: A}) == tr.expectation(t, {2: A})
    assert abs(tr.expectation_at_scale(t, 0, {0: A}) - np.sum(t.root * A)) < 1e-12
    dense1 = tr.densify(t.truncate(1))
    assert abs(tr.expectation_at_scale(t, 1, {0: A, 1: B})
               - pr.apply_instruments(dense1, {0: A, 1: B})) < 1e-10
    # idle finest slots collapse to idle scale-1 slots
    for j in range(2):
        up = tr.coarse_grain(t.brick(2, j), tr.coarse_grain(t.brick(3, 2 * j + 1), CUP, CUP),
                             tr.coarse_grain(t.brick(3, 2 * j), CUP, CUP))
        assert np.abs(up - CUP).max() < 1e-10
    with pytest.raises(ValueError):
        tr.expectation_at_scale(t, 4, {})


def test_even_slot_closure(rng):
    t = tr.sample_uniform_tree(2, 4, rng, homogeneity="generic")
    A = {0: random_slot_tensor(rng), 6: random_slot_tensor(rng), 10: random_slot_tensor(rng)}
    coarse = {s // 2: tr.left_move(t.brick(4, s // 2), X) for s, X in A.items()}
    assert abs(tr.expectation(t, A) - tr.expectation(t.truncate(3), coarse)) < 1e-9


def test_move_count_linear_in_height(rng):
    counts = []
    for n in range(3, 9):
        t = tr.sample_uniform_tree(2, n, rng)
        tr.reset_move_counts()
        tr.expectation(t, {0: CUP, 2 ** n - 1: CUP})
        counts.append(sum(tr.MOVE_COUNTS.values()))
    diffs = np.diff(counts)
    assert np.all(diffs == diffs[0]) and diffs[0] == 2


# -- transfer maps -----------------------------------------------------------------------------

def test_transfer_spectrum_haar(rng):
    sp = tr.transfer_spectrum(tr.transfer_maps(haar_brick(rng)))
    assert abs(sp.lambda1 - 1) < 1e-8
    assert sp.v1_residual <= 1e-8
    assert abs(sp.lambda2_left) < 1 and abs(sp.lambda2_right) < 1
    assert not sp.degenerate
    assert abs(sp.alpha_pred - abs(np.log2(abs(sp.lambda2_left * sp.lambda2_right)))) < 1e-12
    assert abs(sp.spectral_radius_left - 1) < 1e-8 and abs(sp.spectral_radius_right - 1) < 1e-8


def test_transfer_spectrum_identity_brick_degenerate():
    b = tr.WBrick(np.eye(4), np.eye(4), np.eye(2) / 2)
    sp = tr.transfer_spectrum(tr.transfer_maps(b))
    # every subleading eigenvalue is zero, so the tie is flagged
    assert sp.subleading_degenerate
    assert abs(sp.lambda1 - 1) < 1e-10


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_transfer_maps_cp(seed):
    tm = tr.transfer_maps(haar_brick(np.random.default_rng(seed)))
    for M in (tm.left, tm.right):
        assert lv.choi_min_eig(tr.transfer_choi(M, 2)) >= -1e-9


def test_transfer_choi_of_identity_map():
    C = tr.transfer_choi(np.eye(16), 2)
    # maximally entangled projector on the 4-dimensional slot space, unnormalized
    assert abs(np.trace(C) - 4) < 1e-12
    assert abs(np.linalg.eigvalsh(C).max() - 4) < 1e-12
    assert lv.choi_min_eig(C) > -1e-12


def test_transfer_correlator_formula(rng):
    b = haar_brick(rng)
    rho0 = lv.random_density_matrix(2, rng)
    t = tr.build_tree(b, rho0, 6, "sth")
    A = ms.observable_preset(2)
    for n in range(1, 7):
        assert abs(tr.transfer_correlator(b, rho0, 6, A, A, n) - tr.anchored_correlator(t, A, A, n)) < 1e-12


# -- correlators and caches --------------------------------------------------------------------

def test_cache_pair_matches_expectation(rng):
    t = tr.sample_uniform_tree(2, 5, rng, homogeneity="generic")
    cache = tr.TreeCache(t)
    A, B = random_slot_tensor(rng), random_slot_tensor(rng)
    for t1, t2 in [(0, 1), (3, 17), (30, 4), (8, 9)]:
        assert abs(cache.pair(t1, A, t2, B) - tr.expectation(t, {t1: A, t2: B})) < 1e-10
    assert abs(cache.single(11, A) - tr.expectation(t, {11: A})) < 1e-10
    assert cache.meeting_scale(0, 1) == 5 and cache.meeting_scale(0, 31) == 1


def test_slot_pair_marginal_matches_dense(rng):
    t = tr.sample_uniform_tree(2, 2, rng, homogeneity="generic")
    cache = tr.TreeCache(t)
    p = tr.densify(t)
    for a, b in [(0, 1), (0, 3), (1, 2)]:
        assert np.abs(cache.slot_pair_marginal(a, b) - pr.marginal(p, [a, b])).max() < 1e-10


def test_connected_correlator_of_cup_vanishes(rng):
    t = tr.sample_uniform_tree(2, 4, rng)
    out = tr.two_point_sweep(t, CUP, CUP, [1, 2, 5, 15])
    assert max(out.values()) < 1e-12


def test_markovian_tree_has_no_long_correlations(rng):
    # product unitaries: no memory passes between the coarse and fine wires
    u1 = np.kron(lv.haar_unitary(2, rng), lv.haar_unitary(2, rng))
    u2 = np.kron(lv.haar_unitary(2, rng), lv.haar_unitary(2, rng))
    t = tr.build_tree(tr.WBrick(u1, u2, lv.random_density_matrix(2, rng)), np.eye(2) / 2, 3, "sth")
    A = ms.observable_preset(2)
    oracle = tr.NetworkOracle(t)
    for t1 in range(8):
        for t2 in range(t1 + 2, 8):
            joint = oracle.expectation({t1: A, t2: A})
            conn = joint - oracle.expectation({t1: A}) * oracle.expectation({t2: A})
            assert abs(conn) < 1e-9
            assert abs(tr.connected_correlator(tr.TreeCache(t), t1, A, t2, A)) < 1e-9


def test_two_point_sweep_mean(rng):
    t = tr.sample_uniform_tree(2, 3, rng)
    A = ms.observable_preset(2)
    out = tr.two_point_sweep(t, A, A, [3])
    cache = tr.TreeCache(t)
    vals = [abs(tr.connected_correlator(cache, s, A, s + 3, A)) for s in range(5)]
    assert abs(out[3] - np.mean(vals)) < 1e-14
    with pytest.raises(ValueError):
        tr.two_point_sweep(t, A, A, [8])


# -- sampling and serialization ----------------------------------------------------------------

def test_sampling_deterministic():
    a = tr.sample_uniform_tree(2, 3, np.random.default_rng(4), homogeneity="generic")
    b = tr.sample_uniform_tree(2, 3, np.random.default_rng(4), homogeneity="generic")
    assert all(np.abs(x.tensor - y.tensor).max() == 0
               for x, y in zip(a.unique_bricks(), b.unique_bricks()))


def test_hamiltonian_beta0_swap_powers(rng):
    b = tr.sample_w_brick(2, rng, "hamiltonian", 0.0)
    assert lv.proportional_up_to_phase(np.linalg.matrix_power(b.u1, 3), lv.SWAP, 1e-10)
    assert lv.proportional_up_to_phase(b.u1 @ b.u1, b.u2, 1e-10)
    with pytest.raises(ValueError):
        tr.sample_w_brick(2, rng, "hamiltonian")
    with pytest.raises(ValueError):
        tr.sample_w_brick(2, rng, "other")


def test_save_load_round_trip(tmp_path, rng):
    t = tr.sample_uniform_tree(2, 3, rng, homogeneity="th")
    tr.save_tree(t, tmp_path / "t")
    u = tr.load_tree(tmp_path / "t")
    assert u.height == 3 and u.homogeneity == "th"
    assert len(u.unique_bricks()) == 3
    for x, y in zip(t.unique_bricks(), u.unique_bricks()):
        assert np.abs(x.tensor - y.tensor).max() == 0
        assert np.abs(x.u1 - y.u1).max() == 0
    m = json.loads((tmp_path / "t.json").read_text())
    assert m["format"] == "proctree-tree/1" and m["dims"] == [2, 2, 2, 2]
    tr.save_tree(u, tmp_path / "again" / "t")
    for name in ["t.json", "t.brick0.bin", "t.rho0.bin"]:
        assert (tmp_path / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_load_raw_brick(tmp_path, rng):
    b = tr.RawBrick(tr.gauge_transform(haar_brick(rng), lv.haar_unitary(2, rng)))
    t = tr.build_tree(b, np.eye(2) / 2, 2, "sth")
    tr.save_tree(t, tmp_path / "g")
    u = tr.load_tree(tmp_path / "g.json")
    assert isinstance(u.brick(1, 0), tr.RawBrick)
    assert np.abs(u.brick(2, 1).tensor - b.tensor).max() == 0


def test_network_oracle_recurses_past_dense_limit(rng):
    t = tr.sample_uniform_tree(2, 5, rng, homogeneity="generic")
    oracle = tr.NetworkOracle(t)
    assert isinstance(oracle.parent, tr.NetworkOracle)
    A = {1: random_slot_tensor(rng), 14: random_slot_tensor(rng), 30: random_slot_tensor(rng)}
    assert abs(oracle.contract(A) - tr.expectation(t, A)) < 1e-9
    assert tr.check_tree_causality(t, rng, probes=1).passed

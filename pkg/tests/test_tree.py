import numpy as np
import pytest

from oracles import decoherence_functional
from qbranch.dynamics import Protocol
from qbranch.errors import PathOverflow, SplitRejected, ValueUndefined
from qbranch.model import computational_family, dephasing_model, philox, product_state
from qbranch.qcore import random_state
from qbranch.robservable import Tolerance
from qbranch.scenarios import coarse_downstream_scenario
from qbranch.tree import (
    SplitSpec,
    coarse_schedule,
    compare_coarse_fine,
    component_via_W,
    decoherence_matrix,
    decoherence_matrix_env,
    grow_tree,
    ivr_check,
    mixed_state,
    probability_of_value,
    tree_entropy,
)


def kicked_protocol(n=3, m=16, seed=0):
    base = dephasing_model(n, m, seed, 0.8)
    rng = philox(seed + 50)
    x = rng.standard_normal((n, n))
    x = (x + x.T) / 2
    np.fill_diagonal(x, 0)
    kick = base.with_hamiltonians(h_r=base.h_r + x)
    proto = Protocol([(0.0, base), (2.0, kick), (2.5, base), (4.5, kick), (5.0, base)])
    psi0 = product_state(random_state(n, rng), random_state(m, rng))
    return proto, psi0


def two_level_schedule(n=3):
    fam = computational_family(n)
    return [SplitSpec((0.0, 2.0), fam, 1.0), SplitSpec((2.5, 4.5), fam, 1.0)]


@pytest.fixture(scope="module")
def kicked_tree():
    proto, psi0 = kicked_protocol()
    return grow_tree(proto, psi0, two_level_schedule(), Tolerance(1e-8))


def test_decomposition_identity(kicked_tree):
    for t in np.linspace(0, 6, 13):
        comps = kicked_tree.components(t)
        assert np.linalg.norm(kicked_tree.psi(t) - comps.sum(axis=0)) <= 1e-9
        assert abs(np.sum(np.abs(comps) ** 2) - 1) <= 1e-9


def test_paths_and_split_times(kicked_tree):
    assert kicked_tree.split_times == [1.0, 3.5]
    assert len(kicked_tree.paths(0.5)) == 1
    assert len(kicked_tree.paths(2.0)) == 3
    paths = kicked_tree.paths(6.0)
    assert len(paths) == 9
    assert [p.label for p in paths] == sorted(p.label for p in paths)
    with pytest.raises(ValueError):
        kicked_tree.paths(-1.0)


def test_decoherence_matrix_matches_history_oracle(kicked_tree):
    t = 5.5
    fam = computational_family(3)
    labels, _, d_ref = decoherence_functional(kicked_tree.dyn, kicked_tree.psi0, 0.0, [1.0, 3.5], [fam, fam], t)
    d = decoherence_matrix(kicked_tree, t)
    assert d.labels == labels
    assert np.allclose(d.entries, d_ref, atol=1e-10)


def test_environment_route_matches_full_route(kicked_tree):
    for t in (1.5, 3.0, 6.0):
        a = decoherence_matrix(kicked_tree, t)
        b = decoherence_matrix_env(kicked_tree, t)
        assert a.labels == b.labels
        assert np.allclose(a.entries, b.entries, atol=1e-10)


def test_block_route_components(kicked_tree):
    for t in (1.5, 4.0, 6.0):
        for p in kicked_tree.paths(t):
            assert np.allclose(component_via_W(kicked_tree, p, t), p.component, atol=1e-10)


def test_environment_route_needs_rank_one_canonical_projectors():
    proto, psi0 = kicked_protocol()
    fam = computational_family(3, [[0, 1], [2]])
    tree = grow_tree(proto, psi0, [SplitSpec((0.0, 2.0), fam, 1.0)], Tolerance(1e-8))
    with pytest.raises(ValueError, match="rank-1"):
        decoherence_matrix_env(tree, 1.5)


def test_mixed_state_and_probability_of_value(kicked_tree):
    t = 1.0
    rho = mixed_state(kicked_tree, t)
    assert np.trace(rho).real == pytest.approx(1.0)
    probs = probability_of_value(kicked_tree, computational_family(3), t)
    assert sum(probs.values()) == pytest.approx(1.0)
    with pytest.raises(ValueUndefined):
        probability_of_value(kicked_tree, computational_family(3), 0.5)


def test_entropy_steps_only_at_splits(kicked_tree):
    s = [tree_entropy(kicked_tree, t) for t in np.linspace(0, 6, 25)]
    assert np.all(np.diff(s) >= -1e-9)
    assert tree_entropy(kicked_tree, 0.9) == pytest.approx(0.0, abs=1e-12)
    assert tree_entropy(kicked_tree, 1.0) == pytest.approx(tree_entropy(kicked_tree, 3.4), abs=1e-9)


def test_leaking_branch_is_rejected_and_continues():
    base = dephasing_model(2, 8, 0, 0.5)
    mixing = base.with_hamiltonians(h_r=np.array([[0, 0.5], [0.5, 1]]))
    proto = Protocol([(0.0, base), (2.0, mixing)])
    psi0 = product_state(np.ones(2) / np.sqrt(2), random_state(8, philox(1)))
    fam = computational_family(2)
    tree = grow_tree(proto, psi0, [SplitSpec((0.0, 2.0), fam, 1.0), SplitSpec((2.0, 4.0), fam, 1.0)])
    assert len(tree.rejections) == 2
    assert {r.split_index for r in tree.rejections} == {1}
    assert len(tree.paths(4.0)) == 2
    comps = tree.components(4.0)
    assert np.linalg.norm(tree.psi(4.0) - comps.sum(axis=0)) <= 1e-9


def test_zero_weight_children_are_pruned():
    model = dephasing_model(3, 8, 0, 0.5)
    psi0 = product_state(np.array([1.0, 0, 0]), random_state(8, philox(0)))
    tree = grow_tree(model, psi0, [SplitSpec((0.0, 1.0), computational_family(3), 0.5)])
    assert [p.label for p in tree.paths(1.0)] == [(0,)]


def test_schedule_validation():
    model = dephasing_model(2, 8, 0, 0.5)
    psi0 = product_state(np.ones(2) / np.sqrt(2), random_state(8, philox(0)))
    fam = computational_family(2)
    with pytest.raises(SplitRejected, match="shorter"):
        grow_tree(model, psi0, [SplitSpec((0.0, 1.0), fam, 2.0)])
    with pytest.raises(SplitRejected, match="outside"):
        grow_tree(model, psi0, [SplitSpec((0.0, 2.0), fam, 1.0, split_time=0.5)])
    with pytest.raises(ValueError, match="non-overlapping"):
        grow_tree(model, psi0, [SplitSpec((0.0, 2.0), fam), SplitSpec((1.0, 3.0), fam)])
    with pytest.raises(ValueError, match="dimension"):
        grow_tree(model, psi0, [SplitSpec((0.0, 2.0), computational_family(3))])


def test_path_cap():
    proto, psi0 = kicked_protocol()
    with pytest.raises(PathOverflow):
        grow_tree(proto, psi0, two_level_schedule(), Tolerance(1e-8), max_paths=4)


def test_coarse_tree_maps_onto_fine_tree():
    proto, psi0 = kicked_protocol()
    schedule = two_level_schedule()
    tol = Tolerance(1e-8)
    fine = grow_tree(proto, psi0, schedule, tol)
    coarse = grow_tree(proto, psi0, coarse_schedule(schedule, {1: {0: "a", 1: "a", 2: "b"}}), tol)
    cmp = compare_coarse_fine(fine, coarse, 6.0)
    assert cmp.passed
    assert cmp.mapping[(0, "a")] == [(0, 0), (0, 1)]
    assert cmp.max_residual <= 1e-9
    assert cmp.max_overlap_residual <= 1e-8
    assert not cmp.unassigned and not cmp.multiply_assigned


def test_compare_rejects_different_roots():
    proto, psi0 = kicked_protocol()
    other = grow_tree(proto, np.roll(psi0, 1), [], Tolerance())
    with pytest.raises(ValueError):
        compare_coarse_fine(grow_tree(proto, psi0, [], Tolerance()), other, 1.0)


def test_downstream_invalidation_is_reported():
    sc = coarse_downstream_scenario()
    verdict = ivr_check(sc.protocol, sc.psi0, sc.schedule, sc.coarse_variants, sc.t_end, Tolerance(1e-6))
    assert verdict.max_offdiag <= 1e-6
    cmp = verdict.coarse_results[0]
    assert not cmp.passed
    assert [(lab, k) for lab, k, _ in cmp.invalid_downstream] == [(("01",), 1)]
    assert cmp.max_residual <= 1e-9


def test_tree_to_dict(kicked_tree):
    d = kicked_tree.to_dict(6.0)
    assert len(d["paths"]) == 9 and len(d["splits"]) == 2
    assert sum(p["probability"] for p in d["paths"]) == pytest.approx(1.0)


def test_incremental_history_oracle_agrees_with_direct_product():
    from oracles import history_branch, history_branches

    proto, psi0 = kicked_protocol(n=2, m=4)
    fam = computational_family(2)
    labels, branches = history_branches(proto, psi0, 0.0, [1.0, 3.5], [fam, fam], 5.0)
    for lab, b in zip(labels, branches):
        hist = [(1.0, fam.projector(lab[0])), (3.5, fam.projector(lab[1]))]
        assert np.allclose(history_branch(proto, psi0, 0.0, hist, 5.0), b, atol=1e-12)


def test_single_split_weights_and_components():
    from scipy.linalg import expm

    model = dephasing_model(2, 12, 7, 0.9)
    c = np.array([0.6, 0.8j])
    phi = random_state(12, philox(7))
    tree = grow_tree(model, product_state(c, phi), [SplitSpec((0.0, 2.0), computational_family(2), 1.0)],
                     Tolerance(1e-10))
    t = 1.6
    paths = tree.paths(t)
    assert [p.probability for p in paths] == pytest.approx([0.36, 0.64], abs=1e-12)
    for mu, p in enumerate(paths):
        phi_mu = expm(-1j * model.env_block(mu, mu) * t) @ phi
        expected = np.kron(np.eye(2)[mu], c[mu] * phi_mu)
        assert np.allclose(p.component, expected, atol=1e-10)


def test_mixed_state_is_a_density_matrix(kicked_tree):
    for t in (0.5, 2.0, 6.0):
        rho = mixed_state(kicked_tree, t)
        assert np.allclose(rho, rho.conj().T, atol=1e-12)
        assert np.trace(rho).real == pytest.approx(1.0, abs=1e-10)
        assert np.linalg.eigvalsh(rho).min() >= -1e-12

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qbranch.errors import DimensionError, InvalidFamilyError
from qbranch.model import (
    EnsembleSpec,
    ProjectorFamily,
    TotalModel,
    band_center_state,
    build_nlevel_model,
    computational_family,
    dephasing_model,
    eigenprojector_family,
    family_from_basis,
    mean_level_spacing,
    perturbation_stats,
    philox,
    product_state,
    sample_ensemble,
    unit_coupling,
)
from qbranch.qcore import SpaceShape, random_unitary


def test_family_rejects_incomplete_set():
    p0 = np.diag([1.0, 0.0, 0.0])
    p1 = np.diag([0.0, 1.0, 0.0])
    with pytest.raises(InvalidFamilyError, match="identity"):
        ProjectorFamily((0, 1), (p0, p1))


def test_family_rejects_overlap_and_duplicates():
    p = np.diag([1.0, 0.0])
    q = np.array([[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(InvalidFamilyError):
        ProjectorFamily((0, 1), (p, q))
    with pytest.raises(InvalidFamilyError, match="duplicate"):
        ProjectorFamily((0, 0), (p, np.eye(2) - p))


def test_family_rejects_non_hermitian():
    p = np.array([[1.0, 1.0], [0.0, 0.0]])
    with pytest.raises(InvalidFamilyError):
        ProjectorFamily((0, 1), (p, np.eye(2) - p))


def test_family_helpers():
    fam = computational_family(4, [[0, 2], [1], [3]], labels=("a", "b", "c"))
    assert fam.ranks() == [2, 1, 1]
    iso = fam.isometry("a")
    assert np.allclose(iso @ iso.conj().T, fam.projector("a"))
    shape = SpaceShape((4, 3))
    emb = fam.embedded(shape)
    assert np.allclose(sum(emb), np.eye(12))


def test_observable_of_numeric_labels():
    fam = computational_family(3)
    assert np.allclose(fam.observable(), np.diag([0, 1, 2]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_rotated_family_is_valid(seed):
    u = random_unitary(4, philox(seed))
    fam = family_from_basis(u, [[0, 1], [2], [3]])
    assert np.allclose(sum(fam.projectors), np.eye(4), atol=1e-10)


def test_eigenprojector_family_merges_degenerate_levels():
    u = random_unitary(3, philox(8))
    h = u @ np.diag([1.0, 1.0 + 1e-12, 3.0]) @ u.conj().T
    fam = eigenprojector_family(h)
    assert sorted(fam.ranks()) == [1, 2]
    for p in fam.projectors:
        assert np.allclose(p @ h, h @ p, atol=1e-10)


def test_ensemble_reproducible_and_spacing():
    spec = EnsembleSpec("GUE", 512, 0.5, 7)
    h1, h2 = sample_ensemble(spec), sample_ensemble(spec)
    assert np.array_equal(h1, h2)
    delta = mean_level_spacing(np.linalg.eigvalsh(h1), 0.2)
    assert delta == pytest.approx(0.5, rel=0.1)


def test_goe_is_real_symmetric():
    h = sample_ensemble(EnsembleSpec("GOE", 32, 1.0, 1))
    assert np.allclose(h.imag, 0) and np.allclose(h, h.T)


def test_banded_ensemble_has_band_structure():
    h = sample_ensemble(EnsembleSpec("banded", 20, 1.0, 3, bandwidth=2))
    i, j = np.indices(h.shape)
    assert np.all(h[np.abs(i - j) > 2] == 0)
    assert np.allclose(np.diag(h).real, np.arange(20) - 9.5)


def test_ensemble_rejects_unknown_kind():
    with pytest.raises(ValueError):
        EnsembleSpec("Poisson")


def test_unit_coupling_normalization():
    v = unit_coupling(64, 3)
    assert np.mean(np.abs(v) ** 2) == pytest.approx(1.0)
    assert np.allclose(v, v.conj().T)


def test_total_model_assembly_matches_kron_sum():
    model = dephasing_model(3, 8, seed=2, strength=0.4)
    h_r, h_e = model.h_r, model.h_e
    ref = np.kron(h_r, np.eye(8)) + np.kron(np.eye(3), h_e) + model.h_i
    assert np.allclose(model.h_total, ref)
    assert model.is_dephasing()
    v = unit_coupling(8, 3)
    for mu in range(3):
        assert np.allclose(model.env_block(mu, mu), h_r[mu, mu] * np.eye(8) + h_e + 0.4 * mu * v)


def test_mixing_apparatus_breaks_dephasing_form():
    model = dephasing_model(2, 8, 0, 0.5)
    mixed = model.with_hamiltonians(h_r=np.array([[0, 0.1], [0.1, 1]]))
    assert not mixed.is_dephasing()
    assert mixed.couplings is model.couplings


def test_model_dimension_checks():
    with pytest.raises(DimensionError):
        TotalModel(SpaceShape((2, 4)), np.eye(3), np.eye(4), np.zeros((8, 8)))
    with pytest.raises(DimensionError):
        build_nlevel_model(1, [0.0], EnsembleSpec(dimension=4))
    with pytest.raises(DimensionError):
        build_nlevel_model(2, [0.0, 1.0], EnsembleSpec(dimension=4), coupling_ops=[np.eye(4)])


def test_perturbation_stats_oracle():
    model = dephasing_model(2, 64, 11, 0.3)
    stats = perturbation_stats(model, 0, 1)
    w, u = np.linalg.eigh(model.env_block(0, 0))
    diff = model.env_block(1, 1) - model.env_block(0, 0) - np.eye(64) * (model.h_r[1, 1] - model.h_r[0, 0])
    eps = np.sqrt(np.mean(np.abs(diff) ** 2))
    vt = u.conj().T @ diff @ u / eps
    off = vt[~np.eye(64, dtype=bool)]
    assert stats.epsilon == pytest.approx(eps)
    assert stats.epsilon == pytest.approx(0.3)
    assert stats.sigma_v == pytest.approx(np.std(np.diag(vt).real))
    assert stats.v_nd_sq == pytest.approx(np.mean(np.abs(off) ** 2))
    assert stats.fgr_rate == pytest.approx(2 * np.pi * eps**2 * stats.v_nd_sq / stats.delta)
    assert 2 * np.pi * stats.perturbative_border * stats.v_nd_sq == pytest.approx(stats.sigma_v * stats.delta)


def test_perturbation_stats_rejects_bad_levels():
    model = dephasing_model(2, 16, 0, 1.0)
    with pytest.raises(ValueError):
        perturbation_stats(model, 0, 0)


def test_product_state_requires_normalized_factors():
    with pytest.raises(ValueError):
        product_state(np.array([1.0, 1.0]), np.array([1.0]))
    psi = product_state(np.array([0, 1.0]), np.array([1.0, 0.0]))
    assert psi.tolist() == [0, 0, 1, 0]


def test_band_center_state_lives_in_center_window():
    h = np.diag(np.arange(40, dtype=float))
    psi = band_center_state(h, philox(0), fraction=0.25)
    support = np.flatnonzero(np.abs(psi) > 1e-14)
    assert support.min() >= 15 and support.max() <= 24
    assert np.linalg.norm(psi) == pytest.approx(1.0)


def test_offdiagonal_moment_matches_ensemble_average():
    samples = []
    for seed in range(20):
        model = dephasing_model(2, 256, 300 + seed, 0.5)
        samples.append(perturbation_stats(model, 0, 1).v_nd_sq)
    mean = np.mean(samples)
    assert np.all(np.abs(np.array(samples) / mean - 1) <= 0.1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_random_grouping_family_invariants(seed):
    rng = philox(seed)
    u = random_unitary(4, rng)
    perm = rng.permutation(4)
    cut = sorted(rng.choice([1, 2, 3], size=rng.integers(0, 3), replace=False))
    groups = [g.tolist() for g in np.split(perm, cut)]
    fam = family_from_basis(u, groups)
    assert np.allclose(sum(fam.projectors), np.eye(4), atol=1e-10)
    for i, p in enumerate(fam.projectors):
        for j, q in enumerate(fam.projectors):
            assert np.allclose(p @ q, p if i == j else 0, atol=1e-10)

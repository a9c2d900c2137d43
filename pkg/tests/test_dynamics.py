import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from qbranch.dynamics import (
    Protocol,
    TimeGrid,
    block_evolve,
    block_hamiltonians,
    evolve,
    isolatable_check,
    ntc_decompose,
    ntc_evaluate,
    ntc_leakage,
    require_ntc,
    window_times,
)
from qbranch.errors import DimensionError, NtcViolation
from qbranch.model import TotalModel, computational_family, dephasing_model, philox, product_state
from qbranch.qcore import SpaceShape, random_hermitian, random_state


def segment_model(seed, n=2, m=3):
    rng = philox(seed)
    shape = SpaceShape((n, m))
    return TotalModel(shape, random_hermitian(n, rng), random_hermitian(m, rng),
                      random_hermitian(n * m, rng, 0.3))


def dense_protocol_unitary(segments, t0, t1):
    """Product of expm over the segment pieces, forward time only."""
    starts = [s for s, _ in segments] + [np.inf]
    u = np.eye(segments[0][1].shape.total_dim, dtype=complex)
    for k, (s, model) in enumerate(segments):
        a = max(s if k else -np.inf, t0)
        b = min(starts[k + 1], t1)
        if b > a:
            u = expm(-1j * model.h_total * (b - a)) @ u
    return u


def test_time_grid():
    g = TimeGrid.spanning(1.0, 3.0, 4)
    assert np.allclose(g.times, [1.0, 1.5, 2.0, 2.5, 3.0])
    assert g.t_end == pytest.approx(3.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1.5), st.floats(0.1, 3.0))
def test_protocol_matches_expm_product(seed, t0, span):
    segs = [(0.0, segment_model(seed)), (0.8, segment_model(seed + 1)), (1.9, segment_model(seed + 2))]
    proto = Protocol(segs)
    t1 = t0 + span
    ref = dense_protocol_unitary(segs, t0, t1)
    assert np.allclose(proto.unitary(t1, t0), ref, atol=1e-10)
    assert np.allclose(proto.unitary(t0, t1), ref.conj().T, atol=1e-10)


def test_trajectory_crosses_segment_boundaries():
    segs = [(0.0, segment_model(1)), (0.5, segment_model(2))]
    proto = Protocol(segs)
    psi = random_state(6, philox(0))
    times = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    traj = proto.trajectory(psi, 0.0, times)
    for t, row in zip(times, traj):
        assert np.allclose(row, dense_protocol_unitary(segs, 0.0, t) @ psi, atol=1e-10)
    with pytest.raises(ValueError):
        proto.trajectory(psi, 0.5, times)


def test_protocol_rejects_mixed_shapes():
    with pytest.raises(DimensionError):
        Protocol([(0.0, segment_model(0)), (1.0, segment_model(1, m=4))])


def test_evolve_requires_normalized_state():
    model = segment_model(3)
    with pytest.raises(ValueError):
        evolve(model, np.ones(6), TimeGrid(0.0, 0.1, 3))
    traj = evolve(model, np.eye(6)[0], TimeGrid(0.0, 0.1, 3))
    assert np.allclose(np.linalg.norm(traj, axis=1), 1)


def test_window_times_rejects_empty_window():
    with pytest.raises(ValueError):
        window_times((1.0, 1.0))


def rabi_model(g, m=4):
    shape = SpaceShape((2, m))
    h_r = np.array([[0, g], [g, 0]], dtype=complex)
    return TotalModel(shape, h_r, np.diag(np.arange(m, dtype=float)).astype(complex),
                      np.zeros((2 * m, 2 * m), dtype=complex))


def test_ntc_leakage_rabi_closed_form():
    g = 0.7
    model = rabi_model(g)
    phi = random_state(4, philox(1))
    psi = product_state(np.array([np.sqrt(0.3), np.sqrt(0.7)]), phi)
    times = np.linspace(0, 2, 11)
    leak = ntc_leakage(model, psi, computational_family(2), times)
    assert np.allclose(leak[0], np.sqrt(0.3) * np.abs(np.sin(g * times)), atol=1e-12)
    assert np.allclose(leak[1], np.sqrt(0.7) * np.abs(np.sin(g * times)), atol=1e-12)


def test_ntc_holds_exactly_for_dephasing():
    model = dephasing_model(3, 16, 0, 0.9)
    psi = product_state(np.ones(3) / np.sqrt(3), random_state(16, philox(2)))
    rep = ntc_evaluate(model, psi, computational_family(3), (0.5, 4.0), 1e-12, samples=9)
    assert rep.verdict and rep.max_leakage < 1e-12
    require_ntc(rep)


def test_ntc_violation_reports_label():
    model = rabi_model(0.5)
    psi = product_state(np.array([1.0, 0.0]), np.eye(4)[0])
    rep = ntc_evaluate(model, psi, computational_family(2), (0.0, 1.0), 1e-3)
    assert not rep.verdict and rep.worst_label() == 0
    with pytest.raises(NtcViolation, match="label 0"):
        require_ntc(rep, "at split 0")


def test_ntc_window_before_initial_time():
    with pytest.raises(ValueError):
        ntc_evaluate(rabi_model(0.1), np.eye(8)[0], computational_family(2), (0.0, 1.0), t_init=0.5)


def test_ntc_resolution_warning(caplog):
    model = rabi_model(5.0, m=2)
    with caplog.at_level(logging.WARNING, logger="qbranch"):
        ntc_evaluate(model, np.eye(4)[0], computational_family(2), (0.0, 10.0), samples=3)
    assert "coarser" in caplog.text


def test_ntc_decompose_separates_sources():
    model = rabi_model(0.4)
    psi = product_state(np.array([1.0, 0.0]), np.eye(4)[1])
    (sys0, int0), (sys1, int1) = ntc_decompose(model, psi, computational_family(2))
    assert sys0 == pytest.approx(0.4) and int0 == 0.0
    assert sys1 == 0.0 and int1 == 0.0


def test_block_evolution_matches_projected_full_evolution():
    model = dephasing_model(3, 12, 4, 0.7)
    fam = computational_family(3, [[0, 1], [2]])
    psi = product_state(np.ones(3) / np.sqrt(3), random_state(12, philox(3)))
    times = np.linspace(0, 3, 7)
    full = model.propagator.evolve(psi, times)
    for block, p in zip(block_hamiltonians(model, fam), fam.embedded(model.shape)):
        part = block_evolve(block, p @ psi, times)
        assert np.allclose(part, full @ p.T, atol=1e-10)
        assert np.allclose(block.embedded_operator(), p @ model.h_total @ p, atol=1e-12)


def test_block_evolve_rejects_foreign_component():
    model = dephasing_model(2, 8, 0, 0.5)
    block = block_hamiltonians(model, computational_family(2))[0]
    with pytest.raises(ValueError, match="outside"):
        block_evolve(block, np.ones(16) / 4, [0.0])


def test_isolatable_closed_form():
    g, m = 0.6, 5
    model = rabi_model(g, m)
    a, b = 0.8, 0.6j
    psi = product_state(np.array([a, b]), random_state(m, philox(4)))
    times = np.linspace(0, 10, 51)
    rep = isolatable_check(model, psi, times)
    c0 = a * np.cos(g * times) - 1j * b * np.sin(g * times)
    c1 = b * np.cos(g * times) - 1j * a * np.sin(g * times)
    assert rep.isolated and rep.residual == 0.0
    assert np.allclose(rep.reduced[:, 0, 1], c0 * np.conj(c1), atol=1e-10)
    assert rep.prediction_error <= 1e-10


def test_isolatable_requires_product_state():
    model = rabi_model(0.1, 2)
    with pytest.raises(ValueError, match="product"):
        isolatable_check(model, np.array([1, 0, 0, 1]) / np.sqrt(2), [0.0, 1.0])


def test_coupled_model_is_not_isolated():
    model = dephasing_model(2, 16, 1, 1.0)
    psi = product_state(np.ones(2) / np.sqrt(2), random_state(16, philox(0)))
    assert not isolatable_check(model, psi, np.linspace(0, 1, 5)).isolated


def test_step_doubling_agrees():
    rng = philox(31)
    model = TotalModel(SpaceShape((2, 8)), random_hermitian(2, rng), random_hermitian(8, rng),
                       random_hermitian(16, rng, 0.2))
    proto = Protocol.from_model(model)
    psi = random_state(16, rng)
    whole = proto.propagate(psi, 0.0, 2.0)
    halves = proto.propagate(proto.propagate(psi, 0.0, 1.0), 1.0, 2.0)
    assert np.allclose(whole, halves, atol=1e-9)


def test_commuting_uncoupled_family_never_leaks():
    model = dephasing_model(3, 8, 0, 0.0, level_energies=[0.0, 0.4, 1.3])
    psi = product_state(np.ones(3) / np.sqrt(3), random_state(8, philox(1)))
    for window in ((0.0, 1.0), (5.0, 50.0)):
        assert ntc_evaluate(model, psi, computational_family(3), window, 1e-12).verdict


def test_block_hamiltonians_cover_block_diagonal_part():
    model = dephasing_model(3, 6, 2, 0.6).with_hamiltonians(h_r=np.array(
        [[0, 0.3, 0.1], [0.3, 1, 0], [0.1, 0, 2]], dtype=complex))
    fam = computational_family(3, [[0, 2], [1]])
    total = sum(b.embedded_operator() for b in block_hamiltonians(model, fam))
    mask = sum(np.kron(p, np.eye(6)) for p in fam.projectors)
    ref = sum(np.kron(p, np.eye(6)) @ model.h_total @ np.kron(p, np.eye(6)) for p in fam.projectors)
    assert np.allclose(total, ref, atol=1e-12)
    assert np.allclose(mask, np.eye(18))


@pytest.mark.parametrize("delta", [1e-2, 1e-3, 1e-4])
def test_weakly_broken_ntc_error_grows_linearly(delta):
    base = dephasing_model(2, 16, 3, 0.7)
    model = base.with_hamiltonians(h_r=base.h_r + delta * np.array([[0, 1], [1, 0]]))
    psi = product_state(np.ones(2) / np.sqrt(2), random_state(16, philox(3)))
    fam = computational_family(2)
    times = np.linspace(0, 5, 11)
    full = model.propagator.evolve(psi, times)
    for block, p in zip(block_hamiltonians(model, fam), fam.embedded(model.shape)):
        approx = block_evolve(block, p @ psi, times)
        dev = np.linalg.norm(full @ p.T - approx, axis=1)
        assert np.all(dev <= 1.0 * delta * times + 1e-12)


def test_uncoupled_superposition_keeps_coherence():
    model = dephasing_model(2, 16, 0, 0.0, level_energies=[0.0, 1.3])
    psi = product_state(np.array([0.6, 0.8]), random_state(16, philox(2)))
    rep = isolatable_check(model, psi, np.linspace(0, 20, 201))
    off = np.abs(rep.reduced[:, 0, 1])
    assert off.min() >= off[0] / 2

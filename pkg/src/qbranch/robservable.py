"""Decoherence of apparatus subspaces, certification, finest divisions and coarse-graining."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .dynamics import DEFAULT_EPS_X, Dynamics, NtcReport, as_protocol, ntc_evaluate, require_ntc, window_times
from .errors import InvalidFamilyError, NtcViolation
from .model import ProjectorFamily, TotalModel, family_from_basis, philox, product_state
from .qcore import random_state, reduced_density


@dataclass(frozen=True)
class Tolerance:
    """Numerical tolerances shared by the checks.

    ``k_accuracy`` defaults to ``-ln(eps_x)``: the number of amplitude
    e-foldings needed before an exponentially decaying off-block element
    falls below ``eps_x``.
    """

    eps_x: float = DEFAULT_EPS_X
    k_accuracy: float | None = None
    degeneracy_tol: float = 1e-8

    def __post_init__(self):
        if not self.eps_x > 0 or not self.degeneracy_tol > 0:
            raise ValueError("tolerances must be > 0")
        if self.k_accuracy is not None and not self.k_accuracy > 0:
            raise ValueError("k_accuracy must be > 0")

    @property
    def k(self) -> float:
        if self.k_accuracy is not None:
            return self.k_accuracy
        return max(-math.log(self.eps_x), 1e-12)


def offblock_curve(reduced: np.ndarray, family: ProjectorFamily) -> np.ndarray:
    """``max_{mu != nu} ||P_mu rho P_nu||_F`` for each matrix in a ``(T, n, n)`` stack."""
    reduced = np.asarray(reduced)
    single = reduced.ndim == 2
    if single:
        reduced = reduced[None]
    out = np.zeros(reduced.shape[0])
    ps = family.projectors
    for i in range(len(ps)):
        for j in range(i + 1, len(ps)):
            blk = np.einsum("ab,tbc,cd->tad", ps[i], reduced, ps[j])
            out = np.maximum(out, np.linalg.norm(blk, axis=(1, 2)))
    return out[0] if single else out


def readout_decoherence_time(times: np.ndarray, curve: np.ndarray, eps_x: float) -> float:
    """Time after ``times[0]`` from which ``curve`` stays ``<= eps_x`` to the end; ``inf`` if never."""
    above = np.flatnonzero(curve > eps_x)
    if above.size == 0:
        return 0.0
    last = above[-1]
    if last == len(curve) - 1:
        return math.inf
    return float(times[last + 1] - times[0])


@dataclass
class DecoherenceResult:
    times: np.ndarray
    offblock: np.ndarray
    tau_d: float
    passed: bool
    ntc: NtcReport


def decoherence_check(
    dyn: Dynamics,
    psi0: np.ndarray,
    family: ProjectorFamily,
    window: tuple[float, float],
    tol: Tolerance = Tolerance(),
    t_init: float = 0.0,
    samples: int = 201,
    check_ntc: bool = True,
) -> DecoherenceResult:
    """Track the off-block part of the reduced density matrix over ``window``.

    Raises :class:`NtcViolation` when the family leaks on the window.
    ``tau_d`` is measured from the window start.
    """
    proto = as_protocol(dyn)
    times = window_times(window, samples)
    report = ntc_evaluate(proto, psi0, family, window, tol.eps_x, t_init=t_init, samples=samples)
    if check_ntc:
        require_ntc(report, "in decoherence_check")
    psi_a = proto.propagate(np.asarray(psi0, dtype=complex), t_init, float(times[0]))
    traj = proto.trajectory(psi_a, float(times[0]), times)
    curve = offblock_curve(reduced_density(traj, proto.shape), family)
    tau_d = readout_decoherence_time(times, curve, tol.eps_x)
    return DecoherenceResult(times, curve, tau_d, math.isfinite(tau_d), report)


@dataclass
class RCertificate:
    family: ProjectorFamily
    ensemble: list[np.ndarray]
    tau_d_per_state: list[float]
    verdict: bool
    worst_offblock: np.ndarray
    times: np.ndarray

    @property
    def tau_d(self) -> float:
        return max(self.tau_d_per_state, default=0.0)


def certify_r_observable(
    dyn: Dynamics,
    family: ProjectorFamily,
    ensemble: Sequence[np.ndarray],
    window: tuple[float, float],
    tol: Tolerance = Tolerance(),
    t_init: float = 0.0,
    samples: int = 201,
) -> RCertificate:
    """Run :func:`decoherence_check` on every ensemble member.

    A member whose window violates the non-transition condition counts as a
    failure rather than aborting the certification.
    """
    if not ensemble:
        raise ValueError("initial ensemble is empty")
    proto = as_protocol(dyn)
    times = window_times(window, samples)
    worst = np.zeros(times.size)
    taus, ok = [], True
    for psi in ensemble:
        _check_product(psi, proto.shape)
        try:
            res = decoherence_check(proto, psi, family, window, tol, t_init, samples)
        except NtcViolation:
            taus.append(math.inf)
            ok = False
            continue
        taus.append(res.tau_d)
        ok &= res.passed
        worst = np.maximum(worst, res.offblock)
    return RCertificate(family, list(ensemble), taus, bool(ok), worst, times)


def _check_product(psi: np.ndarray, shape, atol: float = 1e-10) -> None:
    s = np.linalg.svd(np.asarray(psi).reshape(shape.apparatus_dim, shape.env_dim), compute_uv=False)
    if s.size > 1 and s[1] > atol:
        raise ValueError("ensemble member is not a product state")


def thermal_like_state(h_e: np.ndarray, rng: np.random.Generator, occupied_fraction: float = 0.25) -> np.ndarray:
    """Boltzmann-weighted amplitudes in the eigenbasis of ``h_e`` with random phases."""
    w, v = linalg.eigh(h_e)
    width = max(w[-1] - w[0], 1e-300)
    beta = 1.0 / (occupied_fraction * width)
    amp = np.exp(-beta * (w - w[0]) / 2) * np.exp(2j * np.pi * rng.random(w.size))
    psi = v @ amp
    return psi / np.linalg.norm(psi)


def default_initial_ensemble(
    model: TotalModel,
    family: ProjectorFamily,
    count: int = 16,
    seed: int = 0,
    phi_e: np.ndarray | None = None,
) -> list[np.ndarray]:
    """Random product states plus every two-subspace equal superposition ⊗ ``phi_e``."""
    rng = philox(seed)
    n, m = model.n, model.env_dim
    states = [product_state(random_state(n, rng), random_state(m, rng)) for _ in range(count)]
    if phi_e is None:
        phi_e = thermal_like_state(model.h_e, rng)
    heads = [family.isometry(mu)[:, 0] for mu in family.labels]
    for i in range(len(heads)):
        for j in range(i + 1, len(heads)):
            states.append(product_state((heads[i] + heads[j]) / np.sqrt(2), phi_e))
    return states


def _components(mats: Sequence[np.ndarray], basis: np.ndarray, tol: float) -> list[list[int]]:
    d = basis.shape[1]
    adj = np.zeros((d, d), dtype=bool)
    for rho in mats:
        adj |= np.abs(basis.conj().T @ rho @ basis) > tol
    ncomp, lab = connected_components(csr_matrix(adj), directed=False)
    groups: dict[int, list[int]] = {}
    for i, c in enumerate(lab):
        groups.setdefault(c, []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def _block_diagonalizes(family: ProjectorFamily, mats: Sequence[np.ndarray], tol: float) -> bool:
    return all(offblock_curve(rho, family) <= tol for rho in mats)


def finest_division(
    reduced_set: Sequence[np.ndarray],
    tol: float = 1e-8,
    seed: int = 0,
    retries: int = 5,
) -> ProjectorFamily:
    """Finest orthogonal division that block-diagonalizes every matrix in the set.

    Degenerate datasets, where several equally fine divisions exist, return
    the canonical-basis answer when it is valid, flagged ``unique=False``.
    """
    mats = [np.asarray(r, dtype=complex) for r in reduced_set]
    if not mats:
        raise ValueError("reduced_set is empty")
    n = mats[0].shape[0]
    if any(r.shape != (n, n) for r in mats):
        raise ValueError("all matrices must share one square shape")
    rng = philox(seed)
    for _ in range(retries + 1):
        weights = rng.standard_normal(len(mats))
        x = sum(w * (r + r.conj().T) / 2 for w, r in zip(weights, mats))
        evals, vecs = linalg.eigh(x)
        groups = _components(mats, vecs, tol)
        comp_of = {i: k for k, g in enumerate(groups) for i in g}
        unique = True
        start = 0
        for i in range(1, n + 1):
            if i == n or evals[i] - evals[i - 1] > tol:
                cluster = range(start, i)
                if len({comp_of[j] for j in cluster}) > 1:
                    unique = False
                start = i
        if not unique:
            canon = _components(mats, np.eye(n), tol)
            fam = family_from_basis(np.eye(n), canon)
            if _block_diagonalizes(fam, mats, tol):
                return type(fam)(fam.labels, fam.projectors, unique=False)
        fam = family_from_basis(vecs, groups)
        if _block_diagonalizes(fam, mats, tol):
            return type(fam)(fam.labels, fam.projectors, unique=unique)
    raise RuntimeError("finest_division: no block-diagonalizing division found after retries")


def coarse_grain(family: ProjectorFamily, grouping: Mapping) -> ProjectorFamily:
    """Merge projectors: ``P_eta = sum_{mu in eta} P_mu``; labels keep first-appearance order."""
    missing = [mu for mu in family.labels if mu not in grouping]
    if missing:
        raise InvalidFamilyError(f"grouping does not assign labels {missing}")
    extra = set(grouping) - set(family.labels)
    if extra:
        raise InvalidFamilyError(f"grouping names unknown labels {sorted(extra, key=repr)}")
    order: list = []
    sums: dict = {}
    for mu, p in zip(family.labels, family.projectors):
        eta = grouping[mu]
        if eta not in sums:
            order.append(eta)
            sums[eta] = np.zeros_like(p)
        sums[eta] = sums[eta] + p
    return ProjectorFamily(tuple(order), tuple(sums[e] for e in order))


def coarse_graining_map(coarse: ProjectorFamily, fine: ProjectorFamily, atol: float = 1e-8) -> dict | None:
    """``{fine label: coarse label}`` if every coarse projector is a sum of fine ones, else ``None``."""
    mapping = {}
    for mu, p in zip(fine.labels, fine.projectors):
        hit = None
        for eta, q in zip(coarse.labels, coarse.projectors):
            if np.max(np.abs(q @ p - p)) <= atol:
                hit = eta
                break
        if hit is None:
            return None
        mapping[mu] = hit
    for eta, q in zip(coarse.labels, coarse.projectors):
        total = sum((p for mu, p in zip(fine.labels, fine.projectors) if mapping[mu] == eta), np.zeros_like(q))
        if np.max(np.abs(total - q)) > atol:
            return None
    return mapping

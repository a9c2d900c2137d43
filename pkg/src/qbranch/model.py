"""Total-system models: n-level apparatus coupled to a random-matrix environment."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import DimensionError, InvalidFamilyError
from .qcore import Propagator, SpaceShape, check_hermitian, embed, is_hermitian

FAMILY_ATOL = 1e-10

ENSEMBLE_KINDS = ("GUE", "GOE", "banded")


def philox(seed: int) -> np.random.Generator:
    """Counter-based generator so that distinct seeds give independent streams."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True, eq=False)
class ProjectorFamily:
    """Complete orthogonal family of projectors on the apparatus factor.

    ``labels[i]`` is the value ``mu`` attached to ``projectors[i]``.
    ``unique`` is False when the family was picked by convention out of
    several equally fine candidates (see :func:`finest_division`).
    """

    labels: tuple
    projectors: tuple
    unique: bool = True

    def __post_init__(self):
        labels = tuple(self.labels)
        projectors = tuple(np.asarray(p, dtype=complex) for p in self.projectors)
        if len(labels) != len(projectors) or not projectors:
            raise InvalidFamilyError("need one projector per label and at least one label")
        if len(set(labels)) != len(labels):
            raise InvalidFamilyError(f"duplicate labels in {labels}")
        n = projectors[0].shape[0]
        ident = np.zeros((n, n), dtype=complex)
        for i, p in enumerate(projectors):
            if p.shape != (n, n):
                raise InvalidFamilyError("projectors must share one square shape")
            if not is_hermitian(p, FAMILY_ATOL):
                raise InvalidFamilyError(f"projector {labels[i]!r} is not Hermitian")
            for j in range(i, len(projectors)):
                target = p if i == j else 0.0
                if np.max(np.abs(p @ projectors[j] - target)) > FAMILY_ATOL:
                    raise InvalidFamilyError(
                        f"projectors {labels[i]!r}, {labels[j]!r} violate P_mu P_nu = delta P_mu"
                    )
            if np.real(np.trace(p)) < 0.5:
                raise InvalidFamilyError(f"projector {labels[i]!r} has rank 0")
            ident += p
        if np.max(np.abs(ident - np.eye(n))) > FAMILY_ATOL:
            raise InvalidFamilyError("projectors do not sum to the identity")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "projectors", projectors)

    @property
    def n(self) -> int:
        return self.projectors[0].shape[0]

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, mu) -> int:
        return self.labels.index(mu)

    def projector(self, mu) -> np.ndarray:
        return self.projectors[self.index(mu)]

    def ranks(self) -> list[int]:
        return [int(round(np.real(np.trace(p)))) for p in self.projectors]

    def isometry(self, mu) -> np.ndarray:
        """Orthonormal basis of the range of ``P_mu`` as an ``n x r`` matrix."""
        p = self.projector(mu)
        w, v = linalg.eigh(p)
        return v[:, w > 0.5]

    def embedded(self, shape: SpaceShape) -> list[np.ndarray]:
        """``P_mu ⊗ I_E`` for every label, in label order."""
        return [embed(p, shape) for p in self.projectors]

    def observable(self) -> np.ndarray:
        """``A = sum_mu mu P_mu`` (labels must be numeric)."""
        return sum(float(mu) * p for mu, p in zip(self.labels, self.projectors))


def family_from_basis(basis: np.ndarray, groups: Sequence[Sequence[int]], labels=None) -> ProjectorFamily:
    """Family whose ``k``-th projector spans the columns ``groups[k]`` of ``basis``."""
    basis = np.asarray(basis, dtype=complex)
    projectors = []
    for g in groups:
        q = basis[:, list(g)]
        projectors.append(q @ q.conj().T)
    if labels is None:
        labels = tuple(range(len(groups)))
    return ProjectorFamily(tuple(labels), tuple(projectors))


def computational_family(n: int, groups: Sequence[Sequence[int]] | None = None, labels=None) -> ProjectorFamily:
    """Projectors onto groups of canonical basis vectors (rank 1 by default)."""
    if groups is None:
        groups = [[i] for i in range(n)]
    return family_from_basis(np.eye(n), groups, labels)


def eigenprojector_family(h_r: np.ndarray, degeneracy_tol: float | None = None) -> ProjectorFamily:
    """Spectral projectors of ``h_r``; near-degenerate eigenvalues are merged.

    ``degeneracy_tol`` defaults to ``1e-8 * ||h_r||``.
    """
    check_hermitian(h_r, "h_r")
    w, v = linalg.eigh(np.asarray(h_r, dtype=complex))
    if degeneracy_tol is None:
        degeneracy_tol = 1e-8 * max(np.linalg.norm(h_r, 2), 1e-300)
    groups = [[0]]
    for i in range(1, w.size):
        if w[i] - w[groups[-1][-1]] < degeneracy_tol:
            groups[-1].append(i)
        else:
            groups.append([i])
    return family_from_basis(v, groups)


@dataclass(frozen=True)
class EnsembleSpec:
    """Random-matrix environment.

    ``scale`` is the target mean level spacing at the band center. For the
    banded kind the diagonal is an equally spaced ladder with that spacing
    and ``band_strength`` (in units of ``scale``) sets the off-diagonal
    amplitude within ``bandwidth`` of the diagonal.
    """

    kind: str = "GUE"
    dimension: int = 64
    scale: float = 1.0
    seed: int = 0
    bandwidth: int = 4
    band_strength: float = 0.5

    def __post_init__(self):
        if self.kind not in ENSEMBLE_KINDS:
            raise ValueError(f"unknown ensemble kind {self.kind!r}; expected one of {ENSEMBLE_KINDS}")
        if self.dimension < 1:
            raise DimensionError("ensemble dimension must be >= 1")


def _unit_gaussian_hermitian(n: int, rng: np.random.Generator, real: bool) -> np.ndarray:
    # every independent second moment equals 1 (GOE diagonal: 2)
    if real:
        a = rng.standard_normal((n, n))
        return ((a + a.T) / np.sqrt(2)).astype(complex)
    a = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2)
    return (a + a.conj().T) / np.sqrt(2)


def sample_ensemble(spec: EnsembleSpec) -> np.ndarray:
    """Draw one Hermitian matrix; bit-reproducible for a fixed spec."""
    rng = philox(spec.seed)
    n = spec.dimension
    if spec.kind in ("GUE", "GOE"):
        # semicircle radius 2 sigma sqrt(N): center spacing = pi sigma / sqrt(N)
        sigma = spec.scale * np.sqrt(n) / np.pi
        return sigma * _unit_gaussian_hermitian(n, rng, real=spec.kind == "GOE")
    diag = spec.scale * (np.arange(n) - (n - 1) / 2)
    h = np.diag(diag).astype(complex)
    g = _unit_gaussian_hermitian(n, rng, real=False)
    i, j = np.indices((n, n))
    band = (np.abs(i - j) <= spec.bandwidth) & (i != j)
    h[band] += spec.band_strength * spec.scale * g[band]
    return h


def unit_coupling(dimension: int, seed: int, kind: str = "GUE") -> np.ndarray:
    """Random Hermitian ``V`` normalized to unit mean ``|V_ij|^2``."""
    v = _unit_gaussian_hermitian(dimension, philox(seed), real=kind == "GOE")
    return v / np.sqrt(np.mean(np.abs(v) ** 2))


@dataclass(frozen=True, eq=False)
class TotalModel:
    """``H = H_R ⊗ I + I ⊗ H_E + H_I`` on ``shape``.

    ``couplings`` holds the per-level environment operators ``B_mu`` when the
    interaction has the dephasing form ``sum_mu |mu><mu| ⊗ B_mu``.
    """

    shape: SpaceShape
    h_r: np.ndarray
    h_e: np.ndarray
    h_i: np.ndarray
    couplings: tuple | None = field(default=None)

    def __post_init__(self):
        n, m = self.shape.apparatus_dim, self.shape.env_dim
        if self.h_r.shape != (n, n) or self.h_e.shape != (m, m):
            raise DimensionError("h_r / h_e do not match the space shape")
        self.shape.check_operator(self.h_i)
        check_hermitian(self.h_r, "h_r")
        check_hermitian(self.h_e, "h_e")
        check_hermitian(self.h_i, "h_i")

    @cached_property
    def h_total(self) -> np.ndarray:
        n, m = self.shape.apparatus_dim, self.shape.env_dim
        return np.kron(self.h_r, np.eye(m)) + np.kron(np.eye(n), self.h_e) + self.h_i

    @cached_property
    def propagator(self) -> Propagator:
        return Propagator(self.h_total)

    @property
    def n(self) -> int:
        return self.shape.apparatus_dim

    @property
    def env_dim(self) -> int:
        return self.shape.env_dim

    def env_block(self, mu: int, nu: int, op: np.ndarray | None = None) -> np.ndarray:
        """``<mu| op |nu>`` as an environment operator (default: ``H``)."""
        op = self.h_total if op is None else op
        m = self.env_dim
        return op[mu * m:(mu + 1) * m, nu * m:(nu + 1) * m]

    def is_dephasing(self, atol: float = 1e-12) -> bool:
        """True when ``<mu|H|nu> = 0`` for all ``mu != nu``."""
        h = self.h_total.reshape(self.n, self.env_dim, self.n, self.env_dim)
        off = h.copy()
        for mu in range(self.n):
            off[mu, :, mu, :] = 0
        return float(np.max(np.abs(off), initial=0.0)) <= atol

    def with_hamiltonians(self, h_r=None, h_e=None, h_i=None) -> "TotalModel":
        return TotalModel(
            self.shape,
            self.h_r if h_r is None else h_r,
            self.h_e if h_e is None else h_e,
            self.h_i if h_i is None else h_i,
            self.couplings if h_i is None else None,
        )


def build_nlevel_model(
    n: int,
    level_energies: Sequence[float],
    env: EnsembleSpec | np.ndarray,
    coupling_ops: Sequence[np.ndarray] | None = None,
    coupling_strength: float = 1.0,
    interaction: np.ndarray | None = None,
    h_r: np.ndarray | None = None,
) -> TotalModel:
    """Assemble an n-level apparatus coupled to an environment.

    Args:
        n: number of apparatus levels (>= 2).
        level_energies: diagonal of ``H_R`` in the canonical basis.
        env: ensemble spec or an explicit environment Hamiltonian.
        coupling_ops: per-level ``B_mu``; the interaction becomes
            ``coupling_strength * sum_mu |mu><mu| ⊗ B_mu``.
        coupling_strength: overall factor on the couplings.
        interaction: full ``H_I`` matrix, overriding ``coupling_ops``.
        h_r: full apparatus Hamiltonian, overriding ``level_energies``.
    """
    if n < 2:
        raise DimensionError("an n-level apparatus needs n >= 2")
    h_e = sample_ensemble(env) if isinstance(env, EnsembleSpec) else np.asarray(env, dtype=complex)
    big_n = h_e.shape[0]
    shape = SpaceShape((n, big_n))
    if h_r is None:
        if len(level_energies) != n:
            raise DimensionError(f"need {n} level energies, got {len(level_energies)}")
        h_r = np.diag(np.asarray(level_energies, dtype=float)).astype(complex)
    h_r = np.asarray(h_r, dtype=complex)
    couplings = None
    if interaction is not None:
        h_i = np.asarray(interaction, dtype=complex)
    else:
        h_i = np.zeros((n * big_n, n * big_n), dtype=complex)
        if coupling_ops is not None:
            if len(coupling_ops) != n:
                raise DimensionError(f"need {n} coupling operators, got {len(coupling_ops)}")
            couplings = []
            for mu, b in enumerate(coupling_ops):
                b = coupling_strength * np.asarray(b, dtype=complex)
                if b.shape != (big_n, big_n):
                    raise DimensionError("coupling operator does not match environment dimension")
                check_hermitian(b, f"coupling operator {mu}")
                h_i[mu * big_n:(mu + 1) * big_n, mu * big_n:(mu + 1) * big_n] = b
                couplings.append(b)
            couplings = tuple(couplings)
    return TotalModel(shape, h_r, h_e, h_i, couplings)


def dephasing_model(
    n: int,
    env_dim: int,
    seed: int,
    strength: float,
    level_energies: Sequence[float] | None = None,
    level_factors: Sequence[float] | None = None,
    spacing: float = 1.0,
    kind: str = "GUE",
) -> TotalModel:
    """Convenience builder: ``B_mu = strength * level_factors[mu] * V``.

    ``V`` is a unit-second-moment random matrix drawn from ``seed + 1``; the
    environment Hamiltonian is drawn from ``seed``. With the default factors
    ``(0, 1, ..., n-1)`` the perturbation between neighbouring levels is
    exactly ``strength * V``.
    """
    if level_energies is None:
        level_energies = np.arange(n, dtype=float)
    if level_factors is None:
        level_factors = np.arange(n, dtype=float)
    v = unit_coupling(env_dim, seed + 1, kind=kind)
    spec = EnsembleSpec(kind=kind, dimension=env_dim, scale=spacing, seed=seed)
    return build_nlevel_model(
        n, level_energies, spec, [f * v for f in level_factors], coupling_strength=strength
    )


@dataclass(frozen=True)
class PerturbationStats:
    """Spectral statistics entering the echo decay formulas.

    delta is the mean level spacing, sigma_v the standard deviation of the
    diagonal of ``V`` and v_nd_sq the mean squared off-diagonal of ``V``,
    both in the eigenbasis of ``H^E_mu``; epsilon carries the magnitude of
    ``eps V = H^E_I,nu - H^E_I,mu``.
    """

    delta: float
    sigma_v: float
    v_nd_sq: float
    epsilon: float

    @property
    def perturbative_border(self) -> float:
        """Solution of ``2 pi eps_p v_nd_sq = sigma_v delta``."""
        if self.v_nd_sq == 0:
            return float("inf") if self.sigma_v > 0 else 0.0
        return self.sigma_v * self.delta / (2 * np.pi * self.v_nd_sq)

    @property
    def fgr_rate(self) -> float:
        """``Gamma = 2 pi eps^2 v_nd_sq / delta`` (decay rate of ``|f|^2``)."""
        return 2 * np.pi * self.epsilon ** 2 * self.v_nd_sq / self.delta

    @property
    def gaussian_rate(self) -> float:
        """``eps^2 sigma_v^2``: ``|f|^2 ~ exp(-rate t^2)``."""
        return (self.epsilon * self.sigma_v) ** 2


def mean_level_spacing(eigenvalues: np.ndarray, central_fraction: float = 0.5) -> float:
    e = np.sort(np.asarray(eigenvalues, dtype=float))
    n = e.size
    lo = int(np.floor(n * (1 - central_fraction) / 2))
    hi = n - 1 - lo
    if hi <= lo:
        raise ValueError("too few eigenvalues for a spacing estimate")
    return float((e[hi] - e[lo]) / (hi - lo))


def interaction_block(model: TotalModel, mu: int) -> np.ndarray:
    """``H^E_I,mu = <mu|H_I|mu>``."""
    return model.env_block(mu, mu, model.h_i)


def perturbation_stats(model: TotalModel, mu: int, nu: int, central_fraction: float = 0.5) -> PerturbationStats:
    """Statistics of ``eps V = <nu|H_I|nu> - <mu|H_I|mu>`` in the eigenbasis of ``H^E_mu``."""
    if mu == nu or not (0 <= mu < model.n and 0 <= nu < model.n):
        raise ValueError(f"need two distinct valid levels, got {mu}, {nu}")
    if model.env_dim < 8:
        raise ValueError("environment dimension < 8: spectral statistics are meaningless")
    h_mu = model.env_block(mu, mu)
    w, u = linalg.eigh(h_mu)
    delta = mean_level_spacing(w, central_fraction)
    diff = interaction_block(model, nu) - interaction_block(model, mu)
    eps = float(np.sqrt(np.mean(np.abs(diff) ** 2)))
    if eps == 0.0:
        return PerturbationStats(delta, 0.0, 0.0, 0.0)
    vt = u.conj().T @ (diff / eps) @ u
    diag = np.real(np.diag(vt))
    off = np.abs(vt) ** 2
    nd = (off.sum() - np.sum(np.abs(np.diag(vt)) ** 2)) / (vt.shape[0] * (vt.shape[0] - 1))
    return PerturbationStats(delta, float(np.std(diag)), float(nd), eps)


def product_state(psi_r: np.ndarray, phi_e: np.ndarray, atol: float = 1e-10) -> np.ndarray:
    """Normalized ``|psi_R> ⊗ |phi_E>``."""
    psi_r = np.asarray(psi_r, dtype=complex)
    phi_e = np.asarray(phi_e, dtype=complex)
    if psi_r.ndim != 1 or phi_e.ndim != 1:
        raise DimensionError("product_state expects two vectors")
    for name, v in (("psi_r", psi_r), ("phi_e", phi_e)):
        if abs(np.linalg.norm(v) - 1) > atol:
            raise ValueError(f"{name} is not normalized")
    return np.kron(psi_r, phi_e)


def band_center_state(h: np.ndarray, rng: np.random.Generator, fraction: float = 0.25) -> np.ndarray:
    """Random superposition of the eigenvectors of ``h`` in the central ``fraction`` of its spectrum.

    ``fraction=1`` gives a Haar-random state; a single eigenvector is used
    when the window holds fewer than one level.
    """
    w, v = linalg.eigh(h)
    n = w.size
    k = max(1, int(round(fraction * n)))
    lo = (n - k) // 2
    z = rng.standard_normal(k) + 1j * rng.standard_normal(k)
    psi = v[:, lo:lo + k] @ z
    return psi / np.linalg.norm(psi)

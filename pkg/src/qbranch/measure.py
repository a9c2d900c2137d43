"""Measurement scheme: premeasurement into pointer subspaces followed by environment-induced splitting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import Protocol
from .errors import PremeasurementIncomplete
from .model import EnsembleSpec, TotalModel, computational_family, philox, sample_ensemble, unit_coupling
from .qcore import SpaceShape, random_state
from .robservable import Tolerance
from .tree import SplitSpec, Tree, grow_tree, probability_of_value


@dataclass(frozen=True)
class MeasurementScenario:
    """Measured system with ``len(coefficients)`` eigenvectors ``|b>``.

    The apparatus has a ready level 0 and one pointer level ``b + 1`` per
    eigenvector. The environment is the measured system times a random
    bath of dimension ``bath_dim``. Premeasurement runs on ``[0, tau1)``;
    the split window is ``[tau1, tau1 + window]``.
    """

    coefficients: tuple
    bath_dim: int = 32
    seed: int = 0
    strength: float = 1.0
    tau1: float = 1.0
    window: float = 4.0
    tau_d: float = 2.0

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=complex)
        if c.ndim != 1 or c.size < 1:
            raise ValueError("need at least one coefficient")
        if abs(np.linalg.norm(c) - 1) > 1e-10:
            raise ValueError("coefficients must be normalized")
        if self.window < self.tau_d:
            raise ValueError("split window shorter than tau_d")
        object.__setattr__(self, "coefficients", tuple(c))

    @property
    def n_outcomes(self) -> int:
        return len(self.coefficients)

    def pointer(self, b: int) -> int:
        return b + 1

    @property
    def split_time(self) -> float:
        return self.tau1 + self.tau_d


def build_measurement_protocol(sc: MeasurementScenario) -> tuple[Protocol, np.ndarray]:
    """Two-segment protocol and the product initial vector ``|ready> ⊗ sum_b C_b |b> ⊗ |phi>``."""
    nb, m = sc.n_outcomes, sc.bath_dim
    na = nb + 1
    shape = SpaceShape((na, nb * m))
    h_bath = sample_ensemble(EnsembleSpec("GUE", m, 1.0, sc.seed))
    h_e = np.kron(np.eye(nb), h_bath)
    rate = np.pi / (2 * sc.tau1)
    h_on = np.zeros((shape.total_dim,) * 2, dtype=complex)
    for b in range(nb):
        mu = sc.pointer(b)
        sy = np.zeros((na, na), dtype=complex)
        sy[0, mu], sy[mu, 0] = -1j, 1j
        proj_b = np.zeros((nb, nb))
        proj_b[b, b] = 1.0
        h_on += rate * np.kron(sy, np.kron(proj_b, np.eye(m)))
    zero_r = np.zeros((na, na), dtype=complex)
    premeasure = TotalModel(shape, zero_r, h_e, h_on)
    v = unit_coupling(m, sc.seed + 1)
    h_off = np.zeros_like(h_on)
    couplings = []
    for mu in range(na):
        b_mu = sc.strength * mu * np.kron(np.eye(nb), v)
        h_off[mu * nb * m:(mu + 1) * nb * m, mu * nb * m:(mu + 1) * nb * m] = b_mu
        couplings.append(b_mu)
    h_r = np.diag(np.arange(na, dtype=float)).astype(complex)
    record = TotalModel(shape, h_r, h_e, h_off, tuple(couplings))
    proto = Protocol([(0.0, premeasure), (sc.tau1, record)])
    phi = random_state(m, philox(sc.seed + 3))
    ready = np.zeros(na, dtype=complex)
    ready[0] = 1.0
    psi0 = np.kron(ready, np.kron(np.asarray(sc.coefficients), phi))
    return proto, psi0


def pointer_correlation(psi_t: np.ndarray, sc: MeasurementScenario) -> dict:
    """``||P_mu(b) |R_b(t)>||^2`` with ``|R_b>`` the normalized ``<b|Psi(t)>``."""
    nb, m = sc.n_outcomes, sc.bath_dim
    a = np.asarray(psi_t).reshape(nb + 1, nb, m)
    out = {}
    for b in range(nb):
        r = a[:, b, :]
        nrm = np.linalg.norm(r) ** 2
        out[b] = float(np.linalg.norm(r[sc.pointer(b)]) ** 2 / nrm) if nrm > 0 else 0.0
    return out


@dataclass
class MeasurementOutcomeReport:
    probabilities: dict
    born: dict
    max_deviation: float
    inferred: dict
    pointer_fidelity: dict
    factor_fidelity: dict
    decomposition_residual: float
    passed: bool
    tree: Tree = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "probabilities": {str(k): v for k, v in self.probabilities.items()},
            "born": {str(k): v for k, v in self.born.items()},
            "max_deviation": self.max_deviation,
            "inferred": {str(k): v for k, v in self.inferred.items()},
            "pointer_fidelity": {str(k): v for k, v in self.pointer_fidelity.items()},
            "factor_fidelity": {str(k): v for k, v in self.factor_fidelity.items()},
            "decomposition_residual": self.decomposition_residual,
            "passed": self.passed,
        }


def run_measurement(sc: MeasurementScenario, tol: Tolerance = Tolerance()) -> MeasurementOutcomeReport:
    """Premeasure, split in the pointer basis and compare outcome weights with ``|C_b|^2``."""
    proto, psi0 = build_measurement_protocol(sc)
    psi_tau1 = proto.propagate(psi0, 0.0, sc.tau1)
    fid = pointer_correlation(psi_tau1, sc)
    bad = {b: f for b, f in fid.items() if f < 1 - tol.eps_x}
    if bad:
        raise PremeasurementIncomplete(f"pointer fidelities below 1 - eps_x at tau1: {bad}")
    family = computational_family(sc.n_outcomes + 1)
    spec = SplitSpec((sc.tau1, sc.tau1 + sc.window), family, sc.tau_d)
    tree = grow_tree(proto, psi0, [spec], tol)
    t1 = spec.time
    by_value = probability_of_value(tree, family, t1)
    nb, m = sc.n_outcomes, sc.bath_dim
    probs = {b: by_value[sc.pointer(b)] for b in range(nb)}
    born = {b: float(abs(c) ** 2) for b, c in enumerate(sc.coefficients)}
    dev = max(abs(probs[b] - born[b]) for b in range(nb))
    factor = {}
    for p in tree.paths(t1):
        b = p.label[-1] - 1
        if b < 0:
            continue
        a = p.component.reshape(nb + 1, nb, m)
        rho_s = np.einsum("akc,alc->kl", a, a.conj())
        factor[b] = float(np.real(rho_s[b, b]) / np.real(np.trace(rho_s)))
    resid = float(np.linalg.norm(tree.psi(t1) - tree.components(t1).sum(axis=0)))
    passed = (
        dev <= 10 * tol.eps_x
        and all(f >= 1 - tol.eps_x for f in factor.values())
        and resid <= 1e-9
    )
    inferred = {sc.pointer(b): b for b in range(nb)}
    return MeasurementOutcomeReport(probs, born, dev, inferred, fid, factor, resid, passed, tree)

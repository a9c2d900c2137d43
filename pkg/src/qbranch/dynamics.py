"""Schrödinger propagation, the non-transition condition and block dynamics."""
from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Union

import numpy as np

from .errors import DimensionError, NtcViolation
from .model import ProjectorFamily, TotalModel
from .qcore import Propagator, SpaceShape, reduced_density

log = logging.getLogger(__name__)

DEFAULT_EPS_X = 1e-6
DEFAULT_WINDOW_SAMPLES = 41


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("TimeGrid.dt must be > 0")
        if self.steps < 1:
            raise ValueError("TimeGrid.steps must be >= 1")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * self.steps

    @classmethod
    def spanning(cls, t0: float, t1: float, steps: int) -> "TimeGrid":
        return cls(t0, (t1 - t0) / steps, steps)


class Protocol:
    """Piecewise-constant Hamiltonian.

    Segment ``k`` governs ``[starts[k], starts[k+1])``; the first segment
    also extends to earlier times and the last one to later times. Each
    segment is a :class:`TotalModel` so that ``H_R`` and ``H_I`` stay
    separately accessible.
    """

    def __init__(self, segments: Sequence[tuple[float, TotalModel]]):
        if not segments:
            raise ValueError("a protocol needs at least one segment")
        segments = sorted(segments, key=lambda s: s[0])
        self.starts = [float(s) for s, _ in segments]
        self.models = [m for _, m in segments]
        shape = self.models[0].shape
        if any(m.shape != shape for m in self.models):
            raise DimensionError("all protocol segments must share one space shape")
        self.shape: SpaceShape = shape

    @classmethod
    def from_model(cls, model: TotalModel) -> "Protocol":
        return cls([(0.0, model)])

    def __len__(self) -> int:
        return len(self.models)

    def segment_index(self, t: float) -> int:
        return max(0, bisect.bisect_right(self.starts, t) - 1)

    def model_at(self, t: float) -> TotalModel:
        return self.models[self.segment_index(t)]

    def _breaks(self, t0: float, t1: float) -> list[tuple[int, float, float]]:
        """Segment pieces covering ``[t0, t1]`` with ``t0 <= t1``."""
        pieces = []
        t = t0
        k = self.segment_index(t0)
        while True:
            end = self.starts[k + 1] if k + 1 < len(self.starts) else np.inf
            stop = min(end, t1)
            if stop > t or (stop == t and not pieces):
                pieces.append((k, t, stop))
            if end >= t1:
                break
            t = end
            k += 1
        return pieces

    def propagate(self, psi: np.ndarray, t0: float, t1: float) -> np.ndarray:
        """``U(t1, t0) psi``; ``psi`` may be a state or a ``(D, k)`` stack."""
        if t1 >= t0:
            out = np.asarray(psi, dtype=complex)
            for k, a, b in self._breaks(t0, t1):
                out = self.models[k].propagator.apply(out, b - a)
            return out
        out = np.asarray(psi, dtype=complex)
        for k, a, b in reversed(self._breaks(t1, t0)):
            out = self.models[k].propagator.apply(out, a - b)
        return out

    def unitary(self, t1: float, t0: float) -> np.ndarray:
        """Dense ``U(t1, t0)``."""
        return self.propagate(np.eye(self.shape.total_dim, dtype=complex), t0, t1)

    def trajectory(self, psi: np.ndarray, t0: float, times: Sequence[float]) -> np.ndarray:
        """States ``U(t, t0) psi`` at ascending ``times >= t0``; shape ``(T, D)``."""
        times = np.asarray(times, dtype=float)
        if times.size == 0:
            return np.empty((0, self.shape.total_dim), dtype=complex)
        if np.any(np.diff(times) < 0) or times[0] < t0:
            raise ValueError("trajectory times must be ascending and >= t0")
        out = np.empty((times.size, self.shape.total_dim), dtype=complex)
        cur = np.asarray(psi, dtype=complex)
        for k, a, b in self._breaks(t0, float(times[-1])):
            last = b == times[-1]
            mask = (times >= a) & ((times < b) | last)
            if np.any(mask):
                out[mask] = self.models[k].propagator.evolve(cur, times[mask] - a)
            cur = self.models[k].propagator.apply(cur, b - a)
        return out


Dynamics = Union[TotalModel, Protocol]


def as_protocol(dyn: Dynamics) -> Protocol:
    return dyn if isinstance(dyn, Protocol) else Protocol.from_model(dyn)


def evolve(dyn: Dynamics, psi0: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Schrödinger trajectory on ``grid``; row ``k`` is ``U(t_k, t0) psi0``."""
    proto = as_protocol(dyn)
    psi0 = np.asarray(psi0, dtype=complex)
    proto.shape.check_state(psi0)
    if abs(np.linalg.norm(psi0) - 1) > 1e-10:
        raise ValueError("psi0 must be normalized")
    return proto.trajectory(psi0, grid.t0, grid.times)


def _apply_apparatus(op_r: np.ndarray, states: np.ndarray, shape: SpaceShape) -> np.ndarray:
    """Apply ``op_r ⊗ I`` to a ``(T, D)`` stack of states."""
    n, m = shape.apparatus_dim, shape.env_dim
    s = states.reshape(states.shape[0], n, m)
    return np.einsum("ab,tbk->tak", op_r, s).reshape(states.shape)


def window_times(window: tuple[float, float], samples: int = DEFAULT_WINDOW_SAMPLES) -> np.ndarray:
    ta, tb = float(window[0]), float(window[1])
    if not tb > ta:
        raise ValueError(f"empty window {window}")
    return np.linspace(ta, tb, max(int(samples), 2))


def _check_resolution(proto: Protocol, times: np.ndarray) -> None:
    if times.size < 2:
        return
    dt = float(np.max(np.diff(times)))
    for k in range(len(proto)):
        w = proto.models[k].propagator.eigenvalues()
        width = float(w[-1] - w[0]) if w.size else 0.0
        if width > 0 and dt > 0.1 / width:
            log.warning(
                "NTC sampling dt=%.3g coarser than 0.1/||H|| = %.3g (segment %d)", dt, 0.1 / width, k
            )
            return


@dataclass
class NtcReport:
    """Leakage curves ``||Pbar_mu U(t, t_a) P_mu Psi(t_a)|| / ||Psi||`` over a window."""

    family: ProjectorFamily
    window: tuple[float, float]
    times: np.ndarray
    leakage: np.ndarray  # (n_labels, T)
    eps_x: float

    @property
    def max_leakage(self) -> float:
        return float(np.max(self.leakage, initial=0.0))

    @property
    def verdict(self) -> bool:
        return self.max_leakage <= self.eps_x

    def worst_label(self):
        return self.family.labels[int(np.argmax(np.max(self.leakage, axis=1)))]


def ntc_leakage(
    dyn: Dynamics,
    psi_start: np.ndarray,
    family: ProjectorFamily,
    times: np.ndarray,
) -> np.ndarray:
    """Leakage curves for a state given at ``times[0]``; shape ``(n_labels, T)``."""
    proto = as_protocol(dyn)
    norm = np.linalg.norm(psi_start)
    if norm == 0:
        return np.zeros((len(family), len(times)))
    n, m = proto.shape.apparatus_dim, proto.shape.env_dim
    psi_r = psi_start.reshape(n, m)
    curves = []
    for p in family.projectors:
        chi = (p @ psi_r).ravel()
        if not np.any(np.abs(chi) > 0):
            curves.append(np.zeros(len(times)))
            continue
        traj = proto.trajectory(chi, float(times[0]), times)
        outside = traj - _apply_apparatus(p, traj, proto.shape)
        curves.append(np.linalg.norm(outside, axis=1) / norm)
    return np.array(curves)


def ntc_evaluate(
    dyn: Dynamics,
    psi0: np.ndarray,
    family: ProjectorFamily,
    window: tuple[float, float],
    eps_x: float = DEFAULT_EPS_X,
    t_init: float = 0.0,
    samples: int = DEFAULT_WINDOW_SAMPLES,
) -> NtcReport:
    """Evaluate the non-transition condition for ``family`` over ``window``.

    ``psi0`` is the state at ``t_init``; it is propagated to the window
    start, and the leakage of each ``P_mu`` component is tracked on
    ``samples`` equally spaced times through the window.
    """
    proto = as_protocol(dyn)
    times = window_times(window, samples)
    if times[0] < t_init:
        raise ValueError("window starts before the time at which psi0 is given")
    _check_resolution(proto, times)
    psi_a = proto.propagate(np.asarray(psi0, dtype=complex), t_init, float(times[0]))
    leak = ntc_leakage(proto, psi_a, family, times)
    return NtcReport(family, (float(times[0]), float(times[-1])), times, leak, eps_x)


def ntc_decompose(model: TotalModel, psi_t: np.ndarray, family: ProjectorFamily) -> list[tuple[float, float]]:
    """Per label, ``(||Pbar H_R P psi||, ||Pbar H_I P psi||)``."""
    shape = model.shape
    shape.check_state(psi_t)
    n, m = shape.apparatus_dim, shape.env_dim
    out = []
    for p in family.projectors:
        chi = (p @ np.asarray(psi_t, dtype=complex).reshape(n, m))
        q = np.eye(n) - p
        sys = q @ (model.h_r @ chi)
        hi_chi = (model.h_i @ chi.ravel()).reshape(n, m)
        inter = q @ hi_chi
        out.append((float(np.linalg.norm(sys)), float(np.linalg.norm(inter))))
    return out


@dataclass(eq=False)
class BlockHamiltonian:
    """``H_mu = P_mu H P_mu`` restricted to ``H_R,mu ⊗ H_E``.

    ``isometry`` is the ``n x r`` basis of the range of ``P_mu``; restricted
    vectors are laid out as ``(r, N)`` flattened, matching the apparatus-first
    convention.
    """

    mu: object
    isometry: np.ndarray
    h_mu: np.ndarray
    shape: SpaceShape

    @cached_property
    def propagator(self) -> Propagator:
        return Propagator(self.h_mu)

    @property
    def rank(self) -> int:
        return self.isometry.shape[1]

    def restrict(self, psi: np.ndarray) -> np.ndarray:
        n, m = self.shape.apparatus_dim, self.shape.env_dim
        return (self.isometry.conj().T @ np.asarray(psi).reshape(n, m)).ravel()

    def embed(self, chi: np.ndarray) -> np.ndarray:
        m = self.shape.env_dim
        return (self.isometry @ np.asarray(chi).reshape(self.rank, m)).ravel()

    def embed_many(self, chis: np.ndarray) -> np.ndarray:
        m = self.shape.env_dim
        t = chis.shape[0]
        return np.einsum("ar,trk->tak", self.isometry, chis.reshape(t, self.rank, m)).reshape(t, -1)

    def embedded_operator(self) -> np.ndarray:
        q = np.kron(self.isometry, np.eye(self.shape.env_dim))
        return q @ self.h_mu @ q.conj().T

    def evolve_component(self, psi_mu: np.ndarray, dt: float) -> np.ndarray:
        """``P_mu exp(-i H_mu dt) P_mu psi_mu`` in the full space."""
        return self.embed(self.propagator.apply(self.restrict(psi_mu), dt))


def block_hamiltonians(model: TotalModel, family: ProjectorFamily) -> list[BlockHamiltonian]:
    """One :class:`BlockHamiltonian` per label of ``family``."""
    m = model.env_dim
    blocks = []
    for mu in family.labels:
        q = family.isometry(mu)
        qe = np.kron(q, np.eye(m))
        h = qe.conj().T @ model.h_total @ qe
        blocks.append(BlockHamiltonian(mu, q, (h + h.conj().T) / 2, model.shape))
    return blocks


def block_evolve(block: BlockHamiltonian, psi_mu: np.ndarray, times: Sequence[float], atol: float = 1e-10) -> np.ndarray:
    """Evolve a component of ``H_mu`` with ``exp(-i H_mu t)``; ``times`` relative to the window start."""
    psi_mu = np.asarray(psi_mu, dtype=complex)
    chi = block.restrict(psi_mu)
    outside = np.linalg.norm(psi_mu - block.embed(chi))
    if outside > atol:
        raise ValueError(f"component has weight {outside:.3e} outside subspace {block.mu!r}")
    traj = block.propagator.evolve(chi, np.asarray(times, dtype=float))
    return block.embed_many(traj)


@dataclass
class IsolatableReport:
    isolated: bool
    residual: float
    prediction_error: float
    times: np.ndarray
    reduced: np.ndarray  # (T, n, n) actual
    predicted: np.ndarray  # (T, n, n) from apparatus-only evolution


def _product_factors(psi: np.ndarray, shape: SpaceShape, atol: float = 1e-10):
    n, m = shape.apparatus_dim, shape.env_dim
    u, s, vh = np.linalg.svd(np.asarray(psi).reshape(n, m))
    if s.size > 1 and s[1] > atol:
        raise ValueError(f"psi0 is not a product state (second Schmidt coefficient {s[1]:.3e})")
    return u[:, 0] * s[0], vh[0].conj()


def isolatable_check(
    model: TotalModel,
    psi0: np.ndarray,
    times: Sequence[float],
    eps_x: float = DEFAULT_EPS_X,
) -> IsolatableReport:
    """Test ``H_I Psi(t) ≈ 0`` and compare ``rho_re`` with apparatus-only evolution."""
    psi0 = np.asarray(psi0, dtype=complex)
    psi_r, _ = _product_factors(psi0, model.shape)
    times = np.asarray(times, dtype=float)
    traj = model.propagator.evolve(psi0, times - times[0])
    hi_norm = np.linalg.norm(model.h_i)
    if hi_norm == 0:
        residual = 0.0
    else:
        residual = float(np.max(np.linalg.norm(traj @ model.h_i.T, axis=1)) / hi_norm)
    reduced = reduced_density(traj, model.shape)
    rp = Propagator(model.h_r).evolve(psi_r, times - times[0])
    predicted = np.einsum("ta,tb->tab", rp, rp.conj())
    err = float(np.max(np.abs(reduced - predicted)))
    return IsolatableReport(residual <= eps_x, residual, err, times, reduced, predicted)


def require_ntc(report: NtcReport, context: str = "") -> None:
    if not report.verdict:
        raise NtcViolation(
            f"non-transition condition violated{(' ' + context) if context else ''}: "
            f"max leakage {report.max_leakage:.3e} > eps_x {report.eps_x:.3e} "
            f"on window {report.window} (label {report.worst_label()!r})"
        )

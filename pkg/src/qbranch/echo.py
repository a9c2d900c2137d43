"""Loschmidt echoes, dephasing factors and decay-rate analysis."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import TimeGrid, block_hamiltonians
from .errors import DimensionError, NtcViolation
from .model import PerturbationStats, ProjectorFamily, TotalModel
from .qcore import Propagator, check_hermitian
from .robservable import Tolerance

REGIMES = ("Gaussian", "FGR", "indeterminate")
FIT_UPPER = 0.9
FIT_LOWER_FACTOR = 3.0
BORDER_BAND = 0.1
MIN_R_SQUARED = 0.8


def _times(grid: TimeGrid | Sequence[float]) -> np.ndarray:
    return grid.times if isinstance(grid, TimeGrid) else np.asarray(grid, dtype=float)


@dataclass
class EchoSeries:
    times: np.ndarray
    amplitude: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.amplitude)

    @property
    def echo(self) -> np.ndarray:
        return np.abs(self.amplitude) ** 2

    def rows(self):
        """``(t, Re m, Im m, |m|, M)`` per sample."""
        m = self.amplitude
        return np.column_stack([self.times, m.real, m.imag, np.abs(m), np.abs(m) ** 2])


def loschmidt_echo(h0: np.ndarray, h1: np.ndarray, psi0: np.ndarray, grid) -> EchoSeries:
    """``m(t) = <psi0| exp(i h1 t) exp(-i h0 t) |psi0>`` on the grid times."""
    check_hermitian(h0, "h0")
    check_hermitian(h1, "h1")
    if h0.shape != h1.shape:
        raise DimensionError(f"h0 {h0.shape} and h1 {h1.shape} differ in shape")
    psi0 = np.asarray(psi0, dtype=complex)
    if psi0.shape[0] != h0.shape[0]:
        raise DimensionError("psi0 does not match the Hamiltonian dimension")
    if abs(np.linalg.norm(psi0) - 1) > 1e-10:
        raise ValueError("psi0 must be normalized")
    t = _times(grid)
    a = Propagator(h0).evolve(psi0, t)
    b = Propagator(h1).evolve(psi0, t)
    return EchoSeries(t, np.einsum("tk,tk->t", b.conj(), a))


def dephasing_factor(
    model: TotalModel,
    mu: int,
    nu: int,
    phi0: np.ndarray,
    grid,
    require_dephasing: bool = True,
) -> EchoSeries:
    """``f_{nu mu}(t) = <phi0| exp(i H^E_nu t) exp(-i H^E_mu t) |phi0>``.

    ``H^E_mu = <mu|H|mu>`` is the environment block of the total Hamiltonian
    for apparatus level ``mu`` in the canonical basis.
    """
    if require_dephasing and not model.is_dephasing():
        raise NtcViolation("dephasing factor needs <mu|H|nu> = 0 for mu != nu")
    if not (0 <= mu < model.n and 0 <= nu < model.n):
        raise ValueError(f"levels {mu}, {nu} out of range for n = {model.n}")
    h_mu = model.env_block(mu, mu)
    h_nu = model.env_block(nu, nu)
    return loschmidt_echo(h_mu, h_nu, phi0, grid)


def generalized_echo(
    model: TotalModel,
    family: ProjectorFamily,
    mu,
    nu,
    m: np.ndarray,
    m_prime: np.ndarray,
    n_vec: np.ndarray,
    n_prime: np.ndarray,
    phi0: np.ndarray,
    grid,
    atol: float = 1e-10,
) -> EchoSeries:
    """``L_G(t) = <phi0| V_{n n'}(t)^+ V_{m m'}(t) |phi0>``.

    ``V_{m m'}(t) = <m| exp(-i H_mu t) |m'>`` is a non-unitary environment
    operator built from the block Hamiltonian of subspace ``mu``; ``m`` and
    ``m'`` must lie in that subspace, ``n`` and ``n'`` in subspace ``nu``.
    """
    if mu == nu:
        raise ValueError("generalized echo compares two distinct subspaces")
    t = _times(grid)
    blocks = {b.mu: b for b in block_hamiltonians(model, family)}
    phi0 = np.asarray(phi0, dtype=complex)

    def branch(label, bra, ket):
        p = family.projector(label)
        for name, v in (("bra", bra), ("ket", ket)):
            v = np.asarray(v, dtype=complex)
            if np.linalg.norm(v - p @ v) > atol:
                raise ValueError(f"{name} vector lies outside subspace {label!r}")
        blk = blocks[label]
        start = blk.restrict(np.kron(np.asarray(ket, dtype=complex), phi0))
        traj = blk.propagator.evolve(start, t).reshape(t.size, blk.rank, model.env_dim)
        coef = blk.isometry.conj().T @ np.asarray(bra, dtype=complex)
        return np.einsum("r,trk->tk", coef.conj(), traj)

    a = branch(mu, m, m_prime)
    b = branch(nu, n_vec, n_prime)
    return EchoSeries(t, np.einsum("tk,tk->t", b.conj(), a))


@dataclass
class EchoReport:
    series: EchoSeries
    epsilon: float
    eps_p: float
    regime: str
    fitted_rate: float
    predicted_rate: float
    predicted_tau_d: float
    saturation: float
    fit_window: tuple[float, float]
    fit_points: int
    r_squared: float
    notes: list[str] = field(default_factory=list)

    @property
    def relative_error(self) -> float:
        if self.predicted_rate == 0:
            return math.inf
        return abs(self.fitted_rate - self.predicted_rate) / self.predicted_rate

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "eps_p": self.eps_p,
            "regime": self.regime,
            "fitted_rate": self.fitted_rate,
            "predicted_rate": self.predicted_rate,
            "relative_error": self.relative_error,
            "predicted_tau_d": self.predicted_tau_d,
            "saturation": self.saturation,
            "fit_window": list(self.fit_window),
            "fit_points": self.fit_points,
            "r_squared": self.r_squared,
            "notes": list(self.notes),
        }


def classify_regime(epsilon: float, eps_p: float) -> str:
    if eps_p == 0:
        return "FGR"
    if math.isinf(eps_p):
        return "Gaussian"
    if abs(epsilon / eps_p - 1) <= BORDER_BAND:
        return "indeterminate"
    return "Gaussian" if epsilon < eps_p else "FGR"


def saturation_level(series: EchoSeries) -> float:
    """Mean of ``|f|^2`` over the final quarter of the series."""
    e = series.echo
    return float(np.mean(e[-max(1, e.size // 4):]))


def fit_window(series: EchoSeries, saturation: float) -> np.ndarray:
    """Indices of the first contiguous run with ``|f| <= 0.9`` and ``|f|^2 >= 3 * saturation``."""
    mag, e = series.magnitude, series.echo
    below_upper = np.flatnonzero(mag <= FIT_UPPER)
    if below_upper.size == 0:
        return np.array([], dtype=int)
    start = below_upper[0]
    floor = FIT_LOWER_FACTOR * saturation
    idx = []
    for i in range(start, e.size):
        if e[i] < floor or mag[i] > FIT_UPPER:
            break
        idx.append(i)
    return np.array(idx, dtype=int)


def _linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def rate_analysis(stats: PerturbationStats, series: EchoSeries, tol: Tolerance = Tolerance()) -> EchoReport:
    """Classify the decay regime and compare the fitted rate with the prediction.

    Rates refer to ``|f|^2``: exponential ``exp(-Gamma t)`` above the
    border, Gaussian ``exp(-eps^2 sigma_v^2 t^2)`` below it.
    """
    eps, eps_p = stats.epsilon, stats.perturbative_border
    regime = classify_regime(eps, eps_p)
    notes: list[str] = []
    if regime == "Gaussian":
        predicted = stats.gaussian_rate
        tau_d = math.sqrt(2 * tol.k) / (eps * stats.sigma_v) if predicted > 0 else math.inf
        decay_time = 1 / math.sqrt(predicted) if predicted > 0 else math.inf
    else:
        predicted = stats.fgr_rate
        tau_d = 2 * tol.k / predicted if predicted > 0 else math.inf
        decay_time = 1 / predicted if predicted > 0 else math.inf
    sat = saturation_level(series)
    t = series.times
    span = float(t[-1] - t[0])
    reached = bool(np.any(series.echo <= FIT_LOWER_FACTOR * sat)) and sat < 0.5
    if span < 3 * decay_time and not reached:
        raise ValueError(
            f"series too short: spans {span:.3g}, needs 3 decay times ({3 * decay_time:.3g}) or saturation"
        )
    idx = fit_window(series, sat)
    if idx.size < 3:
        raise ValueError(f"fit window holds {idx.size} points; refine the grid")
    x = t[idx] - t[0]
    if regime == "Gaussian":
        x = x ** 2
    slope, r2 = _linear_fit(x, np.log(series.echo[idx]))
    fitted = -slope
    if r2 < MIN_R_SQUARED:
        notes.append(f"poor log-linear fit (R^2 = {r2:.3f}); decay not monotone in the window")
        regime = "indeterminate"
    return EchoReport(
        series, eps, eps_p, regime, fitted, predicted, tau_d, sat,
        (float(t[idx[0]]), float(t[idx[-1]])), int(idx.size), r2, notes,
    )

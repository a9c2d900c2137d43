"""Transition rates between split times, the master-equation iteration and apparatus entropy."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .dynamics import Protocol
from .model import computational_family, dephasing_model, philox, product_state, unit_coupling
from .qcore import random_state
from .tree import SplitSpec, Tree

ROW_SUM_ATOL = 1e-9
DELTA_P_FACTOR = 5.0


@dataclass
class TransitionMatrix:
    """Averaged rates ``Gamma_n(mu', mu)`` between split ``n`` and ``n + 1``.

    ``raw`` maps each path label to its row of ``Gamma_n(alpha, mu)``;
    ``rows`` holds the unweighted mean over paths ending in ``mu'`` (NaN when
    no path does) and ``weighted_rows`` the probability-weighted mean.
    """

    step: int
    row_labels: tuple
    col_labels: tuple
    rows: np.ndarray
    weighted_rows: np.ndarray
    raw: dict
    path_weights: dict
    groups: dict
    counts: dict

    def fluctuation(self, label: tuple) -> np.ndarray:
        """``delta Gamma_n(alpha, .)``: deviation of a path's rates from its group mean."""
        mu_prime = label[-1]
        return self.raw[label] - self.rows[self.row_labels.index(mu_prime)]

    def defined(self, mu_prime) -> bool:
        return self.counts.get(mu_prime, 0) > 0

    @property
    def weighting_discrepancy(self) -> float:
        ok = ~np.isnan(self.rows[:, 0])
        if not np.any(ok):
            return 0.0
        return float(np.max(np.abs(self.rows[ok] - self.weighted_rows[ok])))


def _level_paths(tree: Tree, n: int):
    times = tree.split_times
    if tree.rejections:
        raise ValueError("ideal branching needs every branch to split at every schedule entry")
    if n < 1 or n > len(times):
        raise ValueError(f"step {n} outside 1..{len(times)}")
    t_n = times[n - 1]
    paths = tree.paths(t_n)
    for p in paths:
        if len(p.events) != n or abs(p.events[-1][0].time - t_n) > 1e-12:
            raise ValueError("split times are path dependent; master equation needs a shared schedule")
    return t_n, paths


def step_rates(tree: Tree, n: int) -> TransitionMatrix:
    """Rates from the paths just after split ``n`` to the outcomes of split ``n + 1`` (1-based)."""
    times = tree.split_times
    if n >= len(times):
        raise ValueError(f"step {n} has no following split")
    t_n, paths = _level_paths(tree, n)
    t_next = times[n]
    fam_from = tree.schedule[n - 1].family
    fam_to = tree.schedule[n].family
    shape = tree.shape
    a, m = shape.apparatus_dim, shape.env_dim
    comps = np.array([p.component for p in paths])
    evolved = tree.dyn.propagate(comps.T, t_n, t_next).T.reshape(len(paths), a, m)
    raw, weights = {}, {}
    for p, psi in zip(paths, evolved):
        prob = p.probability
        row = np.array([np.linalg.norm(proj @ psi) ** 2 for proj in fam_to.projectors]) / prob
        raw[p.label] = row
        weights[p.label] = prob
    rows = np.full((len(fam_from), len(fam_to)), np.nan)
    wrows = np.full_like(rows, np.nan)
    groups, counts = {}, {}
    for i, mu_prime in enumerate(fam_from.labels):
        members = [p.label for p in paths if p.label[-1] == mu_prime]
        groups[mu_prime] = members
        counts[mu_prime] = len(members)
        if members:
            stack = np.array([raw[lab] for lab in members])
            w = np.array([weights[lab] for lab in members])
            rows[i] = stack.mean(axis=0)
            wrows[i] = (w[:, None] * stack).sum(axis=0) / w.sum()
    return TransitionMatrix(n, fam_from.labels, fam_to.labels, rows, wrows, raw, weights, groups, counts)


def master_step(p: np.ndarray, gamma: TransitionMatrix, weighted: bool = False) -> np.ndarray:
    """``p'_mu = sum_{mu'} Gamma(mu', mu) p_{mu'}``."""
    p = np.asarray(p, dtype=float)
    if abs(p.sum() - 1) > ROW_SUM_ATOL:
        raise ValueError(f"populations sum to {p.sum():.12g}, not 1")
    rows = gamma.weighted_rows if weighted else gamma.rows
    out = np.zeros(rows.shape[1])
    for i, pi in enumerate(p):
        if np.isnan(rows[i, 0]):
            if pi > 0:
                raise ValueError(f"row {gamma.row_labels[i]!r} undefined but carries population {pi:.3g}")
            continue
        out += pi * rows[i]
    return out


def exact_populations(tree: Tree, n: int) -> np.ndarray:
    """``p_mu(t_n)``: total probability of the paths whose ``n``-th outcome is ``mu``."""
    _, paths = _level_paths(tree, n)
    fam = tree.schedule[n - 1].family
    p = np.zeros(len(fam))
    for path in paths:
        p[fam.index(path.label[-1])] += path.probability
    return p


def apparatus_entropy(populations) -> float:
    """``-sum p ln p`` with ``0 ln 0 = 0``."""
    p = np.asarray(populations, dtype=float)
    if np.any(p < -1e-12):
        raise ValueError("populations must be nonnegative")
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


@dataclass
class PopulationSeries:
    steps: np.ndarray
    labels: tuple
    exact: np.ndarray  # (S, L), row k is step k + 1
    master: np.ndarray  # (S, L)
    delta_p: np.ndarray  # (S - 1, L): exact(n + 1) - master_step(exact(n))
    path_counts: np.ndarray  # (S,)
    entropy_r: np.ndarray  # (S,)

    @property
    def bounds(self) -> np.ndarray:
        return DELTA_P_FACTOR / np.sqrt(self.path_counts[:-1])

    @property
    def within_bound(self) -> np.ndarray:
        return np.max(np.abs(self.delta_p), axis=1, initial=0.0) <= self.bounds

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "label", "p_exact", "p_master", "delta_p", "S_R"])
        for k, step in enumerate(self.steps):
            for j, lab in enumerate(self.labels):
                dp = self.delta_p[k - 1, j] if k > 0 else float("nan")
                w.writerow([int(step), lab, _fmt(self.exact[k, j]), _fmt(self.master[k, j]), _fmt(dp),
                            _fmt(self.entropy_r[k])])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def master_vs_exact(tree: Tree, steps: int | None = None) -> PopulationSeries:
    """Compare iterated master-equation populations with exact path sums."""
    n_splits = len(tree.split_times)
    steps = n_splits if steps is None else min(steps, n_splits)
    if steps < 1:
        raise ValueError("tree has no splits")
    labels = tree.schedule[0].family.labels
    exact = np.array([exact_populations(tree, n) for n in range(1, steps + 1)])
    master = np.empty_like(exact)
    master[0] = exact[0]
    delta = np.empty((steps - 1, exact.shape[1]))
    counts = np.array([len(_level_paths(tree, n)[1]) for n in range(1, steps + 1)])
    for n in range(1, steps):
        gamma = step_rates(tree, n)
        master[n] = master_step(master[n - 1], gamma)
        delta[n - 1] = exact[n] - master_step(exact[n - 1], gamma)
    entropy = np.array([apparatus_entropy(p) for p in exact])
    return PopulationSeries(np.arange(1, steps + 1), labels, exact, master, delta, counts, entropy)


def ideal_branching_model(
    n: int,
    env_dim: int,
    seed: int,
    steps: int,
    strength: float = 1.0,
    kick_strength: float = 0.3,
    window: float = 2.0,
    kick_time: float = 1.0,
    tau_d: float | None = None,
) -> tuple[Protocol, np.ndarray, list[SplitSpec]]:
    """Dephasing windows separated by apparatus-mixing kicks, with shared split times.

    Inside a window the interaction is ``sum_mu |mu><mu| ⊗ strength mu V``,
    so the computational family never leaks; each kick adds
    ``kick_strength X ⊗ K`` with a zero-diagonal apparatus operator ``X``.
    Returns the protocol, a random product initial state and the schedule.
    """
    base = dephasing_model(n, env_dim, seed, strength)
    rng = philox(seed + 7)
    x = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
    x = (x + x.conj().T) / 2
    np.fill_diagonal(x, 0.0)
    if n == 2:
        x = np.array([[0, 1], [1, 0]], dtype=complex)
    kick_env = unit_coupling(env_dim, seed + 2)
    kicked = base.with_hamiltonians(h_i=base.h_i + kick_strength * np.kron(x, kick_env))
    period = window + kick_time
    segments = []
    for k in range(steps):
        segments.append((k * period, base))
        segments.append((k * period + window, kicked))
    proto = Protocol(segments)
    fam = computational_family(n)
    tau_d = window / 2 if tau_d is None else tau_d
    schedule = [SplitSpec((k * period, k * period + window), fam, tau_d) for k in range(steps)]
    psi0 = product_state(random_state(n, rng), random_state(env_dim, rng))
    return proto, psi0, schedule


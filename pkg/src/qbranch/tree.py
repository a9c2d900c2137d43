"""Branching trees of projected components and their consistency checks.

A tree is grown from one initial vector along a schedule of candidate
splits. Each candidate names a window and a projector family; a branch is
split only when its own component satisfies the non-transition condition
on that window. Components are stored unnormalized at their creation time
and propagated on demand, so a tree is an immutable snapshot that can be
queried at any time after its initial time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .dynamics import Dynamics, Protocol, as_protocol, block_hamiltonians, ntc_leakage, window_times
from .errors import PathOverflow, SplitRejected, ValueUndefined
from .model import ProjectorFamily
from .qcore import Propagator
from .robservable import Tolerance, coarse_grain

DEFAULT_MAX_PATHS = 4096
PRUNE_PROBABILITY = 1e-30


@dataclass(frozen=True)
class SplitSpec:
    """Candidate split: NTC window, family and decoherence time.

    The split happens at ``window[0] + tau_d`` unless ``split_time`` picks
    another instant in ``[window[0] + tau_d, window[1]]``.
    """

    window: tuple[float, float]
    family: ProjectorFamily
    tau_d: float = 0.0
    split_time: float | None = None

    @property
    def time(self) -> float:
        return self.window[0] + self.tau_d if self.split_time is None else self.split_time


@dataclass(frozen=True)
class SplitEvent:
    index: int
    time: float
    family: ProjectorFamily
    window: tuple[float, float]


@dataclass(eq=False)
class _Node:
    id: int
    parent: int | None
    time: float
    state: np.ndarray
    event: SplitEvent | None = None
    outcome: object = None
    children: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class Rejection:
    """A branch that did not split at schedule entry ``split_index``."""

    node: int
    label: tuple
    split_index: int
    leakage: float


@dataclass
class Path:
    label: tuple
    events: tuple[tuple[SplitEvent, object], ...]
    component: np.ndarray
    node: int

    @property
    def probability(self) -> float:
        return float(np.vdot(self.component, self.component).real)


class Tree:
    """Snapshot of a grown tree; see :func:`grow_tree`."""

    def __init__(self, dyn: Protocol, psi0: np.ndarray, t0: float, schedule: Sequence[SplitSpec],
                 tol: Tolerance, nodes: list[_Node], rejections: list[Rejection]):
        self.dyn = dyn
        self.psi0 = psi0
        self.t0 = t0
        self.schedule = tuple(schedule)
        self.tol = tol
        self._nodes = nodes
        self.rejections = tuple(rejections)

    @property
    def shape(self):
        return self.dyn.shape

    @property
    def split_times(self) -> list[float]:
        return sorted({n.time for n in self._nodes if n.event is not None})

    @property
    def n_nodes(self) -> int:
        return len(self._nodes)

    def node(self, i: int) -> _Node:
        return self._nodes[i]

    def lineage(self, i: int) -> list[_Node]:
        """Nodes from the root down to node ``i``."""
        chain = []
        node = self._nodes[i]
        while True:
            chain.append(node)
            if node.parent is None:
                break
            node = self._nodes[node.parent]
        return chain[::-1]

    def label_of(self, i: int) -> tuple:
        return tuple(n.outcome for n in self.lineage(i)[1:])

    def events_of(self, i: int) -> tuple:
        return tuple((n.event, n.outcome) for n in self.lineage(i)[1:])

    def _active(self, t: float) -> list[_Node]:
        if t < self.t0:
            raise ValueError(f"tree starts at t0 = {self.t0}, queried at t = {t}")
        out = []
        for n in self._nodes:
            if n.time > t:
                continue
            if not n.children or self._nodes[n.children[0]].time > t:
                out.append(n)
        return out

    def ancestor_at(self, i: int, t: float) -> _Node:
        """Deepest ancestor of node ``i`` (possibly itself) existing at time ``t``."""
        chain = self.lineage(i)
        best = chain[0]
        for n in chain:
            if n.time <= t:
                best = n
        return best

    def component(self, i: int, t: float) -> np.ndarray:
        n = self._nodes[i]
        if t < n.time:
            raise ValueError(f"node {i} is created at {n.time}, queried at {t}")
        return self.dyn.propagate(n.state, n.time, t)

    def paths(self, t: float) -> list[Path]:
        """Paths alive at ``t``, ordered by their outcome sequence."""
        out = []
        for n in self._active(t):
            out.append(Path(self.label_of(n.id), self.events_of(n.id), self.component(n.id, t), n.id))
        out.sort(key=lambda p: _sort_key(p.events))
        return out

    def components(self, t: float) -> np.ndarray:
        """``(n_paths, D)`` matrix of components in :meth:`paths` order."""
        ps = self.paths(t)
        return np.array([p.component for p in ps]) if ps else np.empty((0, self.shape.total_dim), complex)

    def probabilities(self, t: float) -> dict:
        return {p.label: p.probability for p in self.paths(t)}

    def psi(self, t: float) -> np.ndarray:
        """Full Schrödinger vector ``U(t, t0) psi0``."""
        return self.dyn.propagate(self.psi0, self.t0, t)

    def to_dict(self, t: float) -> dict:
        return {
            "t0": self.t0,
            "query_time": t,
            "splits": [
                {"index": i, "window": list(s.window), "time": s.time, "labels": [repr(x) for x in s.family.labels]}
                for i, s in enumerate(self.schedule)
            ],
            "paths": [
                {"label": [repr(x) for x in p.label],
                 "split_times": [ev.time for ev, _ in p.events],
                 "probability": p.probability}
                for p in self.paths(t)
            ],
            "rejections": [
                {"label": [repr(x) for x in r.label], "split_index": r.split_index, "leakage": r.leakage}
                for r in self.rejections
            ],
        }


def _sort_key(events) -> tuple:
    return tuple((ev.index, ev.family.index(mu)) for ev, mu in events)


def _validate_schedule(schedule: Sequence[SplitSpec], t0: float) -> None:
    prev_end = t0
    for i, s in enumerate(schedule):
        ta, tb = s.window
        if not tb > ta:
            raise ValueError(f"split {i}: empty window {s.window}")
        if ta < prev_end:
            raise ValueError(f"split {i}: windows must be increasing and non-overlapping")
        if tb - ta < s.tau_d:
            raise SplitRejected(
                f"split {i}: window length {tb - ta:.4g} shorter than tau_d = {s.tau_d:.4g}"
            )
        if not (ta + s.tau_d - 1e-12 <= s.time <= tb + 1e-12):
            raise SplitRejected(
                f"split {i}: split time {s.time:.4g} outside [tau + tau_d, window end] = "
                f"[{ta + s.tau_d:.4g}, {tb:.4g}]"
            )
        prev_end = tb


def grow_tree(
    dyn: Dynamics,
    psi0: np.ndarray,
    schedule: Sequence[SplitSpec],
    tol: Tolerance = Tolerance(),
    t0: float = 0.0,
    samples: int = 41,
    max_paths: int = DEFAULT_MAX_PATHS,
) -> Tree:
    """Grow a tree along ``schedule``, verifying the NTC per branch.

    Branches failing the NTC on a window keep evolving unsplit and are
    listed in :attr:`Tree.rejections`. Children with probability below
    ``1e-30`` are dropped.
    """
    proto = as_protocol(dyn)
    psi0 = np.asarray(psi0, dtype=complex)
    proto.shape.check_state(psi0)
    if abs(np.linalg.norm(psi0) - 1) > 1e-10:
        raise ValueError("psi0 must be normalized")
    _validate_schedule(schedule, t0)
    n, m = proto.shape.apparatus_dim, proto.shape.env_dim
    nodes = [_Node(0, None, t0, psi0)]
    leaves = [0]
    rejections = []
    for k, spec in enumerate(schedule):
        if spec.family.n != n:
            raise ValueError(f"split {k}: family acts on dimension {spec.family.n}, apparatus has {n}")
        times = window_times(spec.window, samples)
        event = SplitEvent(k, spec.time, spec.family, (float(spec.window[0]), float(spec.window[1])))
        new_leaves = []
        for li in leaves:
            leaf = nodes[li]
            psi_a = proto.propagate(leaf.state, leaf.time, times[0])
            leak = float(np.max(ntc_leakage(proto, psi_a, spec.family, times)))
            if leak > tol.eps_x:
                label = tuple(x.outcome for x in _chain(nodes, li)[1:])
                rejections.append(Rejection(li, label, k, leak))
                new_leaves.append(li)
                continue
            psi_s = proto.propagate(psi_a, times[0], spec.time).reshape(n, m)
            for mu, p in zip(spec.family.labels, spec.family.projectors):
                child = (p @ psi_s).ravel()
                if np.vdot(child, child).real <= PRUNE_PROBABILITY:
                    continue
                node = _Node(len(nodes), li, spec.time, child, event, mu)
                nodes.append(node)
                leaf.children.append(node.id)
                new_leaves.append(node.id)
        if len(new_leaves) > max_paths:
            raise PathOverflow(f"split {k} produces {len(new_leaves)} paths > cap {max_paths}")
        leaves = new_leaves
    return Tree(proto, psi0, t0, schedule, tol, nodes, rejections)


def _chain(nodes: list[_Node], i: int) -> list[_Node]:
    out = []
    while i is not None:
        out.append(nodes[i])
        i = nodes[i].parent
    return out[::-1]


def _window_model(proto: Protocol, window: tuple[float, float]):
    k = proto.segment_index(window[0])
    if proto.segment_index(window[1]) != k and not (
        k + 1 < len(proto.starts) and proto.starts[k + 1] == window[1]
    ):
        raise ValueError(f"window {window} spans several Hamiltonian segments")
    return proto.models[k]


def component_via_W(tree: Tree, path: Path, t: float) -> np.ndarray:
    """Rebuild a path component from full propagation between windows and block propagation inside them."""
    proto = tree.dyn
    psi = tree.psi0
    cur = tree.t0
    for ev, mu in path.events:
        ta, tb = ev.window
        psi = proto.propagate(psi, cur, ta)
        block = next(b for b in block_hamiltonians(_window_model(proto, ev.window), ev.family) if b.mu == mu)
        stop = min(tb, t)
        psi = block.embed(block.propagator.apply(block.restrict(psi), stop - ta))
        cur = stop
    return proto.propagate(psi, cur, t)


@dataclass
class DecoherenceMatrix:
    labels: list[tuple]
    entries: np.ndarray
    time: float

    @property
    def max_offdiag(self) -> float:
        d = self.entries
        if d.shape[0] < 2:
            return 0.0
        return float(np.max(np.abs(d - np.diag(np.diag(d)))))

    @property
    def worst_pair(self) -> tuple | None:
        d = np.abs(self.entries - np.diag(np.diag(self.entries)))
        if d.shape[0] < 2:
            return None
        i, j = np.unravel_index(np.argmax(d), d.shape)
        return self.labels[i], self.labels[j]


def decoherence_matrix(tree: Tree, t: float) -> DecoherenceMatrix:
    """Gram matrix ``D_{ab} = <Psi_a(t)|Psi_b(t)>`` over the paths alive at ``t``."""
    paths = tree.paths(t)
    comps = np.array([p.component for p in paths])
    return DecoherenceMatrix([p.label for p in paths], comps.conj() @ comps.T, t)


def _canonical_level(family: ProjectorFamily, mu, atol: float = 1e-12) -> int:
    p = family.projector(mu)
    d = np.real(np.diag(p))
    k = int(np.argmax(d))
    target = np.zeros_like(p)
    target[k, k] = 1
    if np.max(np.abs(p - target)) > atol:
        raise ValueError("environment-space route needs rank-1 projectors on canonical basis states")
    return k


def decoherence_matrix_env(tree: Tree, t: float) -> DecoherenceMatrix:
    """``D`` from environment-space operators only.

    Each path's environment amplitudes ``phi_mu`` are carried through the
    transition blocks ``Y_{mu mu'} = <mu|U|mu'>`` between windows and the
    environment propagators ``exp(-i H^E_mu dt)`` inside them.
    """
    proto = tree.dyn
    n, m = proto.shape.apparatus_dim, proto.shape.env_dim

    @lru_cache(maxsize=None)
    def y_blocks(t1: float, t_start: float) -> np.ndarray:
        return proto.unitary(t1, t_start).reshape(n, m, n, m)

    @lru_cache(maxsize=None)
    def env_prop(window: tuple[float, float], level: int) -> Propagator:
        model = _window_model(proto, window)
        return Propagator(model.env_block(level, level))

    paths = tree.paths(t)
    amps = []
    for p in paths:
        phi = tree.psi0.reshape(n, m)
        cur = tree.t0
        for ev, mu in p.events:
            level = _canonical_level(ev.family, mu)
            ta, tb = ev.window
            y = y_blocks(float(ta), float(cur))
            v = np.einsum("kbl,bl->k", y[level], phi)
            stop = min(tb, t)
            v = env_prop(ev.window, level).apply(v, stop - ta)
            phi = np.zeros((n, m), dtype=complex)
            phi[level] = v
            cur = stop
        y = y_blocks(float(t), float(cur))
        amps.append(np.einsum("akbl,bl->ak", y, phi).ravel())
    a = np.array(amps)
    return DecoherenceMatrix([p.label for p in paths], a.conj() @ a.T, t)


def mixed_state(tree: Tree, t: float) -> np.ndarray:
    """``sum_a |Psi_a(t)><Psi_a(t)|``."""
    c = tree.components(t)
    return c.T @ c.conj()


def probability_of_value(tree: Tree, family: ProjectorFamily, t: float, atol: float | None = None) -> dict:
    """Probability of each value of ``family`` from the paths alive at ``t``.

    Raises :class:`ValueUndefined` when a component has amplitude above
    ``atol`` (default ``eps_x``) outside its dominant subspace.
    """
    atol = tree.tol.eps_x if atol is None else atol
    n, m = tree.shape.apparatus_dim, tree.shape.env_dim
    out = {mu: 0.0 for mu in family.labels}
    for p in tree.paths(t):
        c = p.component.reshape(n, m)
        weights = np.array([np.linalg.norm(proj @ c) ** 2 for proj in family.projectors])
        k = int(np.argmax(weights))
        outside = math.sqrt(max(weights.sum() - weights[k], 0.0))
        if outside > atol:
            split = {mu: float(w) for mu, w in zip(family.labels, weights)}
            raise ValueUndefined(f"path {p.label!r} straddles subspaces: {split}")
        out[family.labels[k]] += p.probability
    return out


def tree_entropy(tree: Tree, t: float) -> float:
    """``-sum_a P_a ln P_a`` over the paths alive at ``t``."""
    probs = np.array([p.probability for p in tree.paths(t)])
    probs = probs[probs > 0]
    return float(-np.sum(probs * np.log(probs)))


def coarse_schedule(schedule: Sequence[SplitSpec], groupings: Mapping[int, Mapping]) -> list[SplitSpec]:
    """Copy of ``schedule`` with the families at the given indices coarse-grained."""
    out = []
    for i, s in enumerate(schedule):
        if i in groupings:
            s = SplitSpec(s.window, coarse_grain(s.family, groupings[i]), s.tau_d, s.split_time)
        out.append(s)
    return out


@dataclass
class CoarseFineComparison:
    mapping: dict  # coarse label -> list of fine labels
    residuals: dict  # coarse label -> ||Psi_a - sum_b Psi_b||
    overlap_residuals: dict  # coarse label -> P_a - sum_b P_b
    unassigned: list
    multiply_assigned: list
    invalid_downstream: list  # (coarse label, split index, coarse leakage)
    passed: bool

    @property
    def max_residual(self) -> float:
        return max(self.residuals.values(), default=0.0)

    @property
    def max_overlap_residual(self) -> float:
        return max((abs(v) for v in self.overlap_residuals.values()), default=0.0)


def _membership(tree: Tree, node_id: int, t_c: float, family: ProjectorFamily, eta, atol: float):
    anc = tree.ancestor_at(node_id, t_c)
    comp = tree.component(anc.id, t_c)
    nrm = np.linalg.norm(comp)
    if nrm == 0:
        return False
    n, m = tree.shape.apparatus_dim, tree.shape.env_dim
    inside = np.linalg.norm(family.projector(eta) @ comp.reshape(n, m))
    outside = math.sqrt(max(nrm ** 2 - inside ** 2, 0.0))
    if outside <= atol * nrm:
        return True
    if inside <= atol * nrm:
        return False
    return None


def compare_coarse_fine(fine: Tree, coarse: Tree, t: float, tol: float = 1e-8) -> CoarseFineComparison:
    """Map coarse paths onto groups of fine paths and check the component sums.

    A fine path belongs to coarse path ``a`` when, at every split time of
    ``a``, its ancestor component lies in the subspace of ``a``'s outcome.
    Coarse branches that failed the NTC at a schedule entry where the
    matching fine paths did split are reported in ``invalid_downstream``.
    """
    if fine.psi0.shape != coarse.psi0.shape or not np.allclose(fine.psi0, coarse.psi0, atol=1e-12, rtol=0):
        raise ValueError("trees were grown from different initial vectors")
    if abs(fine.t0 - coarse.t0) > 1e-12:
        raise ValueError("trees start at different times")
    fpaths = fine.paths(t)
    cpaths = coarse.paths(t)
    owners: dict[tuple, list] = {fp.label: [] for fp in fpaths}
    mapping, residuals, overlaps = {}, {}, {}
    ambiguous = set()
    for cp in cpaths:
        group = []
        for fp in fpaths:
            member = True
            for ev, eta in cp.events:
                r = _membership(fine, fp.node, ev.time, ev.family, eta, tol)
                if r is None:
                    ambiguous.add(fp.label)
                if not r:
                    member = False
                    break
            if member:
                group.append(fp)
                owners[fp.label].append(cp.label)
        mapping[cp.label] = [fp.label for fp in group]
        total = sum((fp.component for fp in group), np.zeros_like(cp.component))
        residuals[cp.label] = float(np.linalg.norm(cp.component - total))
        overlaps[cp.label] = cp.probability - sum(fp.probability for fp in group)
    unassigned = [lab for lab, o in owners.items() if not o]
    # dropped coarse children carry no weight; their fine counterparts must not either
    fp_prob = {fp.label: fp.probability for fp in fpaths}
    unassigned = [lab for lab in unassigned if math.sqrt(fp_prob[lab]) > tol or lab in ambiguous]
    multiple = [lab for lab, o in owners.items() if len(o) > 1]
    invalid = []
    rejected_at: dict[int, list[Rejection]] = {}
    for r in coarse.rejections:
        rejected_at.setdefault(r.node, []).append(r)
    fine_indices = {fp.label: {ev.index for ev, _ in fp.events} for fp in fpaths}
    for cp in cpaths:
        for node in coarse.lineage(cp.node):
            for rej in rejected_at.get(node.id, []):
                if any(rej.split_index in fine_indices[lab] for lab in mapping[cp.label]):
                    invalid.append((cp.label, rej.split_index, rej.leakage))
    passed = (
        all(r <= tol for r in residuals.values()) and not unassigned and not multiple and not invalid
    )
    return CoarseFineComparison(mapping, residuals, overlaps, unassigned, multiple, invalid, passed)


@dataclass
class IvrVerdict:
    passed: bool
    max_offdiag: float
    worst_pair: tuple | None
    worst_time: float | None
    checkpoints: np.ndarray
    coarse_results: list[CoarseFineComparison]
    max_overlap_residual: float
    tree: Tree = field(repr=False)

    @property
    def coarse_pass(self) -> bool:
        return all(c.passed for c in self.coarse_results)


def ivr_check(
    dyn: Dynamics,
    psi0: np.ndarray,
    fine_schedule: Sequence[SplitSpec],
    coarse_variants: Sequence[Sequence[SplitSpec]],
    t_end: float,
    tol: Tolerance = Tolerance(),
    t0: float = 0.0,
    checkpoints: int = 21,
    samples: int = 41,
    max_paths: int = DEFAULT_MAX_PATHS,
) -> IvrVerdict:
    """Check diagonality of ``D`` through ``t_end`` and compatibility of every coarse variant.

    ``D`` is sampled on ``checkpoints`` equally spaced times plus every split
    time; transient recoherence between samples can be missed.
    """
    fine = grow_tree(dyn, psi0, fine_schedule, tol, t0, samples, max_paths)
    times = np.union1d(np.linspace(t0, t_end, checkpoints), [s for s in fine.split_times if s <= t_end])
    worst, pair, when = 0.0, None, None
    for t in times:
        d = decoherence_matrix(fine, float(t))
        if d.max_offdiag > worst:
            worst, pair, when = d.max_offdiag, d.worst_pair, float(t)
    results = []
    for variant in coarse_variants:
        coarse = grow_tree(dyn, psi0, variant, tol, t0, samples, max_paths)
        results.append(compare_coarse_fine(fine, coarse, t_end, tol.eps_x))
    overlap = max((c.max_overlap_residual for c in results), default=0.0)
    passed = worst <= tol.eps_x and all(c.passed for c in results)
    return IvrVerdict(passed, worst, pair, when, times, results, overlap, fine)

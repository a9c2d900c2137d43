"""Ready-made protocols used by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import Protocol
from .model import (
    TotalModel,
    band_center_state,
    computational_family,
    dephasing_model,
    perturbation_stats,
    philox,
    product_state,
)
from .robservable import Tolerance
from .tree import SplitSpec


@dataclass
class TreeScenario:
    protocol: Protocol
    psi0: np.ndarray
    schedule: list[SplitSpec]
    t_end: float
    coarse_variants: list[list[SplitSpec]]
    tau_d: float


def fgr_decoherence_time(model: TotalModel, tol: Tolerance, mu: int = 0, nu: int = 1) -> float:
    """Predicted time for ``|f_{nu mu}|`` to fall to ``eps_x`` from the golden-rule rate."""
    stats = perturbation_stats(model, mu, nu)
    return 2 * tol.k / stats.fgr_rate


def _equal_superposition(n: int, levels=(0, 1)) -> np.ndarray:
    psi = np.zeros(n, dtype=complex)
    psi[list(levels)] = 1 / np.sqrt(len(levels))
    return psi


def dephasing_ivr_scenario(env_dim: int = 512, seed: int = 0, strength: float = 0.8,
                           tol: Tolerance = Tolerance(1e-3)) -> TreeScenario:
    """Two levels, chaotic environment, two splits in the energy basis, ``t_end = 3 tau_d``."""
    model = dephasing_model(2, env_dim, seed, strength)
    tau_d = fgr_decoherence_time(model, tol)
    phi = band_center_state(model.env_block(0, 0), philox(seed + 100))
    psi0 = product_state(_equal_superposition(2), phi)
    fam = computational_family(2)
    schedule = [
        SplitSpec((0.0, 1.2 * tau_d), fam, tau_d),
        SplitSpec((1.2 * tau_d, 3.0 * tau_d), fam, tau_d),
    ]
    coarse = [[SplitSpec(s.window, computational_family(2, [[0, 1]]), s.tau_d) if i == 0 else s
               for i, s in enumerate(schedule)]]
    return TreeScenario(Protocol.from_model(model), psi0, schedule, 3.0 * tau_d, coarse, tau_d)


def recoherence_scenario(env_dim: int = 512, seed: int = 0, strength: float = 0.8,
                         tol: Tolerance = Tolerance(1e-3), pulse_time: float = 0.1) -> TreeScenario:
    """Split, run the Hamiltonian backwards to undo decoherence, rotate the apparatus, split again.

    After the reversed segment both branches share the initial environment
    state, so the rotated branches overlap inside one subspace and the
    second split produces off-diagonal ``D`` entries of size 1/4.
    """
    model = dephasing_model(2, env_dim, seed, strength)
    tau_d = fgr_decoherence_time(model, tol)
    big_t = 1.5 * tau_d
    reverse = TotalModel(model.shape, -model.h_r, -model.h_e, -model.h_i)
    sy = np.array([[0, -1j], [1j, 0]])
    pulse = TotalModel(model.shape, (np.pi / 4) / pulse_time * sy, np.zeros_like(model.h_e),
                       np.zeros_like(model.h_i))
    t_pulse = 2 * big_t
    t_after = t_pulse + pulse_time
    proto = Protocol([(0.0, model), (big_t, reverse), (t_pulse, pulse), (t_after, model)])
    phi = band_center_state(model.env_block(0, 0), philox(seed + 100))
    psi0 = product_state(_equal_superposition(2), phi)
    fam = computational_family(2)
    schedule = [
        SplitSpec((0.0, big_t), fam, tau_d),
        SplitSpec((t_after, t_after + 1.2 * tau_d), fam, 0.5 * tau_d),
    ]
    return TreeScenario(proto, psi0, schedule, t_after + 1.2 * tau_d, [], tau_d)


def coarse_downstream_scenario(env_dim: int = 64, seed: int = 0, strength: float = 0.8,
                        coupling: float = 1.0, tol: Tolerance = Tolerance(1e-6)) -> TreeScenario:
    """Three levels: a dephasing segment, then a segment that mixes levels 1 and 2.

    The fine schedule splits in the energy basis twice. The coarse variant
    merges levels 0 and 1 at the first split and keeps the second split
    unchanged; the merged branch then leaks at the second split while its
    fine level-0 descendant does not.
    """
    model = dephasing_model(3, env_dim, seed, strength)
    mix = np.zeros((3, 3), dtype=complex)
    mix[1, 2] = mix[2, 1] = coupling
    seg_b = TotalModel(model.shape, mix, model.h_e, np.zeros_like(model.h_i))
    t_b = 2.0
    proto = Protocol([(0.0, model), (t_b, seg_b)])
    rng = philox(seed + 100)
    phi = band_center_state(model.h_e, rng)
    psi0 = product_state(np.ones(3, dtype=complex) / np.sqrt(3), phi)
    fam = computational_family(3)
    schedule = [SplitSpec((0.0, t_b), fam, 1.0), SplitSpec((t_b, t_b + 2.0), fam, 1.0)]
    coarse = [[
        SplitSpec(schedule[0].window, computational_family(3, [[0, 1], [2]], labels=("01", "2")), 1.0),
        schedule[1],
    ]]
    return TreeScenario(proto, psi0, schedule, t_b + 2.0, coarse, 1.0)

"""Dense complex linear algebra on apparatus-first tensor-product spaces.

States are 1-D complex arrays and operators 2-D complex arrays; the
:class:`SpaceShape` carries the factor dimensions. The apparatus factor is
always the leftmost Kronecker factor, so an apparatus index ``mu`` and an
environment index ``k`` map to the flat index ``mu * N + k``.

Units: hbar = 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DimensionError, NonHermitianError

HERMITIAN_ATOL = 1e-12


@dataclass(frozen=True)
class SpaceShape:
    """Factor dimensions of a tensor-product space, apparatus first."""

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims or any(d < 1 for d in dims):
            raise DimensionError(f"factor dimensions must be >= 1, got {self.dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def total_dim(self) -> int:
        return prod(self.dims)

    @property
    def apparatus_dim(self) -> int:
        return self.dims[0]

    @property
    def env_dim(self) -> int:
        return prod(self.dims[1:])

    def check_state(self, psi: np.ndarray) -> None:
        if psi.shape[0] != self.total_dim:
            raise DimensionError(
                f"state of length {psi.shape[0]} does not fit shape {self.dims}"
            )

    def check_operator(self, op: np.ndarray) -> None:
        if op.shape != (self.total_dim, self.total_dim):
            raise DimensionError(
                f"operator of shape {op.shape} does not fit shape {self.dims}"
            )


@dataclass(frozen=True)
class Spectral:
    """Eigendecomposition ``A = V diag(eigenvalues) V^dagger``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def propagator(self, dt: float) -> np.ndarray:
        v = self.eigenvectors
        return (v * np.exp(-1j * self.eigenvalues * dt)) @ v.conj().T


def is_hermitian(a: np.ndarray, atol: float = HERMITIAN_ATOL) -> bool:
    a = np.asarray(a)
    return a.ndim == 2 and a.shape[0] == a.shape[1] and np.allclose(
        a, a.conj().T, rtol=0.0, atol=atol
    )


def check_hermitian(a: np.ndarray, name: str = "operator", atol: float = HERMITIAN_ATOL):
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")
    dev = np.max(np.abs(a - a.conj().T)) if a.size else 0.0
    if dev > atol:
        raise NonHermitianError(f"{name} is not Hermitian (max |A - A^+| = {dev:.3e})")


def tensor(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product with ``a`` as the leftmost (apparatus) factor.

    Works for operators (2-D) and states (1-D); both arguments must have the
    same number of dimensions.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != b.ndim or a.ndim not in (1, 2):
        raise DimensionError("tensor() needs two states or two operators")
    if a.ndim == 2 and (a.shape[0] != a.shape[1] or b.shape[0] != b.shape[1]):
        raise DimensionError("tensor() operator factors must be square")
    return np.kron(a, b)


def embed(op_r: np.ndarray, shape: SpaceShape) -> np.ndarray:
    """``op_r ⊗ I_E`` for an operator acting on the apparatus factor."""
    op_r = np.asarray(op_r)
    if op_r.shape != (shape.apparatus_dim, shape.apparatus_dim):
        raise DimensionError(
            f"apparatus operator {op_r.shape} does not fit apparatus dim {shape.apparatus_dim}"
        )
    return np.kron(op_r, np.eye(shape.env_dim))


def partial_trace_env(rho: np.ndarray, shape: SpaceShape) -> np.ndarray:
    """Trace out every factor except the apparatus.

    Args:
        rho: density operator on the full space.
        shape: factor structure of ``rho``.

    Returns:
        The ``n x n`` reduced density matrix of the apparatus.
    """
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise DimensionError(f"density operator must be square, got {rho.shape}")
    shape.check_operator(rho)
    n, m = shape.apparatus_dim, shape.env_dim
    return np.einsum("akbk->ab", rho.reshape(n, m, n, m))


def reduced_density(psi: np.ndarray, shape: SpaceShape) -> np.ndarray:
    """Apparatus reduced density matrix of a pure state (any norm).

    Also accepts a stack of states with shape ``(T, D)``; returns ``(T, n, n)``.
    """
    psi = np.asarray(psi)
    n, m = shape.apparatus_dim, shape.env_dim
    if psi.ndim == 1:
        shape.check_state(psi)
        a = psi.reshape(n, m)
        return a @ a.conj().T
    a = psi.reshape(psi.shape[0], n, m)
    return np.einsum("tak,tbk->tab", a, a.conj())


def eigh(a: np.ndarray) -> Spectral:
    """Hermitian eigendecomposition with ascending eigenvalues."""
    check_hermitian(a)
    w, v = linalg.eigh(np.asarray(a, dtype=complex))
    return Spectral(w, v)


def propagator(h: np.ndarray, dt: float) -> np.ndarray:
    """``exp(-i h dt)`` through the eigendecomposition of ``h``."""
    return eigh(h).propagator(dt)


class Propagator:
    """Cached spectral propagation for one time-independent Hamiltonian.

    The Hamiltonian is split into the connected components of its nonzero
    pattern (exactly invariant subspaces) and each block is diagonalized
    once. Dephasing-form models therefore cost ``n`` eigendecompositions of
    size ``N`` instead of one of size ``n*N``.

    Instances are immutable after construction and safe to share between
    threads.
    """

    def __init__(self, h: np.ndarray):
        h = np.asarray(h, dtype=complex)
        check_hermitian(h, "Hamiltonian")
        self.dim = h.shape[0]
        pattern = csr_matrix(np.abs(h) > 0)
        ncomp, labels = connected_components(pattern, directed=False)
        blocks = []
        for c in range(ncomp):
            idx = np.flatnonzero(labels == c)
            sub = h[np.ix_(idx, idx)]
            w, v = linalg.eigh(sub)
            blocks.append((idx, w, v))
        self._blocks = blocks
        self.is_zero = not np.any(h)

    @property
    def n_blocks(self) -> int:
        return len(self._blocks)

    def eigenvalues(self) -> np.ndarray:
        return np.sort(np.concatenate([w for _, w, _ in self._blocks]))

    def matrix(self, dt: float) -> np.ndarray:
        u = np.zeros((self.dim, self.dim), dtype=complex)
        for idx, w, v in self._blocks:
            u[np.ix_(idx, idx)] = (v * np.exp(-1j * w * dt)) @ v.conj().T
        return u

    def apply(self, psi: np.ndarray, dt: float) -> np.ndarray:
        """``exp(-i H dt) psi`` for a state or a ``(D, k)`` stack of columns."""
        psi = np.asarray(psi, dtype=complex)
        if dt == 0.0 or self.is_zero:
            return psi.copy()
        out = np.empty_like(psi)
        for idx, w, v in self._blocks:
            coef = v.conj().T @ psi[idx]
            phase = np.exp(-1j * w * dt)
            coef = coef * (phase if coef.ndim == 1 else phase[:, None])
            out[idx] = v @ coef
        return out

    def evolve(self, psi: np.ndarray, times: Sequence[float]) -> np.ndarray:
        """Trajectory ``exp(-i H t) psi`` for each ``t``; shape ``(T, D)``."""
        psi = np.asarray(psi, dtype=complex)
        times = np.asarray(times, dtype=float)
        out = np.empty((times.size, self.dim), dtype=complex)
        for idx, w, v in self._blocks:
            coef = v.conj().T @ psi[idx]
            phases = np.exp(-1j * np.outer(times, w))
            out[:, idx] = (phases * coef) @ v.T
        return out


def normalize(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    nrm = np.linalg.norm(psi)
    if nrm == 0:
        raise ValueError("cannot normalize the zero vector")
    return psi / nrm


def random_state(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random normalized state."""
    z = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    return z / np.linalg.norm(z)


def random_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random unitary (QR with phase fix)."""
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def random_hermitian(dim: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    z = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    return scale * (z + z.conj().T) / 2

"""Probe control Hamiltonian and the block decomposition of the coupling.

The probe is a qubit with bias Hamiltonian ``H_P = (λ/2) σ_(θ,φ)``, where
``σ_(θ,φ) = sinθ cosφ σ_x + sinθ sinφ σ_y + cosθ σ_z``. Its eigenvectors
``π₀`` (eigenvalue +1) and ``π₁`` (eigenvalue −1) form the *control basis*.
Any probe–system operator ``V_PS`` (which by convention already contains the
bare system Hamiltonian ``H_S``) splits into four system operators in that
basis::

    V_PS = |π₀⟩⟨π₀|⊗A₀ + |π₀⟩⟨π₁|⊗B + |π₁⟩⟨π₀|⊗B† + |π₁⟩⟨π₁|⊗A₁

``A₀`` and ``A₁`` are Hermitian and describe how the system evolves while the
probe sits in either control state; ``B`` drives probe flips.

Probe pure states are stored through their overlaps with the control basis,
``a_k = ⟨α|π_k⟩``, which is the form in which they enter every expansion
coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .linalg import (
    DimensionError,
    HermitianOperator,
    as_matrix,
    check_density,
    is_hermitian,
)

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)

MEMBERSHIP_TOL = 1e-9


def _check_angles(theta: float, phi: float) -> None:
    if not (0.0 <= theta <= np.pi):
        raise ValueError(f"theta must lie in [0, π], got {theta}")
    if not (0.0 <= phi < 2 * np.pi):
        raise ValueError(f"phi must lie in [0, 2π), got {phi}")


@dataclass(frozen=True)
class ProbeControl:
    """Bias magnitude and direction of the probe Hamiltonian."""

    lam: float
    theta: float = 0.0
    phi: float = 0.0

    def __post_init__(self) -> None:
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and non-negative, got {self.lam}")
        _check_angles(self.theta, self.phi)

    def hamiltonian(self) -> NDArray[np.complex128]:
        """The 2×2 probe Hamiltonian ``(λ/2) σ_(θ,φ)``."""
        return 0.5 * self.lam * control_pauli(self.theta, self.phi)


@dataclass(frozen=True, eq=False)
class ControlBasis:
    """Orthonormal eigenvectors of ``σ_(θ,φ)`` for eigenvalues +1 and −1."""

    pi0: NDArray[np.complex128]
    pi1: NDArray[np.complex128]

    @property
    def matrix(self) -> NDArray[np.complex128]:
        """Unitary whose columns are ``π₀`` and ``π₁``."""
        return np.column_stack([self.pi0, self.pi1])

    def projector(self, k: int) -> NDArray[np.complex128]:
        v = self.pi0 if k == 0 else self.pi1
        return np.outer(v, v.conj())


@dataclass(frozen=True)
class ProbePureState:
    """A probe pure state given by its overlaps ``a_k = ⟨α|π_k⟩``.

    The state vector itself is ``|α⟩ = Σ_k a_k* |π_k⟩``.
    """

    a0: complex
    a1: complex

    def __post_init__(self) -> None:
        norm = abs(self.a0) ** 2 + abs(self.a1) ** 2
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"probe state is not normalised (|a0|²+|a1|² = {norm!r})")

    @classmethod
    def control(cls, k: int) -> "ProbePureState":
        """The control eigenstate ``π_k``."""
        if k not in (0, 1):
            raise ValueError("control index must be 0 or 1")
        return cls(1.0 + 0j, 0j) if k == 0 else cls(0j, 1.0 + 0j)

    @classmethod
    def from_components(cls, c0: complex, c1: complex) -> "ProbePureState":
        """State ``c0|π₀⟩ + c1|π₁⟩`` (normalised here)."""
        norm = np.sqrt(abs(c0) ** 2 + abs(c1) ** 2)
        if norm == 0:
            raise ValueError("zero vector is not a state")
        return cls(complex(np.conj(c0) / norm), complex(np.conj(c1) / norm))

    @classmethod
    def bloch(cls, polar: float, azimuth: float) -> "ProbePureState":
        """State at Bloch angles measured from ``π₀`` in the control frame."""
        return cls.from_components(
            np.cos(polar / 2), np.exp(1j * azimuth) * np.sin(polar / 2)
        )

    @property
    def overlaps(self) -> NDArray[np.complex128]:
        return np.array([self.a0, self.a1], dtype=np.complex128)

    def vector(self, basis: ControlBasis) -> NDArray[np.complex128]:
        """Probe state vector in the computational (σ_z) basis."""
        return np.conj(self.a0) * basis.pi0 + np.conj(self.a1) * basis.pi1

    def sigma_expectation(self) -> float:
        """``⟨σ_(θ,φ)⟩ = |a₀|² − |a₁|²`` in this state."""
        return float(abs(self.a0) ** 2 - abs(self.a1) ** 2)

    def control_index(self, tol: float = MEMBERSHIP_TOL) -> int | None:
        """Index k if the state equals ``π_k`` within ``tol``, else ``None``."""
        if abs(abs(self.a0) - 1.0) <= tol:
            return 0
        if abs(abs(self.a1) - 1.0) <= tol:
            return 1
        return None


def control_pauli(theta: float, phi: float) -> NDArray[np.complex128]:
    """``σ_(θ,φ) = sinθ cosφ σ_x + sinθ sinφ σ_y + cosθ σ_z``."""
    _check_angles(theta, phi)
    return (
        np.sin(theta) * np.cos(phi) * SIGMA_X
        + np.sin(theta) * np.sin(phi) * SIGMA_Y
        + np.cos(theta) * SIGMA_Z
    )


def control_eigenbasis(theta: float, phi: float) -> ControlBasis:
    """Eigenvectors of ``σ_(θ,φ)`` with the core phase convention applied."""
    vals, vecs = HermitianOperator(control_pauli(theta, phi)).eig()
    # Ascending order puts the −1 eigenvector first.
    return ControlBasis(pi0=vecs[:, 1].copy(), pi1=vecs[:, 0].copy())


@dataclass(frozen=True, eq=False)
class CouplingBlocks:
    """The operators ``(A₀, A₁, B)`` of a coupling written in a control basis."""

    a0: HermitianOperator
    a1: HermitianOperator
    b: NDArray[np.complex128]

    def __post_init__(self) -> None:
        d = self.a0.dim
        if self.a1.dim != d or self.b.shape != (d, d):
            raise DimensionError("A0, A1 and B must share one square dimension")

    @classmethod
    def from_arrays(cls, a0: ArrayLike, a1: ArrayLike, b: ArrayLike) -> "CouplingBlocks":
        return cls(HermitianOperator(a0), HermitianOperator(a1), as_matrix(b, "B"))

    @property
    def dim(self) -> int:
        return self.a0.dim

    @property
    def bdag(self) -> NDArray[np.complex128]:
        return self.b.conj().T

    def reassemble(self, basis: ControlBasis) -> NDArray[np.complex128]:
        """Rebuild ``V_PS`` on probe⊗system from the blocks."""
        p0, p1 = basis.pi0, basis.pi1
        return (
            np.kron(np.outer(p0, p0.conj()), self.a0.matrix)
            + np.kron(np.outer(p0, p1.conj()), self.b)
            + np.kron(np.outer(p1, p0.conj()), self.bdag)
            + np.kron(np.outer(p1, p1.conj()), self.a1.matrix)
        )


def combine_coupling(h_s: ArrayLike | None, v: ArrayLike | None) -> NDArray[np.complex128]:
    """``V_PS = I_P ⊗ H_S + V`` from an optional system Hamiltonian and coupling."""
    if h_s is None and v is None:
        raise ValueError("need at least one of H_S and V")
    total = None
    if v is not None:
        total = as_matrix(v, "V").copy()
    if h_s is not None:
        lifted = np.kron(np.eye(2), as_matrix(h_s, "H_S"))
        total = lifted if total is None else total + lifted
    return total


def decompose_coupling(v_ps: ArrayLike, basis: ControlBasis) -> CouplingBlocks:
    """Split a probe⊗system operator into ``(A₀, A₁, B)`` in the given basis.

    Raises:
        ValueError: If ``v_ps`` is not Hermitian.
        DimensionError: If ``v_ps`` does not have even square dimension.
    """
    v = as_matrix(v_ps, "V_PS")
    n = v.shape[0]
    if v.shape != (n, n) or n % 2:
        raise DimensionError(f"V_PS must be square with even dimension, got {v.shape}")
    if not is_hermitian(v):
        raise ValueError("V_PS is not Hermitian")
    d = n // 2
    v4 = v.reshape(2, d, 2, d)

    def block(bra: NDArray, ket: NDArray) -> NDArray[np.complex128]:
        return np.einsum("i,iajb,j->ab", bra.conj(), v4, ket)

    return CouplingBlocks(
        a0=HermitianOperator(block(basis.pi0, basis.pi0)),
        a1=HermitianOperator(block(basis.pi1, basis.pi1)),
        b=block(basis.pi0, basis.pi1),
    )


def rotate_blocks(blocks_z: CouplingBlocks, theta: float, phi: float) -> CouplingBlocks:
    """Blocks in the ``(θ, φ)`` control basis from blocks computed at θ = 0.

    With ``c = cos(θ/2)``, ``s = sin(θ/2)`` and the basis
    ``π₀ = (c, e^{iφ}s)``, ``π₁ = (−e^{−iφ}s, c)``::

        A₀ᶜ = c²A₀ + s²A₁ + cs(e^{iφ}B + e^{−iφ}B†)
        A₁ᶜ = s²A₀ + c²A₁ − cs(e^{iφ}B + e^{−iφ}B†)
        Bᶜ  = −e^{−iφ}[e^{−iφ}s²B† − e^{iφ}c²B + cs(A₀ − A₁)]

    The result agrees with :func:`decompose_coupling` in
    :func:`control_eigenbasis` up to one global phase on ``B`` that comes from
    the eigenvector phase convention.
    """
    _check_angles(theta, phi)
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    a0, a1, b = blocks_z.a0.matrix, blocks_z.a1.matrix, blocks_z.b
    eb = np.exp(1j * phi) * b
    mix = eb + eb.conj().T
    return CouplingBlocks(
        a0=HermitianOperator(c * c * a0 + s * s * a1 + c * s * mix),
        a1=HermitianOperator(s * s * a0 + c * c * a1 - c * s * mix),
        b=-np.exp(-1j * phi)
        * (np.exp(-1j * phi) * s * s * b.conj().T - c * c * eb + c * s * (a0 - a1)),
    )


@dataclass(frozen=True, eq=False)
class ProbeSystemModel:
    """A complete probing setup: coupling, system state and control direction.

    Attributes:
        v_ps: Probe⊗system operator ``V_PS`` (probe factor first), which
            includes the bare system Hamiltonian.
        rho_s: Initial system density operator.
        theta: Polar angle of the bias direction.
        phi: Azimuthal angle of the bias direction.
    """

    v_ps: NDArray[np.complex128]
    rho_s: NDArray[np.complex128]
    theta: float = 0.0
    phi: float = 0.0

    def __post_init__(self) -> None:
        v = as_matrix(self.v_ps, "V_PS")
        rho = check_density(self.rho_s)
        if v.shape != (2 * rho.shape[0],) * 2:
            raise DimensionError(
                f"V_PS shape {v.shape} does not match 2 × system dimension {rho.shape[0]}"
            )
        if not is_hermitian(v):
            raise ValueError("V_PS is not Hermitian")
        _check_angles(self.theta, self.phi)
        v = v.copy()
        rho = rho.copy()
        v.setflags(write=False)
        rho.setflags(write=False)
        object.__setattr__(self, "v_ps", v)
        object.__setattr__(self, "rho_s", rho)

    @classmethod
    def from_parts(
        cls,
        rho_s: ArrayLike,
        h_s: ArrayLike | None = None,
        v: ArrayLike | None = None,
        theta: float = 0.0,
        phi: float = 0.0,
    ) -> "ProbeSystemModel":
        return cls(combine_coupling(h_s, v), np.asarray(rho_s, dtype=np.complex128), theta, phi)

    @classmethod
    def from_blocks(
        cls,
        blocks: CouplingBlocks,
        rho_s: ArrayLike,
        theta: float = 0.0,
        phi: float = 0.0,
    ) -> "ProbeSystemModel":
        basis = control_eigenbasis(theta, phi)
        return cls(blocks.reassemble(basis), np.asarray(rho_s, dtype=np.complex128), theta, phi)

    @property
    def dim_s(self) -> int:
        return self.rho_s.shape[0]

    @cached_property
    def basis(self) -> ControlBasis:
        return control_eigenbasis(self.theta, self.phi)

    @cached_property
    def blocks(self) -> CouplingBlocks:
        return decompose_coupling(self.v_ps, self.basis)

    def total_hamiltonian(self, lam: float) -> NDArray[np.complex128]:
        """``H_tot = H_P ⊗ I + V_PS`` at bias ``lam``."""
        hp = ProbeControl(lam, self.theta, self.phi).hamiltonian()
        return np.kron(hp, np.eye(self.dim_s)) + self.v_ps


def random_bounded_matrix(rng: np.random.Generator, dim: int) -> NDArray[np.complex128]:
    """Matrix with real and imaginary parts uniform in [−1, 1], so ``|m_jk| ≤ √2``."""
    return rng.uniform(-1, 1, (dim, dim)) + 1j * rng.uniform(-1, 1, (dim, dim))


def random_hermitian(rng: np.random.Generator, dim: int) -> NDArray[np.complex128]:
    """Hermitian part of :func:`random_bounded_matrix`; entries stay within √2."""
    m = random_bounded_matrix(rng, dim)
    return 0.5 * (m + m.conj().T)


def random_density(rng: np.random.Generator, dim: int) -> NDArray[np.complex128]:
    """Full-rank density operator ``GG†/tr(GG†)`` from a complex Gaussian ``G``."""
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def random_model(
    rng: np.random.Generator, dim_s: int, theta: float = 0.0, phi: float = 0.0
) -> ProbeSystemModel:
    """Random bounded ``V_PS`` on probe⊗system and a random full-rank ``ρ_S``."""
    v = random_hermitian(rng, 2 * dim_s)
    return ProbeSystemModel(v, random_density(rng, dim_s), theta, phi)

"""Dense complex linear algebra used by every other module.

Operators are plain ``numpy`` arrays of dtype ``complex128``. The only wrapper
type is :class:`HermitianOperator`, which validates Hermiticity once and caches
its eigendecomposition so that repeated evolutions of the same Hamiltonian do
not re-diagonalise it.

Conventions
-----------
* ħ = 1: energies are angular frequencies and times are their inverse.
* In composite spaces the probe factor always comes first, so a probe⊗system
  operator has the probe index as the slow (outer) index.
* Eigenvalues are returned in ascending order. Each eigenvector is rotated so
  that its largest-magnitude component is real and positive, with ties broken
  by the lowest index. This makes cached decompositions reproducible.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

MAX_HILBERT_DIM = 4096
"""Default upper bound on the dimension of any constructed operator."""

HERMITIAN_RTOL = 1e-12
DENSITY_TOL = 1e-10
_PHASE_TIE_TOL = 1e-10


class DimensionError(ValueError):
    """Raised when operator shapes are inconsistent or exceed the size cap."""


class EigenDecompositionError(RuntimeError):
    """Raised when the LAPACK Hermitian eigensolver fails to converge."""


def as_matrix(m: ArrayLike, name: str = "matrix") -> NDArray[np.complex128]:
    """Return ``m`` as a finite two-dimensional complex array.

    Args:
        m: Anything convertible to a 2-D array.
        name: Label used in error messages.

    Raises:
        DimensionError: If ``m`` is not two-dimensional or is empty.
        ValueError: If ``m`` contains NaN or infinite entries.
    """
    arr = np.asarray(m, dtype=np.complex128)
    if arr.ndim != 2 or arr.size == 0:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _as_square(m: ArrayLike, name: str) -> NDArray[np.complex128]:
    arr = as_matrix(m, name)
    if arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {arr.shape}")
    return arr


def is_hermitian(m: NDArray[np.complex128], rtol: float = HERMITIAN_RTOL) -> bool:
    """Check ``‖M − M†‖_max ≤ rtol·‖M‖_max``."""
    scale = np.max(np.abs(m)) if m.size else 0.0
    return bool(np.max(np.abs(m - m.conj().T)) <= rtol * max(scale, 1e-300))


def tensor_product(
    a: ArrayLike, b: ArrayLike, max_dim: int = MAX_HILBERT_DIM
) -> NDArray[np.complex128]:
    """Kronecker product ``a ⊗ b`` with ``a`` as the outer (slow) factor.

    Raises:
        DimensionError: If the result would exceed ``max_dim`` rows or columns.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    rows, cols = a.shape[0] * b.shape[0], a.shape[1] * b.shape[1]
    if max(rows, cols) > max_dim:
        raise DimensionError(
            f"tensor product of shape ({rows}, {cols}) exceeds the maximum dimension {max_dim}"
        )
    return np.kron(a, b)


def partial_trace_system(
    m: ArrayLike, dim_probe: int, dim_sys: int
) -> NDArray[np.complex128]:
    """Trace out the system factor of a probe⊗system operator.

    Args:
        m: Operator of shape ``(dim_probe·dim_sys, dim_probe·dim_sys)``.
        dim_probe: Dimension of the retained (outer) factor.
        dim_sys: Dimension of the traced (inner) factor.

    Returns:
        The ``dim_probe × dim_probe`` reduced operator.
    """
    m = as_matrix(m, "m")
    n = dim_probe * dim_sys
    if m.shape != (n, n):
        raise DimensionError(
            f"operator shape {m.shape} does not match dim_probe·dim_sys = {n}"
        )
    return np.einsum("ikjk->ij", m.reshape(dim_probe, dim_sys, dim_probe, dim_sys))


def _fix_phases(vecs: NDArray[np.complex128]) -> NDArray[np.complex128]:
    mags = np.abs(vecs)
    peak = mags.max(axis=0)
    # First row whose magnitude is within the tie tolerance of the column maximum.
    idx = np.argmax(mags >= (peak - _PHASE_TIE_TOL)[None, :], axis=0)
    pivots = vecs[idx, np.arange(vecs.shape[1])]
    return vecs * (np.abs(pivots) / pivots)[None, :]


class HermitianOperator:
    """A validated Hermitian matrix with a lazily cached eigendecomposition.

    The stored matrix is read-only. The eigendecomposition is computed on first
    access and published with a single attribute assignment, so concurrent
    readers either see nothing and compute the identical result themselves, or
    see the finished tuple.

    Args:
        matrix: Square complex matrix.
        check: Validate Hermiticity (``‖M − M†‖_max ≤ 1e−12·‖M‖_max``).

    Raises:
        ValueError: If ``check`` is set and the matrix is not Hermitian.
    """

    __slots__ = ("_matrix", "_eig")

    def __init__(self, matrix: ArrayLike, check: bool = True) -> None:
        arr = _as_square(matrix, "Hermitian operator").copy()
        if check and not is_hermitian(arr):
            raise ValueError("matrix is not Hermitian within tolerance")
        # Exact symmetrisation removes rounding asymmetry below the tolerance.
        arr = 0.5 * (arr + arr.conj().T)
        arr.setflags(write=False)
        self._matrix = arr
        self._eig: tuple[NDArray[np.float64], NDArray[np.complex128]] | None = None

    @property
    def matrix(self) -> NDArray[np.complex128]:
        return self._matrix

    @property
    def dim(self) -> int:
        return self._matrix.shape[0]

    def eig(self) -> tuple[NDArray[np.float64], NDArray[np.complex128]]:
        """Eigenvalues (ascending) and phase-fixed eigenvectors as columns."""
        cached = self._eig
        if cached is None:
            try:
                vals, vecs = scipy.linalg.eigh(self._matrix, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise EigenDecompositionError(
                    f"Hermitian eigensolver did not converge: {exc}"
                ) from exc
            vecs = _fix_phases(vecs)
            vals.setflags(write=False)
            vecs.setflags(write=False)
            cached = (vals, vecs)
            self._eig = cached
        return cached

    @property
    def eigenvalues(self) -> NDArray[np.float64]:
        return self.eig()[0]

    @property
    def eigenvectors(self) -> NDArray[np.complex128]:
        return self.eig()[1]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self._matrix, dtype=dtype)

    def __repr__(self) -> str:
        return f"HermitianOperator(dim={self.dim})"


def as_hermitian(h: HermitianOperator | ArrayLike) -> HermitianOperator:
    """Wrap ``h`` in a :class:`HermitianOperator` unless it already is one."""
    return h if isinstance(h, HermitianOperator) else HermitianOperator(h)


def eig_hermitian(
    h: HermitianOperator | ArrayLike,
) -> tuple[NDArray[np.float64], NDArray[np.complex128]]:
    """Eigendecomposition ``H = V diag(E) V†`` with the module phase convention."""
    return as_hermitian(h).eig()


def evolve_unitary(h: HermitianOperator | ArrayLike, t: float) -> NDArray[np.complex128]:
    """Return ``exp(−i h t)`` computed from the spectral decomposition."""
    if not np.isfinite(t):
        raise ValueError("evolution time must be finite")
    vals, vecs = eig_hermitian(h)
    return (vecs * np.exp(-1j * vals * t)[None, :]) @ vecs.conj().T


def check_density(rho: ArrayLike, tol: float = DENSITY_TOL) -> NDArray[np.complex128]:
    """Validate a density operator and return it as a complex array.

    A valid density operator is Hermitian to 1e−12, has unit trace within
    ``tol`` and no eigenvalue below ``−tol``.

    Raises:
        ValueError: If any of the conditions fails.
    """
    arr = _as_square(rho, "density operator")
    if not is_hermitian(arr):
        raise ValueError("density operator is not Hermitian")
    tr = np.trace(arr)
    if abs(tr - 1.0) > tol:
        raise ValueError(f"density operator trace {tr.real:.12g} differs from 1")
    if np.linalg.eigvalsh(0.5 * (arr + arr.conj().T))[0] < -tol:
        raise ValueError("density operator has a negative eigenvalue")
    return arr


def pure_state_density(psi: ArrayLike) -> NDArray[np.complex128]:
    """Return ``|ψ⟩⟨ψ|`` for a normalised state vector."""
    v = np.asarray(psi, dtype=np.complex128).ravel()
    return np.outer(v, v.conj())


def thermal_state(h: HermitianOperator | ArrayLike, kT: float) -> NDArray[np.complex128]:
    """Gibbs state ``exp(−h/kT)/Z``; ``kT = 0`` gives the (uniform) ground manifold."""
    vals, vecs = eig_hermitian(h)
    if kT <= 0:
        w = np.isclose(vals, vals[0], rtol=0, atol=1e-12 * max(1.0, abs(vals[0])))
        weights = w.astype(float)
    else:
        weights = np.exp(-(vals - vals[0]) / kT)
    weights /= weights.sum()
    return (vecs * weights[None, :]) @ vecs.conj().T

"""Closed-form 1/λ expansion of the transition probability.

For a probe prepared in ``|α⟩`` and measured in ``|β⟩``, with overlaps
``a_k = ⟨α|π_k⟩`` and ``b_k = ⟨β|π_k⟩``, the transition probability at large
bias is::

    p_{β:α} ≈ q + 2 Re X,    q = |b₀a₀*|² + |b₁a₁*|²

    X = a₀a₁* b₀*b₁ ζ⁽⁰⁾
      + (1/λ) [a₀a₁* ⟨σ⟩_β ζ⁽¹⁾ + b₀*b₁ (|a₀|² ξ₀⁽¹⁾ − |a₁|² ξ₁⁽¹⁾)]
      − (⟨σ⟩_β/λ²) (|a₀|² ξ₀⁽²⁾ − |a₁|² ξ₁⁽²⁾)

where ``⟨σ⟩_β = |b₀|² − |b₁|²`` and, writing ``⟨X⟩ = tr(X ρ_S)`` and
``U_k = exp(−i A_k τ)``::

    ζ⁽⁰⁾  = e^{iλτ} ⟨U₀† U₁⟩
    ζ⁽¹⁾  = ⟨B⟩ − e^{iλτ} ⟨U₀† B U₁⟩
    ξ₀⁽¹⁾ = ⟨U₀† B† U₀⟩ − e^{iλτ} ⟨U₀† U₁ B†⟩
    ξ₁⁽¹⁾ = ⟨U₁† B† U₁⟩ − e^{iλτ} ⟨B† U₀† U₁⟩
    ξ₀⁽²⁾ = ½⟨BB†⟩ + ½⟨U₀† BB† U₀⟩ − e^{iλτ} ⟨U₀† B U₁ B†⟩
    ξ₁⁽²⁾ = ½⟨B†B⟩ + ½⟨U₁† B†B U₁⟩ − e^{iλτ} ⟨B† U₀† B U₁⟩

Every function is an explicit combination ``f = f_const + e^{iλτ} f_osc`` of
λ-independent correlation functions, so the whole λ-dependence at fixed τ is a
single oscillation of frequency τ.

The 1/λ² term is complete only when both probe states are control
eigenstates. For other choices the unlisted second-order pieces (which
include a secular bias shift) are not part of this expansion, so only the
leading order is reported there.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .linalg import check_density, evolve_unitary
from .model import CouplingBlocks, ProbePureState

NEAR_MEMBER_WARN = 1e-3

FUNCTION_NAMES = ("zeta0", "zeta1", "xi1_0", "xi1_1", "xi2_0", "xi2_1")


class NearControlStateWarning(UserWarning):
    """A probe state is close to, but not exactly, a control eigenstate."""


@dataclass(frozen=True)
class Correlations:
    """The λ-independent system expectation values at one interaction time.

    The row numbering follows the standard table of deducible quantities:

    ===  ====================================
    1    ⟨e^{iA₀τ} e^{−iA₁τ}⟩
    2    ⟨e^{iA₀τ} B e^{−iA₁τ}⟩
    3    ⟨e^{iA₀τ} e^{−iA₁τ} B†⟩
    4    ⟨B† e^{iA₀τ} e^{−iA₁τ}⟩
    5    ⟨e^{iA₀τ} B† e^{−iA₀τ}⟩ (``row5_1`` for A₁)
    6    ⟨e^{iA₀τ} B e^{−iA₁τ} B†⟩
    7    ⟨B† e^{iA₀τ} B e^{−iA₁τ}⟩
    8    ⟨e^{iA₀τ} BB† e^{−iA₀τ}⟩
    9    ⟨e^{iA₁τ} B†B e^{−iA₁τ}⟩
    ===  ====================================

    ``mean_b``, ``bbd`` and ``bdb`` hold ⟨B⟩, ⟨BB†⟩ and ⟨B†B⟩.
    """

    tau: float
    mean_b: complex
    bbd: complex
    bdb: complex
    row1: complex
    row2: complex
    row3: complex
    row4: complex
    row5: complex
    row5_1: complex
    row6: complex
    row7: complex
    row8: complex
    row9: complex

    def row(self, n: int | str) -> complex:
        return getattr(self, f"row{n}")


def correlations(blocks: CouplingBlocks, rho_s: ArrayLike, tau: float) -> Correlations:
    """Evaluate all correlation functions at interaction time ``tau``."""
    rho = np.asarray(rho_s, dtype=np.complex128)
    u0 = evolve_unitary(blocks.a0, tau)
    u1 = evolve_unitary(blocks.a1, tau)
    b, bd = blocks.b, blocks.bdag
    u0d, u1d = u0.conj().T, u1.conj().T

    def ev(m: NDArray) -> complex:
        return complex(np.trace(m @ rho))

    return Correlations(
        tau=float(tau),
        mean_b=ev(b),
        bbd=ev(b @ bd),
        bdb=ev(bd @ b),
        row1=ev(u0d @ u1),
        row2=ev(u0d @ b @ u1),
        row3=ev(u0d @ u1 @ bd),
        row4=ev(bd @ u0d @ u1),
        row5=ev(u0d @ bd @ u0),
        row5_1=ev(u1d @ bd @ u1),
        row6=ev(u0d @ b @ u1 @ bd),
        row7=ev(bd @ u0d @ b @ u1),
        row8=ev(u0d @ b @ bd @ u0),
        row9=ev(u1d @ bd @ b @ u1),
    )


@dataclass(frozen=True)
class ExpansionFunctions:
    """ζ/ξ functions at one (λ, τ), stored as λ-independent parts.

    Each function equals ``const + e^{iλτ}·osc``; the named properties return
    the assembled values at ``lam``.
    """

    tau: float
    lam: float
    const: tuple[complex, ...]
    osc: tuple[complex, ...]

    def _value(self, i: int) -> complex:
        return self.const[i] + np.exp(1j * self.lam * self.tau) * self.osc[i]

    @property
    def zeta0(self) -> complex:
        return self._value(0)

    @property
    def zeta1(self) -> complex:
        return self._value(1)

    @property
    def xi1_0(self) -> complex:
        return self._value(2)

    @property
    def xi1_1(self) -> complex:
        return self._value(3)

    @property
    def xi2_0(self) -> complex:
        return self._value(4)

    @property
    def xi2_1(self) -> complex:
        return self._value(5)

    def as_dict(self) -> dict[str, complex]:
        return {name: self._value(i) for i, name in enumerate(FUNCTION_NAMES)}

    def at(self, lam: float) -> "ExpansionFunctions":
        """Same functions at another bias value."""
        return ExpansionFunctions(self.tau, float(lam), self.const, self.osc)

    @classmethod
    def from_correlations(cls, corr: Correlations, lam: float) -> "ExpansionFunctions":
        const = (
            0j,
            corr.mean_b,
            corr.row5,
            corr.row5_1,
            0.5 * (corr.bbd + corr.row8),
            0.5 * (corr.bdb + corr.row9),
        )
        osc = (corr.row1, -corr.row2, -corr.row3, -corr.row4, -corr.row6, -corr.row7)
        return cls(corr.tau, float(lam), const, osc)


def expansion_functions(
    blocks: CouplingBlocks, rho_s: ArrayLike, lam: float, tau: float
) -> ExpansionFunctions:
    """ζ⁽⁰⁾, ζ⁽¹⁾, ξ₀⁽¹⁾, ξ₁⁽¹⁾, ξ₀⁽²⁾, ξ₁⁽²⁾ at bias ``lam`` and time ``tau``."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return ExpansionFunctions.from_correlations(correlations(blocks, rho_s, tau), lam)


def transfer_weight(prep: ProbePureState, meas: ProbePureState) -> float:
    """``q_{β:α} = |b₀a₀*|² + |b₁a₁*|²``, the probability with no coherence."""
    a, b = prep.overlaps, meas.overlaps
    return float(abs(b[0] * np.conj(a[0])) ** 2 + abs(b[1] * np.conj(a[1])) ** 2)


def _order_coefficients(
    prep: ProbePureState, meas: ProbePureState
) -> tuple[NDArray[np.complex128], NDArray[np.complex128], NDArray[np.complex128]]:
    """Coefficient vectors over FUNCTION_NAMES for the 1, 1/λ and 1/λ² terms."""
    a0, a1 = prep.overlaps
    b0, b1 = meas.overlaps
    sb = meas.sigma_expectation()
    w0 = abs(a0) ** 2
    w1 = abs(a1) ** 2
    c0 = np.zeros(6, dtype=np.complex128)
    c1 = np.zeros(6, dtype=np.complex128)
    c2 = np.zeros(6, dtype=np.complex128)
    c0[0] = a0 * np.conj(a1) * np.conj(b0) * b1
    c1[1] = a0 * np.conj(a1) * sb
    c1[2] = np.conj(b0) * b1 * w0
    c1[3] = -np.conj(b0) * b1 * w1
    c2[4] = -sb * w0
    c2[5] = sb * w1
    return c0, c1, c2


@dataclass(frozen=True)
class LeadingOrderClass:
    """Leading power of 1/λ in ``p − q`` and the coefficient that multiplies it.

    Attributes:
        order: 0, 1 or 2.
        case: ``"general"``, ``"prep-control"``, ``"meas-control"`` or
            ``"both-control"``.
        prep_index: k if the preparation is ``π_k``.
        meas_index: k if the measurement is ``π_k``.
        coefficients: Weights over the six expansion functions such that
            ``X = λ^{−order} Σ_i coefficients[i]·f_i``.
        sigma_beta_vanishes: True when ``⟨σ⟩_β = 0`` removes the ζ⁽¹⁾ and ξ⁽²⁾
            terms from the expansion altogether.
    """

    order: int
    case: str
    prep_index: int | None
    meas_index: int | None
    coefficients: tuple[complex, ...]
    sigma_beta_vanishes: bool = False

    def x_value(self, functions: ExpansionFunctions) -> complex:
        """The leading-order coefficient ``X`` evaluated on ``functions``."""
        vals = np.array([functions.as_dict()[n] for n in FUNCTION_NAMES])
        return complex(np.dot(self.coefficients, vals) / functions.lam**self.order)

    def split(self, functions: ExpansionFunctions) -> tuple[complex, complex]:
        """``(X_const, X_osc)`` with ``X = X_const + e^{iλτ} X_osc``, before λ scaling."""
        coeff = np.asarray(self.coefficients)
        return complex(np.dot(coeff, functions.const)), complex(np.dot(coeff, functions.osc))


def _near_member_warning(state: ProbePureState, label: str, tol: float) -> None:
    for amp in (state.a0, state.a1):
        gap = abs(abs(amp) - 1.0)
        if tol < gap < NEAR_MEMBER_WARN:
            warnings.warn(
                f"{label} state is within {gap:.1e} of a control eigenstate but outside "
                f"the membership tolerance; small coefficients may hide the leading order",
                NearControlStateWarning,
                stacklevel=3,
            )


def classify_leading_order(
    prep: ProbePureState, meas: ProbePureState, tol: float = 1e-9
) -> LeadingOrderClass:
    """Leading 1/λ order of ``p_{β:α} − q`` for the given probe states."""
    _near_member_warning(prep, "preparation", tol)
    _near_member_warning(meas, "measurement", tol)
    kp = prep.control_index(tol)
    km = meas.control_index(tol)
    c0, c1, c2 = _order_coefficients(prep, meas)
    sb_zero = abs(meas.sigma_expectation()) < tol
    if kp is None and km is None:
        return LeadingOrderClass(0, "general", None, None, tuple(c0), sb_zero)
    if kp is not None and km is None:
        return LeadingOrderClass(1, "prep-control", kp, None, tuple(c1), sb_zero)
    if kp is None and km is not None:
        return LeadingOrderClass(1, "meas-control", None, km, tuple(c1), sb_zero)
    return LeadingOrderClass(2, "both-control", kp, km, tuple(c2), sb_zero)


def perturbative_probability(
    blocks: CouplingBlocks,
    rho_s: ArrayLike,
    prep: ProbePureState,
    meas: ProbePureState,
    lam: float,
    tau: float,
    order: int = 2,
    dyson_fallback: bool = False,
) -> float:
    """``q`` plus ``2 Re`` of the expansion terms up to 1/λ^order.

    For a general (α, β) pair only the zeroth order is complete. Requesting a
    higher order there returns the zeroth-order value with a warning, unless
    ``dyson_fallback`` is set, in which case the Dyson sum over total orders
    ``x + y ≤ 2·order`` is returned instead.
    """
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    rho = check_density(rho_s)
    cls = classify_leading_order(prep, meas)
    if cls.order == 0 and order > 0:
        if dyson_fallback:
            from .dynamics import DysonExpansion

            return DysonExpansion(blocks, rho, prep, meas, lam, tau, cap=2 * order).partial_sum(
                2 * order
            )
        warnings.warn(
            "only the zeroth order is available in closed form for general probe states",
            stacklevel=2,
        )
        order = 0
    fun = expansion_functions(blocks, rho, lam, tau)
    vals = np.array([fun.as_dict()[n] for n in FUNCTION_NAMES])
    coeffs = _order_coefficients(prep, meas)
    x = sum(np.dot(coeffs[k], vals) / lam**k for k in range(order + 1))
    return transfer_weight(prep, meas) + 2.0 * float(np.real(x))


@dataclass(frozen=True)
class OscillationPrediction:
    """Predicted ``2 Re X = η + D cos(λτ + φ)``.

    When ``scale`` is 1 the values refer to ``λ^order (p − q)``; otherwise they
    refer to ``p − q`` at the bias used for the prediction.
    """

    eta: float
    D: float
    phi: float
    order: int
    scale: float


def oscillation_model(
    cls: LeadingOrderClass, functions: ExpansionFunctions, lam: float | None = None
) -> OscillationPrediction:
    """Offset, amplitude and phase of the leading λ-oscillation.

    Args:
        cls: Leading-order classification of the probe states.
        functions: Expansion functions at the τ of interest.
        lam: If given, include the ``λ^{−order}`` envelope at this bias;
            otherwise report the envelope-normalised values.
    """
    x_const, x_osc = cls.split(functions)
    scale = 1.0 if lam is None else float(lam) ** (-cls.order)
    return OscillationPrediction(
        eta=2.0 * float(np.real(x_const)) * scale,
        D=2.0 * abs(x_osc) * scale,
        phi=float(np.angle(x_osc)) if abs(x_osc) > 0 else 0.0,
        order=cls.order,
        scale=scale,
    )


def leading_series_scale(cls: LeadingOrderClass) -> tuple[str, complex]:
    """Correlation row measured by the e^{iλτ} part of ``X`` and its coefficient.

    Returns ``(row, factor)`` such that ``D e^{iφ} = 2·factor·row(τ)`` for
    envelope-normalised fits, so the row value is recovered as
    ``D e^{iφ} / (2·factor)``.
    """
    coeff = np.asarray(cls.coefficients)
    nz = [i for i in range(6) if abs(coeff[i]) > 0]
    if not nz:
        raise ValueError("this probe configuration has no oscillating term")
    rows = {0: ("row1", 1.0), 1: ("row2", -1.0), 2: ("row3", -1.0), 3: ("row4", -1.0),
            4: ("row6", -1.0), 5: ("row7", -1.0)}
    if len(nz) > 1:
        raise ValueError("the oscillation mixes several correlation rows")
    name, sign = rows[nz[0]]
    return name, complex(sign * coeff[nz[0]])

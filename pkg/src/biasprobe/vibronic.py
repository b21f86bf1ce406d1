"""Donor–acceptor pair coupled to discrete vibrational modes.

The probe is a donor–acceptor pair with bias λ and tunnelling V; each mode k
of frequency ω_k displaces by ``γ_dk`` or ``γ_ak`` depending on the probe
state. After the polaron transformation with ``u_Xk = γ_Xk/ω_k`` the blocks
are ``A₀ = A₁ = Σ ω_k b_k†b_k`` (up to constants that lower the bias by the
reorganisation energy ``E_r = Σ ω_k(u_dk² − u_ak²)``) and
``B = V Π_k D(u_dk − u_ak)``.

For thermal modes the donor-to-acceptor probability at second order is::

    p_{a:d} = (2V²/λ²) [1 − e^{f(τ)} cos((λ − E_r)τ − φ_B(τ))]

    f(τ)   = −Σ_j Δu_j² coth(ω_j/2k_BT) (1 − cos ω_jτ)
    φ_B(τ) =  Σ_j Δu_j² sin ω_jτ,        Δu_j = u_dj − u_aj

Setting ``literal=True`` in :func:`analytic_probability` gives the simpler
commonly quoted form ``(V²/λ²)[2 − cos((λ − E_r)τ) e^{f(τ)}]`` instead.

Units: energies in meV, times in ps, temperatures in kelvin. Internally time
is converted to inverse energy with ħ = 0.6582119569 meV·ps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.optimize
import scipy.special
from numpy.typing import ArrayLike, NDArray

from .estimation import (
    SpectrumEstimate,
    TauSeries,
    find_peaks,
    fit_oscillation,
    fourier_spectrum,
    period_windows,
)
from .model import CouplingBlocks, ProbePureState
from .validity import DEFAULT_MARGIN

HBAR_MEV_PS = 0.6582119569
K_B_MEV_PER_K = 0.08617333
THERMOMETRY_BRACKET = (0.1, 1e4)
DEFAULT_MODE_THRESHOLD = 0.05

DONOR = ProbePureState.control(0)
ACCEPTOR = ProbePureState.control(1)


class ValidityWarning(UserWarning):
    """The parameters leave the regime where the second-order formula holds."""


class ThermometryError(ValueError):
    """The data do not determine a temperature."""


def _coth(x: NDArray[np.float64]) -> NDArray[np.float64]:
    # ω/2k_BT overflows to inf for vanishing T, where coth correctly tends to 1.
    return 1.0 / np.tanh(x)


def _coth_of_ratio(omega: ArrayLike, kT: float) -> NDArray[np.float64]:
    with np.errstate(over="ignore"):
        return _coth(np.asarray(omega, dtype=float) / (2 * kT))


@dataclass(frozen=True)
class VibronicModel:
    """Spin-boson parameters of a donor–acceptor pair.

    Attributes:
        omega: Mode frequencies ω_k in meV.
        gamma_d: Donor couplings γ_dk in meV.
        gamma_a: Acceptor couplings γ_ak in meV.
        V: Tunnelling energy in meV.
        lam: Bias λ in meV.
        temperature: Temperature in kelvin; 0 means the vacuum state.
    """

    omega: NDArray[np.float64]
    gamma_d: NDArray[np.float64]
    gamma_a: NDArray[np.float64]
    V: float
    lam: float
    temperature: float

    def __post_init__(self) -> None:
        om = np.atleast_1d(np.asarray(self.omega, dtype=float))
        gd = np.atleast_1d(np.asarray(self.gamma_d, dtype=float))
        ga = np.atleast_1d(np.asarray(self.gamma_a, dtype=float))
        if not (om.shape == gd.shape == ga.shape) or om.ndim != 1:
            raise ValueError("omega, gamma_d and gamma_a must be equally long 1-D arrays")
        if np.any(om <= 0):
            raise ValueError("mode frequencies must be positive")
        if self.V <= 0:
            raise ValueError("tunnelling energy V must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.lam < DEFAULT_MARGIN * self.V:
            warnings.warn(
                f"λ = {self.lam} meV is not much larger than V = {self.V} meV",
                ValidityWarning,
                stacklevel=2,
            )
        for name, arr in (("omega", om), ("gamma_d", gd), ("gamma_a", ga)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def u_d(self) -> NDArray[np.float64]:
        return self.gamma_d / self.omega

    @property
    def u_a(self) -> NDArray[np.float64]:
        return self.gamma_a / self.omega

    @property
    def delta_u(self) -> NDArray[np.float64]:
        return self.u_d - self.u_a

    @property
    def reorganization_energy(self) -> float:
        """``E_r = Σ ω_k (u_dk² − u_ak²)``."""
        return float(np.sum(self.omega * (self.u_d**2 - self.u_a**2)))

    @property
    def kT(self) -> float:
        return K_B_MEV_PER_K * self.temperature

    @property
    def thermal_factors(self) -> NDArray[np.float64]:
        """``coth(ω_k/2k_BT)``, equal to 1 at zero temperature."""
        if self.temperature == 0:
            return np.ones_like(self.omega)
        return _coth_of_ratio(self.omega, self.kT)

    @property
    def spectral_weights(self) -> NDArray[np.float64]:
        """``(γ_dk − γ_ak)²``, the weights of J(ω) at each ω_k."""
        return (self.gamma_d - self.gamma_a) ** 2

    def with_lambda(self, lam: float) -> "VibronicModel":
        return VibronicModel(self.omega, self.gamma_d, self.gamma_a, self.V, lam, self.temperature)

    def tau_max(self, margin: float = DEFAULT_MARGIN) -> float:
        """Longest interaction time in ps with ``λ ≥ margin·τV²``."""
        return self.lam / (margin * self.V**2) * HBAR_MEV_PS


def _dimless(tau_ps: ArrayLike) -> NDArray[np.float64]:
    return np.asarray(tau_ps, dtype=float) / HBAR_MEV_PS


def f_tau(model: VibronicModel, tau: ArrayLike) -> NDArray[np.float64] | float:
    """``f(τ) = −Σ_j Δu_j² coth(ω_j/2k_BT)(1 − cos ω_jτ)`` with τ in ps."""
    t = _dimless(tau)
    w = model.delta_u**2 * model.thermal_factors
    out = -np.sum(w[:, None] * (1 - np.cos(np.outer(model.omega, np.atleast_1d(t)))), axis=0)
    return float(out[0]) if np.ndim(tau) == 0 else out.reshape(np.shape(tau))


def phase_shift(model: VibronicModel, tau: ArrayLike) -> NDArray[np.float64] | float:
    """``φ_B(τ) = Σ_j Δu_j² sin ω_jτ`` with τ in ps."""
    t = _dimless(tau)
    out = np.sum(
        (model.delta_u**2)[:, None] * np.sin(np.outer(model.omega, np.atleast_1d(t))), axis=0
    )
    return float(out[0]) if np.ndim(tau) == 0 else out.reshape(np.shape(tau))


def analytic_probability(
    model: VibronicModel, tau: ArrayLike, literal: bool = False, warn: bool = True
) -> NDArray[np.float64] | float:
    """Second-order donor-to-acceptor probability at interaction time τ (ps).

    Args:
        model: Model parameters; ``model.lam`` is the bias.
        tau: Interaction time(s) in ps.
        literal: Use ``(V²/λ²)[2 − cos((λ−E_r)τ)e^f]`` instead of the form
            that matches exact dynamics.
        warn: Emit a :class:`ValidityWarning` for τ beyond :meth:`VibronicModel.tau_max`.
    """
    t = np.asarray(tau, dtype=float)
    if warn and np.any(t > model.tau_max()):
        warnings.warn(
            f"τ up to {np.max(t):.4g} ps exceeds τ_max = {model.tau_max():.4g} ps",
            ValidityWarning,
            stacklevel=2,
        )
    pref = model.V**2 / model.lam**2
    arg = (model.lam - model.reorganization_energy) * _dimless(t)
    env = np.exp(f_tau(model, t))
    if literal:
        out = pref * (2 - np.cos(arg) * env)
    else:
        out = 2 * pref * (1 - env * np.cos(arg - phase_shift(model, t)))
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Displacement operators and the truncated Fock oracle
# ---------------------------------------------------------------------------


def displacement_matrix_element(m: int, n: int, xi: complex) -> complex:
    """``⟨m|D(ξ)|n⟩`` for ``D(ξ) = exp(ξb† − ξ*b)``.

    For ``m ≥ n`` this is ``√(n!/m!) ξ^{m−n} e^{−|ξ|²/2} L_n^{(m−n)}(|ξ|²)``;
    the case ``m < n`` follows from ``D(ξ)† = D(−ξ)``.
    """
    if m < 0 or n < 0:
        raise ValueError("occupation numbers must be non-negative")
    xi = complex(xi)
    x = abs(xi) ** 2
    if m >= n:
        lo, hi, z = n, m, xi
    else:
        lo, hi, z = m, n, -np.conj(xi)
    k = hi - lo
    log_norm = 0.5 * (scipy.special.gammaln(lo + 1) - scipy.special.gammaln(hi + 1)) - x / 2
    lag = scipy.special.eval_genlaguerre(lo, k, x)
    return complex(np.exp(log_norm) * z**k * lag)


def displacement_matrix(xi: complex, cutoff: int) -> NDArray[np.complex128]:
    """Matrix of ``D(ξ)`` on the Fock states ``0 … cutoff−1``."""
    return np.array(
        [[displacement_matrix_element(m, n, xi) for n in range(cutoff)] for m in range(cutoff)],
        dtype=np.complex128,
    )


def _mode_operator(single: NDArray, k: int, cutoffs: list[int]) -> NDArray:
    out = np.ones((1, 1))
    for j, c in enumerate(cutoffs):
        out = np.kron(out, single if j == k else np.eye(c))
    return out


def fock_blocks(model: VibronicModel, cutoff: int) -> tuple[CouplingBlocks, NDArray[np.complex128]]:
    """Polaron-frame blocks and thermal state in a truncated Fock space.

    The blocks are ``A₀ = Σω b†b − Σω u_d²``, ``A₁ = Σω b†b − Σω u_a²`` and
    ``B = V Π_k D(Δu_k)``, so a bias λ on these blocks reproduces the bias
    ``λ − E_r`` of the transformed Hamiltonian. The state is the Gibbs state
    of ``Σω b†b`` at the model temperature.

    Args:
        model: Model parameters.
        cutoff: Number of Fock states kept per mode.
    """
    nmodes = model.omega.size
    cutoffs = [cutoff] * nmodes
    number = np.diag(np.arange(cutoff, dtype=float))
    h_b = sum(
        model.omega[k] * _mode_operator(number, k, cutoffs) for k in range(nmodes)
    )
    b = model.V * np.ones((1, 1), dtype=np.complex128)
    for k in range(nmodes):
        b = np.kron(b, displacement_matrix(model.delta_u[k], cutoff))
    dim = h_b.shape[0]
    a0 = h_b - np.sum(model.omega * model.u_d**2) * np.eye(dim)
    a1 = h_b - np.sum(model.omega * model.u_a**2) * np.eye(dim)
    energies = np.diag(h_b)
    if model.temperature == 0:
        pops = (energies == energies.min()).astype(float)
    else:
        pops = np.exp(-(energies - energies.min()) / model.kT)
    pops /= pops.sum()
    return CouplingBlocks.from_arrays(a0, a1, b), np.diag(pops).astype(np.complex128)


def fock_probability(model: VibronicModel, tau: ArrayLike, cutoff: int = 12) -> NDArray[np.float64]:
    """Exact ``p_{a:d}`` in the truncated Fock space, τ in ps."""
    from .dynamics import ExactEvaluator
    from .model import ProbeSystemModel

    blocks, rho = fock_blocks(model, cutoff)
    ev = ExactEvaluator(ProbeSystemModel.from_blocks(blocks, rho), model.lam)
    return ev.probabilities(DONOR, ACCEPTOR, _dimless(np.atleast_1d(tau)))


def lambda_bound(model: VibronicModel, cutoff: int = 40, population_floor: float = 1e-6) -> float:
    """Largest flip amplitude ``V Π_k |⟨m_k|D(Δu_k)|n_k⟩|`` from thermally occupied states.

    Initial occupations n_k run over Fock states with thermal population above
    ``population_floor``; final occupations m_k over ``0 … cutoff−1``. The
    bias should exceed this bound by a comfortable margin.
    """
    total = model.V
    for k in range(model.omega.size):
        if model.temperature == 0:
            nmax = 0
        else:
            x = model.omega[k] / model.kT
            nmax = max(0, int(np.ceil(-np.log(population_floor) / x)))
        nmax = min(nmax, cutoff - 1)
        best = max(
            abs(displacement_matrix_element(m, n, model.delta_u[k]))
            for n in range(nmax + 1)
            for m in range(cutoff)
        )
        total *= best
    return float(total)


# ---------------------------------------------------------------------------
# Reconstruction of f(τ), E_r, J(ω) and the temperature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FReconstruction:
    """Per-τ amplitudes and phases turned into ``f(τ)`` and ``E_r``.

    Attributes:
        taus: Interaction times in ps.
        f: ``ln`` of the normalised oscillation amplitude; NaN where the
            amplitude fell below the noise floor.
        f_stderr: Propagated standard error of ``f``.
        phase: Unwrapped oscillation phase.
        reorganization_energy: Fitted E_r in meV.
        reorganization_stderr: Its standard error.
        unresolved: Indices of τ values whose amplitude was not resolved.
    """

    taus: NDArray[np.float64]
    f: NDArray[np.float64]
    f_stderr: NDArray[np.float64]
    phase: NDArray[np.float64]
    reorganization_energy: float
    reorganization_stderr: float
    unresolved: tuple[int, ...]


def _fit_cosines(
    t: NDArray[np.float64], fv: NDArray[np.float64], max_modes: int, min_relative_height: float
) -> tuple[NDArray[np.float64], NDArray[np.float64], SpectrumEstimate]:
    """Frequencies and weights ``c_j`` of ``f(t) = c₀ + Σ_j c_j cos ω_j t``.

    Peaks of the Hann-windowed transform above ``min_relative_height`` of the
    strongest positive-frequency peak seed a nonlinear least-squares fit.
    """
    series = TauSeries(t, fv - np.mean(fv))
    spec = fourier_spectrum(series, window="hann", padding=8)
    peaks = [p for p in find_peaks(spec) if p.omega > 0]
    if peaks:
        top = max(p.height for p in peaks)
        peaks = [p for p in peaks if p.height >= min_relative_height * top]
    peaks.sort(key=lambda p: -p.height)
    peaks = peaks[:max_modes]
    if not peaks:
        raise ThermometryError("no mode is visible in the spectrum of f(τ)")
    om0 = np.array([p.omega for p in peaks])
    # A cosine of weight c appears as two half-weight lines at ±ω.
    c_init = np.array([2 * abs(p.weight) for p in peaks])
    k = om0.size

    def resid(x: NDArray) -> NDArray:
        return x[0] + np.cos(np.outer(t, x[1 : k + 1])) @ x[k + 1 :] - fv

    x0 = np.concatenate([[np.mean(fv) - np.sum(c_init)], om0, c_init])
    sol = scipy.optimize.least_squares(resid, x0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
    omega = np.abs(sol.x[1 : k + 1])
    coef = sol.x[k + 1 :]
    order = np.argsort(omega)
    return omega[order], coef[order], spec


def reconstruct_f_and_Er(
    lambdas: ArrayLike,
    taus: ArrayLike,
    p: ArrayLike,
    V: float,
    weights: ArrayLike | None = None,
    literal: bool = False,
    mode_frequencies: ArrayLike | None = None,
    max_modes: int = 8,
    noise_sigmas: float = 3.0,
    min_relative_height: float = DEFAULT_MODE_THRESHOLD,
) -> FReconstruction:
    """Fit the λ-oscillation at each τ and read off ``f(τ)`` and ``E_r``.

    At each τ the samples ``λ²p`` oscillate with amplitude ``2V²e^{f(τ)}`` and
    phase ``π − E_rτ − φ_B(τ)``. ``f`` is the log of the normalised amplitude.
    ``E_r`` comes from a linear regression of the unwrapped phase on
    ``{1, τ, sin ω_jτ}``, with the mode frequencies taken from the spectrum of
    the recovered ``f`` unless given. With ``literal=True`` the amplitude is
    ``V²e^f``, and the phase is regressed on ``{1, τ}`` alone.

    Args:
        lambdas: Bias grid, shape ``(n_λ,)`` shared by all τ, or ``(n_τ, n_λ)``.
        taus: Uniform interaction times in ps, shape ``(n_τ,)``.
        p: Probabilities, shape ``(n_τ, n_λ)``.
        V: Tunnelling energy in meV.
        weights: Inverse variances of ``p``, same shape as ``p``.
        literal: Interpret the data with the simpler quoted formula.
        mode_frequencies: Known mode frequencies in meV for the phase
            regression.
        max_modes: Cap on the number of modes taken from the spectrum.
        noise_sigmas: Amplitudes below this many standard errors are treated
            as unresolved.
        min_relative_height: Spectral peaks of ``f`` weaker than this fraction
            of the strongest are not treated as modes.
    """
    t_ps = np.asarray(taus, dtype=float)
    pp = np.asarray(p, dtype=float)
    lam = np.asarray(lambdas, dtype=float)
    if lam.ndim == 1:
        lam = np.broadcast_to(lam, pp.shape)
    t = _dimless(t_ps)
    norm = V**2 if literal else 2 * V**2
    amps, phases, f_err, eta = [], [], [], []
    unresolved = []
    for i, ti in enumerate(t):
        w = None if weights is None else np.asarray(weights, dtype=float)[i]
        fit = fit_oscillation(lam[i], pp[i], ti, weights=w, envelope_order=2)
        amps.append(fit.D)
        phases.append(fit.phi)
        sd = fit.stderr[1]
        f_err.append(sd / fit.D if fit.D > 0 else np.inf)
        if fit.D <= noise_sigmas * sd:
            unresolved.append(i)
    amps = np.asarray(amps)
    f = np.log(np.where(amps > 0, amps, np.nan) / norm)
    f[list(unresolved)] = np.nan
    good = np.isfinite(f)
    phase = np.unwrap(np.asarray(phases)[good])
    cols = [np.ones(good.sum()), t[good]]
    if not literal:
        if mode_frequencies is None:
            om, _, _ = _fit_cosines(t[good], f[good], max_modes, min_relative_height)
        else:
            om = np.asarray(mode_frequencies, dtype=float)
        cols += [np.sin(w * t[good]) for w in om]
    design = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(design, phase, rcond=None)
    resid = phase - design @ coef
    dof = max(design.shape[0] - design.shape[1], 1)
    cov = np.linalg.pinv(design.T @ design) * float(resid @ resid) / dof
    full_phase = np.full(t.shape, np.nan)
    full_phase[good] = phase
    return FReconstruction(
        taus=t_ps,
        f=f,
        f_stderr=np.asarray(f_err),
        phase=full_phase,
        reorganization_energy=float(-coef[1]),
        reorganization_stderr=float(np.sqrt(max(cov[1, 1], 0.0))),
        unresolved=tuple(unresolved),
    )


@dataclass(frozen=True)
class SpectralDensityEstimate:
    """Discrete modes recovered from ``f(τ)``.

    Attributes:
        omega: Mode frequencies in meV.
        f_weights: Cosine amplitudes ``c_j = Δu_j² coth(ω_j/2k_BT)`` of ``f``.
        J_weights: ``(γ_d − γ_a)²`` per mode when a temperature was supplied.
        spectrum: The cosine-transform spectrum used to seed the fit.
    """

    omega: NDArray[np.float64]
    f_weights: NDArray[np.float64]
    J_weights: NDArray[np.float64] | None
    spectrum: SpectrumEstimate


def f_tilde(omega: ArrayLike, J: ArrayLike, temperature: float) -> NDArray[np.float64]:
    """``f̃(ω) = J(ω)/ω² · coth(ω/2k_BT)`` for discrete weights J."""
    om = np.asarray(omega, dtype=float)
    j = np.asarray(J, dtype=float)
    coth = np.ones_like(om) if temperature == 0 else _coth_of_ratio(om, K_B_MEV_PER_K * temperature)
    return j / om**2 * coth


def spectral_density(
    taus: ArrayLike,
    f: ArrayLike,
    temperature: float | None = None,
    max_modes: int = 8,
    min_relative_height: float = DEFAULT_MODE_THRESHOLD,
) -> SpectralDensityEstimate:
    """Resolve ``f(τ) = c₀ + Σ_j c_j cos ω_jτ`` into discrete modes.

    Since ``f(τ) = −Σ_j c_j (1 − cos ω_jτ)``, each cosine weight is the
    thermally weighted image ``c_j = f̃(ω_j) = J_j/ω_j² · coth(ω_j/2k_BT)``.
    Peaks of the windowed transform seed a nonlinear least-squares fit of the
    frequencies and weights. With the temperature known, the weights become
    ``J_j = ω_j² c_j / coth(ω_j/2k_BT)``.

    Args:
        taus: Uniform interaction times in ps.
        f: ``f(τ)`` values; non-finite entries are not allowed.
        temperature: Temperature in kelvin, if known.
        max_modes: Cap on the number of modes.
        min_relative_height: Peaks weaker than this fraction of the strongest
            are not treated as modes.

    Raises:
        ThermometryError: If no mode is visible in the transform.
    """
    t = _dimless(taus)
    fv = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(fv)):
        raise ValueError("f(τ) contains unresolved points; restrict the τ range")
    omega, coef, spec = _fit_cosines(t, fv, max_modes, min_relative_height)
    jw = None
    if temperature is not None:
        coth = f_tilde(omega, omega**2, temperature)
        jw = omega**2 * coef / coth
    return SpectralDensityEstimate(omega, coef, jw, spec)


def thermometry(omega: float, f_weight: float, J_weight: float) -> float:
    """Temperature in kelvin from one mode's ``f̃`` weight and known J weight.

    Solves ``f_weight = J_weight/ω² · coth(ω/2k_BT)`` by bisection on
    ``T ∈ (0.1 K, 10⁴ K)``.

    Raises:
        ThermometryError: If the weights are not positive or the root lies
            outside the bracket.
    """
    if omega <= 0 or f_weight <= 0 or J_weight <= 0:
        raise ThermometryError("thermometry needs a positive mode frequency and weights")
    target = f_weight * omega**2 / J_weight

    def g(temp: float) -> float:
        return float(_coth_of_ratio(omega, K_B_MEV_PER_K * temp)) - target

    lo, hi = THERMOMETRY_BRACKET
    if g(lo) * g(hi) > 0:
        raise ThermometryError(
            f"coth ratio {target:.4g} corresponds to a temperature outside {THERMOMETRY_BRACKET} K"
        )
    return float(scipy.optimize.bisect(g, lo, hi, xtol=1e-10, rtol=1e-12, maxiter=500))


def dominant_mode_temperature(estimate: SpectralDensityEstimate, omega_J: ArrayLike, J: ArrayLike) -> float:
    """Thermometry at the strongest recovered mode using a known J.

    The known J weight is taken from the entry of ``omega_J`` closest to the
    recovered dominant frequency.
    """
    if estimate.omega.size == 0:
        raise ThermometryError("no dominant mode")
    i = int(np.argmax(estimate.f_weights))
    om = float(estimate.omega[i])
    oj = np.asarray(omega_J, dtype=float)
    jj = np.asarray(J, dtype=float)
    k = int(np.argmin(np.abs(oj - om)))
    return thermometry(om, float(estimate.f_weights[i]), float(jj[k]))


# ---------------------------------------------------------------------------
# End-to-end demo
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VibronicDemoConfig:
    """A two-mode donor–acceptor experiment and its analysis settings.

    Attributes:
        omega: Mode frequencies in meV.
        gamma_d: Donor couplings in meV.
        gamma_a: Acceptor couplings in meV.
        V: Tunnelling energy in meV.
        lam: Lowest bias of every λ window, in meV.
        temperature: Temperature in kelvin.
        tau_step_ps: Spacing of the uniform τ grid; the grid starts at one step.
        n_tau: Number of τ values.
        n_lambda: Bias values per τ, spread evenly over one period ``2π/τ``.
        shots: Repetitions per point; 0 gives exact probabilities.
        seed: Master seed of the shot noise.
        literal: Generate and analyse data with the simpler quoted formula.
        fock_cutoff: Fock states per mode in the exact cross-check; 0 skips it.
        fock_points: Number of τ values of the cross-check, up to ``τ_max``.
    """

    omega: tuple[float, ...] = (8.0, 20.0)
    gamma_d: tuple[float, ...] = (1.6, 5.0)
    gamma_a: tuple[float, ...] = (0.0, 0.0)
    V: float = 1.0
    lam: float = 100.0
    temperature: float = 300.0
    tau_step_ps: float = 0.1 * HBAR_MEV_PS
    n_tau: int = 100
    n_lambda: int = 64
    shots: int = 0
    seed: int = 0
    literal: bool = False
    fock_cutoff: int = 0
    fock_points: int = 8

    def __post_init__(self) -> None:
        if self.tau_step_ps <= 0 or self.n_tau < 8:
            raise ValueError("the τ grid needs a positive step and at least 8 points")
        if self.n_lambda < 5:
            raise ValueError("at least five λ values are needed per τ")
        if self.shots < 0 or self.fock_cutoff < 0:
            raise ValueError("shots and Fock cutoff must be non-negative")

    def model(self) -> VibronicModel:
        return VibronicModel(
            np.asarray(self.omega), np.asarray(self.gamma_d), np.asarray(self.gamma_a),
            self.V, self.lam, self.temperature,
        )

    @property
    def taus_ps(self) -> NDArray[np.float64]:
        return self.tau_step_ps * np.arange(1, self.n_tau + 1)


@dataclass(frozen=True, eq=False)
class VibronicDemoResult:
    """Outputs of :func:`run_vibronic_demo`.

    Attributes:
        model: The simulated model.
        taus_ps: τ grid in ps.
        lambdas: Bias windows, shape ``(n_τ, n_λ)``.
        p: Probabilities analysed, shape ``(n_τ, n_λ)``.
        reconstruction: Recovered ``f(τ)`` and ``E_r``.
        density: Recovered modes, with J weights from the known temperature.
        temperature: Temperature recovered from the dominant mode and known J.
        fock_taus_ps: τ values of the exact cross-check.
        p_fock: Truncated-Fock probabilities at ``model.lam``.
        p_analytic: Second-order formula at the same points.
    """

    model: VibronicModel
    taus_ps: NDArray[np.float64]
    lambdas: NDArray[np.float64]
    p: NDArray[np.float64]
    reconstruction: FReconstruction
    density: SpectralDensityEstimate | None
    temperature: float | None
    fock_taus_ps: NDArray[np.float64]
    p_fock: NDArray[np.float64]
    p_analytic: NDArray[np.float64]


def lambda_windows(lam0: float, taus_ps: ArrayLike, n_lambda: int) -> NDArray[np.float64]:
    """One full λ-period above ``lam0`` per τ (in ps), shape ``(n_τ, n_λ)``."""
    return period_windows(lam0, _dimless(taus_ps), n_lambda)


def sampled_probabilities(p: NDArray[np.float64], shots: int, seed: int) -> NDArray[np.float64]:
    """Shot-noise estimates of ``p``; row ``i`` draws from the stream ``(seed, i)``."""
    if shots == 0:
        return p
    from .dynamics import sample_shots

    out = np.empty_like(p)
    for i, row in enumerate(p):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        out[i] = sample_shots(row, shots, rng) / shots
    return out


def _pooled_weights(lams: NDArray, p_hat: NDArray, shots: int) -> NDArray[np.float64]:
    """Binomial inverse variances with ``p`` replaced by the row envelope ``mean(λ²p̂)/λ²``."""
    env = np.mean(lams**2 * p_hat, axis=1, keepdims=True) / lams**2
    env = np.clip(env, 1.0 / shots, 1 - 1.0 / shots)
    return shots / (env * (1 - env))


def run_vibronic_demo(cfg: VibronicDemoConfig) -> VibronicDemoResult:
    """Simulate the (λ, τ) grid, recover ``f``, ``E_r``, J and T, and cross-check.

    The data come from the second-order formula. With ``fock_cutoff > 0`` the
    formula is compared with exact dynamics in a truncated Fock space at
    ``fock_points`` interaction times up to ``τ_max``.
    """
    model = cfg.model()
    taus = cfg.taus_ps
    lams = lambda_windows(cfg.lam, taus, cfg.n_lambda)
    p = np.empty_like(lams)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ValidityWarning)
        for i, t in enumerate(taus):
            for j, lam in enumerate(lams[i]):
                p[i, j] = analytic_probability(model.with_lambda(lam), t, cfg.literal, warn=False)
    p_used = sampled_probabilities(p, cfg.shots, cfg.seed)
    weights = None if cfg.shots == 0 else _pooled_weights(lams, p_used, cfg.shots)
    rec = reconstruct_f_and_Er(lams, taus, p_used, cfg.V, weights=weights, literal=cfg.literal)
    good = np.isfinite(rec.f)
    density = temperature = None
    # Only a leading run of resolved points keeps the τ grid uniform.
    n_ok = int(np.argmin(good)) if not good.all() else good.size
    if n_ok >= 8:
        density = spectral_density(taus[:n_ok], rec.f[:n_ok], temperature=cfg.temperature)
        try:
            temperature = dominant_mode_temperature(density, model.omega, model.spectral_weights)
        except ThermometryError:
            temperature = None
    if cfg.fock_cutoff > 0:
        fock_taus = np.linspace(0, model.tau_max(), cfg.fock_points + 1)[1:]
        p_fock = fock_probability(model, fock_taus, cfg.fock_cutoff)
        p_an = np.asarray(analytic_probability(model, fock_taus, cfg.literal, warn=False))
    else:
        fock_taus = p_fock = p_an = np.zeros(0)
    return VibronicDemoResult(
        model, taus, lams, p_used, rec, density, temperature, fock_taus, p_fock, p_an
    )

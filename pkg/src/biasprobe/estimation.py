"""From sampled transition probabilities to amplitudes, spectra and levels.

The pipeline has four stages:

1. At fixed τ the probability oscillates in λ as ``η + D cos(λτ + φ)`` with a
   known frequency τ, so :func:`fit_oscillation` is a weighted linear least
   squares fit on the basis ``{1, cos λτ, sin λτ}``.
2. Fits from a uniform τ grid are collected by :func:`build_tau_series` into
   the complex series ``c(τ) = D e^{iφ}``.
3. :func:`fourier_spectrum` turns the series into a signed-frequency spectrum
   whose peaks sit at energy differences of the system; :func:`find_peaks`
   locates and refines them.
4. :func:`assemble_levels_from_triplets` rebuilds a level ladder from
   same-operator difference frequencies, and :func:`extract_state_diagonal`
   groups cross-operator peaks into populations and a mean energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.optimize
import scipy.signal
from numpy.typing import ArrayLike, NDArray

MIN_FIT_SAMPLES = 5
MIN_SPECTRUM_POINTS = 8
DEFAULT_PEAK_FACTOR = 5.0
DEFAULT_ABS_FLOOR = 1e-12
PHASE_JUMP_LIMIT = 0.9 * np.pi
REFINE_SWEEPS = 8
WINDOWS = ("rect", "hann")


class InsufficientCoverageError(ValueError):
    """The λ samples do not constrain a full oscillation of frequency τ."""


class NonUniformGridError(ValueError):
    """A τ grid that should be uniformly spaced is not."""


# ---------------------------------------------------------------------------
# Known-frequency oscillation fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OscillationFit:
    """Result of ``y(λ) ≈ η + D cos(λτ + φ)``.

    Attributes:
        tau: Oscillation frequency in λ (the interaction time).
        eta: Offset.
        D: Amplitude, always non-negative.
        phi: Phase in ``(−π, π]``.
        residual_rms: Root-mean-square residual of the fitted samples.
        covariance: 3×3 covariance of ``(η, D, φ)``.
        envelope_order: Power k of the ``λ^k`` factor applied before fitting.
        n_samples: Number of samples.
    """

    tau: float
    eta: float
    D: float
    phi: float
    residual_rms: float
    covariance: NDArray[np.float64]
    envelope_order: int = 0
    n_samples: int = 0

    @property
    def stderr(self) -> NDArray[np.float64]:
        """Standard errors of ``(η, D, φ)``."""
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def complex_amplitude(self) -> complex:
        """``D e^{iφ}``."""
        return complex(self.D * np.exp(1j * self.phi))

    def predict(self, lambdas: ArrayLike) -> NDArray[np.float64]:
        """Evaluate ``η + D cos(λτ + φ)`` (in the envelope-scaled variable)."""
        lam = np.asarray(lambdas, dtype=float)
        return self.eta + self.D * np.cos(lam * self.tau + self.phi)


def _design(lam: NDArray[np.float64], tau: float) -> NDArray[np.float64]:
    return np.column_stack([np.ones_like(lam), np.cos(lam * tau), np.sin(lam * tau)])


def fit_oscillation(
    lambda_samples: ArrayLike,
    p_samples: ArrayLike,
    tau: float,
    weights: ArrayLike | None = None,
    subtract: float = 0.0,
    envelope_order: int = 0,
) -> OscillationFit:
    """Weighted least-squares fit of a known-frequency oscillation in λ.

    The fitted variable is ``y = λ^k (p − subtract)`` with ``k = envelope_order``,
    which turns a ``λ^{−k}`` envelope into a constant amplitude. Passing the
    incoherent weight ``q`` as ``subtract`` makes ``η`` the offset of ``2 Re X``
    rather than of ``p``.

    Args:
        lambda_samples: Bias values.
        p_samples: Probabilities at those biases.
        tau: Interaction time, the known oscillation frequency.
        weights: Inverse variances of ``p_samples``. When given, the
            covariance is absolute; otherwise it is scaled by the residual
            variance.
        subtract: Constant removed from ``p`` before scaling.
        envelope_order: Power of λ multiplying the samples.

    Raises:
        InsufficientCoverageError: Fewer than five samples, a λ span shorter
            than one period ``2π/τ``, or a numerically singular design.
    """
    lam = np.asarray(lambda_samples, dtype=float).ravel()
    p = np.asarray(p_samples, dtype=float).ravel()
    if lam.shape != p.shape:
        raise ValueError("lambda_samples and p_samples must have the same length")
    n = lam.size
    if n < MIN_FIT_SAMPLES:
        raise InsufficientCoverageError(
            f"insufficient λ coverage: {n} samples, need at least {MIN_FIT_SAMPLES}"
        )
    span = float(np.ptp(lam))
    # Windows built as λ₀ + 2π/τ carry a rounding error that grows with |λ₀|.
    slack = 2 * np.pi * 1e-12 + 16 * np.finfo(float).eps * float(np.max(np.abs(lam), initial=0.0)) * tau
    if tau <= 0 or span * tau < 2 * np.pi - slack:
        raise InsufficientCoverageError(
            f"insufficient λ coverage: span·τ = {span * tau:.4g} is below one period 2π"
        )
    scale = lam**envelope_order
    y = scale * (p - subtract)
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape != p.shape or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite, non-negative and match p_samples")
        w = w / scale**2
    x = _design(lam, tau)
    sw = np.sqrt(w)
    xw = x * sw[:, None]
    yw = y * sw
    u, sv, vt = np.linalg.svd(xw, full_matrices=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise InsufficientCoverageError("insufficient λ coverage: singular design matrix")
    coef = vt.T @ ((u.T @ yw) / sv)
    cov_coef = (vt.T / sv**2) @ vt
    resid = y - x @ coef
    rms = float(np.sqrt(np.mean(resid**2)))
    if weights is None:
        dof = n - 3
        sigma2 = float(np.sum(resid**2) / dof) if dof > 0 else 0.0
        cov_coef = cov_coef * sigma2
    c0, c, s = (float(v) for v in coef)
    amp = float(np.hypot(c, s))
    phi = float(np.arctan2(-s, c))
    if phi <= -np.pi:
        phi += 2 * np.pi
    jac = np.zeros((3, 3))
    jac[0, 0] = 1.0
    if amp > 0:
        jac[1, 1], jac[1, 2] = c / amp, s / amp
        jac[2, 1], jac[2, 2] = s / amp**2, -c / amp**2
    cov = jac @ cov_coef @ jac.T
    if amp == 0:
        cov[2, 2] = np.inf
    return OscillationFit(
        tau=float(tau),
        eta=c0,
        D=amp,
        phi=phi,
        residual_rms=rms,
        covariance=cov,
        envelope_order=envelope_order,
        n_samples=n,
    )


def split_windows(lambda_samples: ArrayLike, n_windows: int) -> list[NDArray[np.int64]]:
    """Indices of ``n_windows`` contiguous, ascending λ windows of near-equal size."""
    lam = np.asarray(lambda_samples, dtype=float).ravel()
    if n_windows < 1:
        raise ValueError("n_windows must be positive")
    order = np.argsort(lam, kind="stable")
    return [w for w in np.array_split(order, n_windows)]


@dataclass(frozen=True)
class EnvelopeEstimate:
    """Power law of the oscillation amplitude across λ windows.

    Attributes:
        order: Nearest integer ``k`` in {0, 1, 2} of ``D ∝ λ^{−k}``.
        slope: Fitted ``d ln D / d ln λ``.
        fits: The order-0 window fits the slope came from.
    """

    order: int
    slope: float
    fits: list[OscillationFit]


def estimate_envelope_order(
    lambda_samples: ArrayLike, p_samples: ArrayLike, tau: float, n_windows: int = 3
) -> EnvelopeEstimate:
    """Estimate the envelope order from how the raw amplitude falls with λ.

    The samples are split into ``n_windows`` ascending λ windows, each fitted
    without envelope scaling, and ``ln D`` is regressed on ``ln λ̄``.

    Raises:
        InsufficientCoverageError: A window spans less than one period, or
            the amplitude vanishes in a window.
    """
    lam = np.asarray(lambda_samples, dtype=float).ravel()
    p = np.asarray(p_samples, dtype=float).ravel()
    if n_windows < 2:
        raise ValueError("an envelope slope needs at least two λ windows")
    fits = [fit_oscillation(lam[w], p[w], tau) for w in split_windows(lam, n_windows)]
    amps = np.array([f.D for f in fits])
    if np.any(amps <= 0):
        raise InsufficientCoverageError("the oscillation vanishes in a λ window")
    centres = np.array([np.mean(lam[w]) for w in split_windows(lam, n_windows)])
    if np.any(centres <= 0):
        raise ValueError("envelope estimation needs positive biases")
    slope = float(np.polyfit(np.log(centres), np.log(amps), 1)[0])
    return EnvelopeEstimate(int(np.clip(np.rint(-slope), 0, 2)), slope, fits)


def period_windows(lam0: float, taus: ArrayLike, n_lambda: int) -> NDArray[np.float64]:
    """Bias windows ``λ₀ + (2π/τ)·[0, 1]`` with ``n_lambda`` even steps, shape ``(n_τ, n_λ)``.

    Each window covers exactly one period of the λ-oscillation at its τ, the
    smallest span :func:`fit_oscillation` accepts, and evenly spaced phases
    make the three fit columns well conditioned.
    """
    t = np.atleast_1d(np.asarray(taus, dtype=float))
    if np.any(t <= 0):
        raise ValueError("bias windows need positive interaction times")
    frac = np.linspace(0.0, 1.0, n_lambda)
    return lam0 + (2 * np.pi / t)[:, None] * frac[None, :]


def octave_windows(
    lam0: float, taus: ArrayLike, n_lambda: int
) -> list[tuple[NDArray[np.int64], NDArray[np.float64]]]:
    """Bias windows shared by octaves of τ.

    The τ values in ``[τ_k, 2τ_k)``, with ``τ_k`` the smallest τ of the
    octave, share ``n_lambda`` evenly spaced biases over ``λ₀ + [0, 2π/τ_k]``,
    which covers between one and two oscillation periods for every member.
    Compared with one window per τ this needs far fewer distinct biases,
    and compared with one window for all τ it keeps long-τ biases near λ₀.

    Returns:
        ``(indices, lambdas)`` per octave, in increasing τ.
    """
    t = np.atleast_1d(np.asarray(taus, dtype=float))
    if np.any(t <= 0):
        raise ValueError("bias windows need positive interaction times")
    order = np.argsort(t, kind="stable")
    frac = np.linspace(0.0, 1.0, n_lambda)
    out = []
    start = 0
    while start < order.size:
        base = t[order[start]]
        stop = start
        while stop < order.size and t[order[stop]] < 2 * base:
            stop += 1
        out.append((order[start:stop], lam0 + (2 * np.pi / base) * frac))
        start = stop
    return out


@dataclass(frozen=True)
class ConvergenceReport:
    """Pairwise comparison of fits on ascending λ windows."""

    passed: bool
    d_values: list[float]
    eta_values: list[float]
    d_differences: list[float]
    eta_differences: list[float]
    d_thresholds: list[float]
    eta_thresholds: list[float]


def convergence_check(
    fits: Sequence[OscillationFit], rel_tol: float = 0.02, n_sigma: float = 3.0
) -> ConvergenceReport:
    """Decide whether ``D`` and ``η`` have stopped changing with λ.

    Successive fits pass when both ``|ΔD|`` and ``|Δη|`` are below
    ``max(n_sigma·σ_Δ, rel_tol·scale)``, where ``σ_Δ`` combines the two fits'
    standard errors and ``scale`` is the largest ``|D|`` or ``|η|`` of the pair.
    The check passes only if every successive pair passes.

    Args:
        fits: Fits on at least three disjoint, ascending λ windows, in the same
            envelope-scaled variable.
        rel_tol: Relative tolerance.
        n_sigma: Multiple of the combined standard error.
    """
    if len(fits) < 3:
        raise ValueError("convergence_check needs at least three λ windows")
    dvals = [f.D for f in fits]
    evals = [f.eta for f in fits]
    dd, de, td, te = [], [], [], []
    passed = True
    for a, b in zip(fits[:-1], fits[1:]):
        sa, sb = a.stderr, b.stderr
        sig_d = float(np.hypot(sa[1], sb[1]))
        sig_e = float(np.hypot(sa[0], sb[0]))
        scale = max(abs(a.D), abs(b.D), abs(a.eta), abs(b.eta))
        diff_d = abs(b.D - a.D)
        diff_e = abs(b.eta - a.eta)
        thr_d = max(n_sigma * sig_d, rel_tol * scale)
        thr_e = max(n_sigma * sig_e, rel_tol * scale)
        dd.append(diff_d)
        de.append(diff_e)
        td.append(thr_d)
        te.append(thr_e)
        if not (diff_d <= thr_d and diff_e <= thr_e):
            passed = False
    return ConvergenceReport(passed, dvals, evals, dd, de, td, te)


# ---------------------------------------------------------------------------
# τ series and spectra
# ---------------------------------------------------------------------------


def _check_uniform(taus: NDArray[np.float64]) -> float:
    if taus.size < 2:
        return 0.0
    d = np.diff(taus)
    dt = float(np.mean(d))
    if dt <= 0:
        raise NonUniformGridError("τ grid must be strictly increasing")
    tol = 1e-12 * max(float(np.max(np.abs(taus))), dt) * 4
    if np.max(np.abs(d - dt)) > tol:
        raise NonUniformGridError("τ grid is not uniformly spaced")
    return dt


@dataclass(frozen=True)
class TauSeries:
    """Complex oscillation amplitudes ``c(τ)`` on a uniform τ grid.

    Attributes:
        taus: Uniform τ grid.
        values: ``c(τ_k)``.
        eta: Offsets ``η(τ_k)``, if known.
        quantity: Free-form tag naming the measured correlation.
        phase: Unwrapped phase of ``values``.
        phase_jumps: Indices k where ``|φ_{k} − φ_{k−1}|`` exceeded 0.9π
            before unwrapping, meaning the grid may be too coarse.
    """

    taus: NDArray[np.float64]
    values: NDArray[np.complex128]
    eta: NDArray[np.float64] | None = None
    quantity: str = ""
    phase: NDArray[np.float64] = field(default=None)  # type: ignore[assignment]
    phase_jumps: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        taus = np.asarray(self.taus, dtype=float)
        vals = np.asarray(self.values, dtype=np.complex128)
        if taus.shape != vals.shape or taus.ndim != 1:
            raise ValueError("taus and values must be one-dimensional and equally long")
        _check_uniform(taus)
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "values", vals)
        if self.eta is not None:
            object.__setattr__(self, "eta", np.asarray(self.eta, dtype=float))
        raw = np.angle(vals)
        if self.phase is None:
            object.__setattr__(self, "phase", np.unwrap(raw))
        jumps = tuple(int(k) + 1 for k in np.flatnonzero(np.abs(np.diff(raw)) > PHASE_JUMP_LIMIT))
        # Jumps that unwrap cleanly are still reported: the grid cannot tell
        # a fast phase from a branch change.
        object.__setattr__(self, "phase_jumps", jumps)

    @property
    def dtau(self) -> float:
        return _check_uniform(self.taus)

    def __len__(self) -> int:
        return self.taus.size


def build_tau_series(
    fits: Sequence[OscillationFit], factor: complex = 1.0, quantity: str = ""
) -> TauSeries:
    """Collect per-τ fits into ``c(τ) = D e^{iφ}/factor``.

    Args:
        fits: One fit per τ, on a uniform ascending grid.
        factor: Known coefficient multiplying the correlation of interest in
            ``D e^{iφ}``; dividing by it returns the correlation itself.
        quantity: Tag stored on the series.

    Raises:
        NonUniformGridError: If the fits' τ values are not uniformly spaced.
    """
    if not fits:
        raise ValueError("no fits given")
    taus = np.array([f.tau for f in fits])
    vals = np.array([f.complex_amplitude for f in fits]) / factor
    eta = np.array([f.eta for f in fits])
    return TauSeries(taus, vals, eta, quantity)


@dataclass(frozen=True)
class SpectrumEstimate:
    """Signed-frequency spectrum of a τ series.

    Attributes:
        omega: Ascending bin frequencies (energy units with ħ = 1).
        weights: Complex weight per bin.
        resolution: ``2π/(N·Δτ)`` for the unpadded series.
        window: ``"rect"`` or ``"hann"``.
        padding: Zero-padding factor.
        series: The transformed series.
    """

    omega: NDArray[np.float64]
    weights: NDArray[np.complex128]
    resolution: float
    window: str
    padding: int
    series: TauSeries

    @property
    def bin_width(self) -> float:
        return self.resolution / self.padding


def _window(name: str, n: int) -> NDArray[np.float64]:
    if name == "rect":
        return np.ones(n)
    if name == "hann":
        return scipy.signal.get_window("hann", n, fftbins=False) if n > 1 else np.ones(n)
    raise ValueError(f"unknown window {name!r}; choose from {WINDOWS}")


def fourier_spectrum(series: TauSeries, window: str = "rect", padding: int = 1) -> SpectrumEstimate:
    """Discrete Fourier transform ``X(ω) = Σ w_n c_n e^{−iωτ_n} / Σ w_n``.

    A tone ``c(τ) = A e^{iω₀τ}`` therefore produces a peak of weight ``A`` at
    ``+ω₀``. The actual grid times are used in the kernel, so a grid that does
    not start at τ = 0 gives the same weights as one that does. With the
    rectangular window and no padding, ``Σ|X|² = Σ|c|²/N``.

    Args:
        series: Uniform τ series with at least eight points.
        window: ``"rect"`` (quantitative weights) or ``"hann"`` (less leakage).
        padding: Integer zero-padding factor for a finer frequency grid.
    """
    n = len(series)
    if n < MIN_SPECTRUM_POINTS:
        raise ValueError(f"spectrum needs at least {MIN_SPECTRUM_POINTS} points, got {n}")
    if padding < 1:
        raise ValueError("padding must be a positive integer")
    dt = series.dtau
    w = _window(window, n)
    m = n * int(padding)
    raw = np.fft.fft(w * series.values, n=m) / np.sum(w)
    omega = 2 * np.pi * np.fft.fftfreq(m, d=dt)
    raw = raw * np.exp(-1j * omega * series.taus[0])
    order = np.argsort(omega, kind="stable")
    return SpectrumEstimate(
        omega=omega[order],
        weights=raw[order],
        resolution=2 * np.pi / (n * dt),
        window=window,
        padding=int(padding),
        series=series,
    )


def _transform(
    taus: NDArray[np.float64], values: NDArray[np.complex128], omega: ArrayLike, w: NDArray[np.float64]
) -> NDArray[np.complex128]:
    om = np.atleast_1d(np.asarray(omega, dtype=float))
    kern = np.exp(-1j * np.outer(om, taus))
    return (kern @ (w * values)) / np.sum(w)


def dtft(series: TauSeries, omega: ArrayLike, window: str = "rect") -> NDArray[np.complex128]:
    """The window-normalised transform of ``series`` at arbitrary frequencies."""
    return _transform(series.taus, series.values, omega, _window(window, len(series)))


@dataclass(frozen=True)
class Peak:
    """A spectral peak with interpolated position and complex weight."""

    omega: float
    weight: complex
    height: float
    index: int


def find_peaks(
    spectrum: SpectrumEstimate,
    factor: float = DEFAULT_PEAK_FACTOR,
    abs_floor: float = DEFAULT_ABS_FLOOR,
    weight_window: str | None = None,
    sweeps: int = REFINE_SWEEPS,
) -> list[Peak]:
    """Local maxima of ``|X(ω)|`` above ``max(factor·median|X|, abs_floor)``.

    Each peak starts at a parabola through its bin and the two neighbours.
    Positions and complex weights are then refined jointly: in every sweep,
    each peak's tone is fitted to the series with all other fitted tones
    subtracted, by maximising the window-normalised transform within one bin
    of the peak. For well separated tones this converges to the exact
    frequencies and amplitudes, so neither scalloping loss, neighbour leakage
    nor the phase error ``δω·T/2`` of a small position error on a record of
    length T survives.

    Args:
        spectrum: Spectrum to search.
        factor: Multiple of the median magnitude used as the noise floor.
        abs_floor: Absolute lower bound on the threshold.
        weight_window: Window for the refinement; defaults to the spectrum's
            own window.
        sweeps: Maximum number of refinement sweeps; 0 keeps the parabola
            positions and reads weights off the transform there.
    """
    mag = np.abs(spectrum.weights)
    thr = max(factor * float(np.median(mag)), abs_floor)
    idx, _ = scipy.signal.find_peaks(mag, height=thr)
    dw = float(spectrum.omega[1] - spectrum.omega[0]) if mag.size > 1 else 0.0
    series = spectrum.series
    w = _window(weight_window or spectrum.window, len(series))
    omegas = []
    for i in idx:
        om = float(spectrum.omega[i])
        if 0 < i < mag.size - 1:
            y0, y1, y2 = mag[i - 1], mag[i], mag[i + 1]
            den = y0 - 2 * y1 + y2
            if den < 0:
                om += float(0.5 * (y0 - y2) / den * dw)
        omegas.append(om)
    om_arr = np.array(omegas)
    amps = _transform(series.taus, series.values, om_arr, w) if om_arr.size else np.zeros(0, complex)
    if dw > 0 and om_arr.size:
        tones = np.exp(1j * np.outer(om_arr, series.taus))
        model = amps @ tones
        for _ in range(sweeps):
            moved = 0.0
            for k, i in enumerate(idx):
                resid = series.values - model + amps[k] * tones[k]
                centre = float(spectrum.omega[i])
                res = scipy.optimize.minimize_scalar(
                    lambda x: -abs(_transform(series.taus, resid, x, w)[0]),
                    bounds=(centre - dw, centre + dw),
                    method="bounded",
                    options={"xatol": 1e-9 * dw},
                )
                new_om = float(res.x)
                if abs(_transform(series.taus, resid, om_arr[k], w)[0]) > -res.fun:
                    new_om = float(om_arr[k])
                tones[k] = np.exp(1j * new_om * series.taus)
                new_amp = _transform(series.taus, resid, new_om, w)[0]
                moved = max(moved, abs(new_om - om_arr[k]))
                om_arr[k], amps[k] = new_om, new_amp
                model = series.values - resid + new_amp * tones[k]
            if moved <= 1e-8 * dw:
                break
    return [Peak(float(om_arr[k]), complex(amps[k]), float(mag[i]), int(i)) for k, i in enumerate(idx)]


def peak_fwhm(spectrum: SpectrumEstimate, peak: Peak | int) -> float:
    """Full width at half maximum of a peak of ``|X(ω)|``, in frequency units.

    Half-maximum crossings are linearly interpolated between bins, so a
    zero-padded spectrum gives a width finer than the bin spacing.
    """
    i = peak.index if isinstance(peak, Peak) else int(peak)
    mag = np.abs(spectrum.weights)
    widths, *_ = scipy.signal.peak_widths(mag, [i], rel_height=0.5)
    return float(widths[0] * (spectrum.omega[1] - spectrum.omega[0]))


# ---------------------------------------------------------------------------
# Level ladders and populations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LevelLadder:
    """Energy levels rebuilt from difference frequencies, lowest level at 0.

    The construction cannot distinguish a ladder from its mirror image
    ``L → L_max − L``; the ladder whose lowest gap is smallest is returned.

    Attributes:
        levels: Ascending levels.
        unexplained: Input frequencies matching no difference of the ladder.
        missing: Level pairs whose difference is not among the inputs.
        complete: No unexplained frequencies and no missing differences.
    """

    levels: NDArray[np.float64]
    unexplained: list[float]
    missing: list[tuple[int, int]]

    @property
    def complete(self) -> bool:
        return not self.unexplained and not self.missing


def _cluster(values: NDArray[np.float64], tol: float) -> NDArray[np.float64]:
    vals = np.sort(values)
    out: list[list[float]] = []
    for v in vals:
        if out and v - out[-1][-1] <= tol:
            out[-1].append(float(v))
        else:
            out.append([float(v)])
    return np.array([np.mean(c) for c in out])


def assemble_levels_from_triplets(peak_frequencies: ArrayLike, tol: float) -> LevelLadder:
    """Rebuild a level ladder from same-operator difference frequencies.

    The largest frequency is the gap between the lowest and highest level.
    A frequency ``f`` is a candidate level if another frequency ``g`` completes
    the triplet ``f + g = f_max``. Candidates are accepted in ascending order
    when their difference to every accepted level is itself an observed
    frequency. The accepted levels are then refined by least squares against
    all matched differences.

    Args:
        peak_frequencies: Observed difference frequencies; signs are ignored
            and frequencies within ``tol`` of zero are dropped.
        tol: Matching tolerance.
    """
    f = np.abs(np.asarray(peak_frequencies, dtype=float).ravel())
    f = f[f > tol]
    if f.size == 0:
        return LevelLadder(np.zeros(1), [], [])
    freqs = _cluster(f, tol)
    fmax = float(freqs[-1])

    def observed(x: float) -> bool:
        return bool(np.any(np.abs(freqs - x) <= tol))

    levels = [0.0, fmax]
    for cand in freqs[:-1]:
        if not observed(fmax - cand):
            continue
        if any(abs(cand - lv) <= tol for lv in levels):
            continue
        if all(observed(abs(cand - lv)) for lv in levels):
            levels.append(float(cand))
    levels.sort()

    # Least-squares refinement with the lowest level pinned at zero.
    k = len(levels)
    rows, rhs, missing = [], [], []
    for i in range(k):
        for j in range(i + 1, k):
            gap = levels[j] - levels[i]
            near = np.abs(freqs - gap)
            m = int(np.argmin(near))
            if near[m] > tol:
                missing.append((i, j))
                continue
            row = np.zeros(k - 1)
            if i > 0:
                row[i - 1] -= 1.0
            row[j - 1] += 1.0
            rows.append(row)
            rhs.append(freqs[m])
    refined = np.asarray(levels)
    if rows:
        sol, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
        refined = np.concatenate([[0.0], sol])
    diffs = np.abs(refined[:, None] - refined[None, :])[np.triu_indices(k, 1)]
    unexplained = [float(x) for x in freqs if not np.any(np.abs(diffs - x) <= tol)]
    return LevelLadder(np.sort(refined), unexplained, missing)


@dataclass(frozen=True)
class StateDiagonal:
    """Populations recovered from cross-operator peaks.

    Attributes:
        diag0: Estimates of ``⟨n₀|ρ|n₀⟩`` in the eigenbasis of A₀.
        diag1: Estimates of ``⟨m₁|ρ|m₁⟩`` in the eigenbasis of A₁.
        assignments: ``(peak ω, n, m)`` for every uniquely assigned peak.
        ambiguous: Peak frequencies matching more than one level pair.
        unassigned: Peak frequencies matching no level pair.
        no_coherence: True when the same-operator spectrum shows no
            nonzero-frequency peak, so the ladder cannot be built from data.
    """

    diag0: NDArray[np.float64]
    diag1: NDArray[np.float64]
    assignments: list[tuple[float, int, int]]
    ambiguous: list[float]
    unassigned: list[float]
    no_coherence: bool = False


def extract_state_diagonal(
    peaks: Sequence[Peak],
    e0: ArrayLike,
    e1: ArrayLike,
    tol: float,
    coherence_peaks: Sequence[Peak] | None = None,
) -> StateDiagonal:
    """Group peaks of ``⟨e^{iA₀τ} e^{−iA₁τ}⟩`` by level into populations.

    Each peak sits at ``E_n⁰ − E_m¹`` with weight ``⟨n₀|m₁⟩⟨m₁|ρ|n₀⟩``. Summing
    the weights over m gives ``⟨n₀|ρ|n₀⟩`` and summing over n gives
    ``⟨m₁|ρ|m₁⟩``. A peak consistent with several (n, m) pairs is reported as
    ambiguous and left out rather than split by guesswork.

    Args:
        peaks: Peaks of the cross-operator spectrum.
        e0: Eigenvalues of A₀.
        e1: Eigenvalues of A₁, on the same absolute scale.
        tol: Frequency matching tolerance.
        coherence_peaks: Optional peaks of a same-operator spectrum, used only
            to set ``no_coherence``.
    """
    e0 = np.asarray(e0, dtype=float)
    e1 = np.asarray(e1, dtype=float)
    gaps = e0[:, None] - e1[None, :]
    d0 = np.zeros(e0.size, dtype=np.complex128)
    d1 = np.zeros(e1.size, dtype=np.complex128)
    assigned, ambiguous, unassigned = [], [], []
    for pk in peaks:
        hits = np.argwhere(np.abs(gaps - pk.omega) <= tol)
        if len(hits) == 0:
            unassigned.append(pk.omega)
        elif len(hits) > 1:
            ambiguous.append(pk.omega)
        else:
            n, m = (int(v) for v in hits[0])
            d0[n] += pk.weight
            d1[m] += pk.weight
            assigned.append((pk.omega, n, m))
    no_coh = False
    if coherence_peaks is not None:
        no_coh = not any(abs(p.omega) > tol for p in coherence_peaks)
    return StateDiagonal(d0.real, d1.real, assigned, ambiguous, unassigned, no_coh)


def mean_energy(
    diag0: ArrayLike, diag1: ArrayLike, e0: ArrayLike, e1: ArrayLike
) -> float:
    """``⟨A₀⟩ + ⟨A₁⟩`` from populations and eigenvalues of both operators."""
    return float(
        np.dot(np.asarray(diag0, float), np.asarray(e0, float))
        + np.dot(np.asarray(diag1, float), np.asarray(e1, float))
    )

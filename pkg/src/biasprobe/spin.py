"""Single-molecule NMR with a tunable magnetic-dipole probe.

A handful of nuclear spins in a static field interact through magnetic
dipole–dipole coupling. The probe is a magnetic dipole whose moment points
along ``±n̂_P`` in its two ``σ_x`` eigenstates, so it couples to the spins
through ``σ_x ⊗ C``. Biasing along ``σ_z`` makes ``C`` the flip block ``B`` of
the coupling and leaves ``A₀ = A₁ = H_spin``. Transitions between the two
``σ_z`` eigenstates then measure ``⟨e^{iHτ} B e^{−iHτ} B⟩``, whose Fourier
transform has peaks at the level differences of the spin Hamiltonian.

Units: positions in nm, spin moments in nuclear magnetons, probe moment in
meV/T, fields in tesla. Energies come out in peV and times are given in ns;
they are combined through ħ = 6.582119569×10⁵ peV·ns.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .dynamics import run_sweep
from .estimation import (
    OscillationFit,
    SpectrumEstimate,
    TauSeries,
    fit_oscillation,
    fourier_spectrum,
    octave_windows,
)
from .linalg import HermitianOperator, tensor_product
from .model import SIGMA_X, SIGMA_Y, SIGMA_Z, CouplingBlocks, ProbePureState, ProbeSystemModel
from .perturbation import classify_leading_order, leading_series_scale
from .validity import (
    DEFAULT_MARGIN,
    ValidityReport,
    minimum_valid_lambda,
    validity_report,
)

HBAR_PEV_NS = 6.582119569e5
ELEMENTARY_CHARGE = 1.602176634e-19
NUCLEAR_MAGNETON_J_PER_T = 5.0507837461e-27
NUCLEAR_MAGNETON_PEV_PER_T = NUCLEAR_MAGNETON_J_PER_T / ELEMENTARY_CHARGE * 1e12
MU0_OVER_4PI = 1e-7
MAX_SPINS = 8
COINCIDENCE_TOL_NM = 1e-9

PREP = ProbePureState.control(0)
MEAS = ProbePureState.control(1)


def _j_to_pev(x: float) -> float:
    return x / ELEMENTARY_CHARGE * 1e12


def dipolar_prefactor(mu_a_j_per_t: float, mu_b_j_per_t: float, r_nm: float) -> float:
    """``μ₀μ_aμ_b/(4π r³)`` in peV for moments in J/T and distance in nm."""
    return _j_to_pev(MU0_OVER_4PI * mu_a_j_per_t * mu_b_j_per_t / (r_nm * 1e-9) ** 3)


def probe_moment_j_per_t(mu_mev_per_t: float) -> float:
    return mu_mev_per_t * 1e-3 * ELEMENTARY_CHARGE


@dataclass(frozen=True, eq=False)
class SpinGeometry:
    """Positions, moments and field of a spin cluster and its probe.

    Attributes:
        positions: Spin positions, shape ``(n, 3)``, in nm.
        moments: Spin magnetic moments in units of μ_N, shape ``(n,)``.
        b_field: Static field in tesla.
        probe_position: Probe position in nm.
        probe_axis: Unit vector of the probe moment in its ``+1`` σ_x state.
        probe_moment: Probe moment magnitude in meV/T.
    """

    positions: NDArray[np.float64]
    moments: NDArray[np.float64]
    b_field: NDArray[np.float64]
    probe_position: NDArray[np.float64]
    probe_axis: NDArray[np.float64]
    probe_moment: float

    def __post_init__(self) -> None:
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        mom = np.atleast_1d(np.asarray(self.moments, dtype=float))
        if pos.ndim != 2 or pos.shape[1] != 3 or mom.shape != (pos.shape[0],):
            raise ValueError("positions must have shape (n, 3) and moments shape (n,)")
        if not 1 <= pos.shape[0] <= MAX_SPINS:
            raise ValueError(f"between 1 and {MAX_SPINS} spins are supported")
        d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        if np.any(d[np.triu_indices(pos.shape[0], 1)] <= COINCIDENCE_TOL_NM):
            raise ValueError("two spins coincide")
        rp = np.asarray(self.probe_position, dtype=float).reshape(3)
        if np.any(np.linalg.norm(pos - rp, axis=1) <= COINCIDENCE_TOL_NM):
            raise ValueError("the probe coincides with a spin")
        axis = np.asarray(self.probe_axis, dtype=float).reshape(3)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValueError("probe_axis must be a unit vector")
        for name, arr in (
            ("positions", pos),
            ("moments", mom),
            ("b_field", np.asarray(self.b_field, dtype=float).reshape(3)),
            ("probe_position", rp),
            ("probe_axis", axis),
        ):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_spins(self) -> int:
        return self.positions.shape[0]

    def with_probe(self, position: ArrayLike) -> "SpinGeometry":
        return replace(self, probe_position=np.asarray(position, dtype=float))

    def scaled(self, factor: float) -> "SpinGeometry":
        """All positions (spins and probe) multiplied by ``factor``."""
        return replace(
            self, positions=self.positions * factor, probe_position=self.probe_position * factor
        )


def spin_operators(n: int) -> list[tuple[NDArray, NDArray, NDArray]]:
    """``(S_x, S_y, S_z)`` of each of ``n`` spin-½ particles, ``S = σ/2``."""
    ops = []
    for k in range(n):
        triple = []
        for s in (SIGMA_X, SIGMA_Y, SIGMA_Z):
            out = np.ones((1, 1), dtype=np.complex128)
            for j in range(n):
                out = tensor_product(out, 0.5 * s if j == k else np.eye(2))
            triple.append(out)
        ops.append(tuple(triple))
    return ops


def _dot(vec: NDArray, s: tuple[NDArray, NDArray, NDArray]) -> NDArray:
    return vec[0] * s[0] + vec[1] * s[1] + vec[2] * s[2]


def build_spin_hamiltonian(geom: SpinGeometry) -> HermitianOperator:
    """Zeeman plus dipole–dipole Hamiltonian in peV.

    ``H = −Σ_k μ_k B₀·S_k + Σ_{k<k'} J_kk' [S_k·S_k' − 3(S_k·r̂)(S_k'·r̂)]`` with
    ``J_kk' = μ₀μ_kμ_k'/(4π r³)`` and ``r = r_k − r_k'``.
    """
    n = geom.n_spins
    s = spin_operators(n)
    dim = 2**n
    h = np.zeros((dim, dim), dtype=np.complex128)
    mu_j = geom.moments * NUCLEAR_MAGNETON_J_PER_T
    for k in range(n):
        h -= geom.moments[k] * NUCLEAR_MAGNETON_PEV_PER_T * _dot(geom.b_field, s[k])
    for k in range(n):
        for kp in range(k + 1, n):
            r = geom.positions[k] - geom.positions[kp]
            dist = float(np.linalg.norm(r))
            rhat = r / dist
            j = dipolar_prefactor(mu_j[k], mu_j[kp], dist)
            ss = sum(s[k][a] @ s[kp][a] for a in range(3))
            h += j * (ss - 3 * _dot(rhat, s[k]) @ _dot(rhat, s[kp]))
    return HermitianOperator(h)


def probe_coupling_operator(geom: SpinGeometry) -> NDArray[np.complex128]:
    """``C = Σ_k J_Pk [n̂_P·S_k − 3(n̂_P·r̂)(S_k·r̂)]`` in peV, with ``r = r_P − r_k``."""
    n = geom.n_spins
    s = spin_operators(n)
    dim = 2**n
    c = np.zeros((dim, dim), dtype=np.complex128)
    mu_p = probe_moment_j_per_t(geom.probe_moment)
    for k in range(n):
        r = geom.probe_position - geom.positions[k]
        dist = float(np.linalg.norm(r))
        rhat = r / dist
        j = dipolar_prefactor(mu_p, geom.moments[k] * NUCLEAR_MAGNETON_J_PER_T, dist)
        c += j * (_dot(geom.probe_axis, s[k]) - 3 * float(geom.probe_axis @ rhat) * _dot(rhat, s[k]))
    return c


def build_probe_coupling(geom: SpinGeometry) -> NDArray[np.complex128]:
    """``σ_x ⊗ C`` on probe⊗spins, in peV."""
    return tensor_product(SIGMA_X, probe_coupling_operator(geom))


def spin_blocks(geom: SpinGeometry) -> CouplingBlocks:
    """Blocks in the σ_z control basis: ``A₀ = A₁ = H_spin`` and ``B = C``."""
    h = build_spin_hamiltonian(geom)
    return CouplingBlocks(h, h, probe_coupling_operator(geom))


def _unit(v: NDArray) -> NDArray:
    return v / np.linalg.norm(v)


def random_unit_vector(rng: np.random.Generator) -> NDArray[np.float64]:
    return _unit(rng.normal(size=3))


def random_spin_cluster(
    rng: np.random.Generator,
    n_spins: int = 4,
    radius_nm: float = 0.01,
    moments: ArrayLike | None = None,
    min_separation_nm: float = 0.0,
    max_tries: int = 10_000,
) -> NDArray[np.float64]:
    """Positions uniform in a ball, resampled until all pairs are far enough apart."""
    for _ in range(max_tries):
        d = np.array([random_unit_vector(rng) for _ in range(n_spins)])
        r = radius_nm * rng.uniform(size=n_spins) ** (1 / 3)
        pos = d * r[:, None]
        sep = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)[np.triu_indices(n_spins, 1)]
        if sep.size == 0 or np.min(sep) >= min_separation_nm:
            return pos
    raise RuntimeError("could not place the spins with the requested minimum separation")


def random_probe_positions(
    rng: np.random.Generator, count: int, r_min_nm: float, r_max_nm: float
) -> NDArray[np.float64]:
    """Probe positions uniform in the spherical shell ``r_min ≤ r ≤ r_max``."""
    u = rng.uniform(size=count)
    r = (r_min_nm**3 + u * (r_max_nm**3 - r_min_nm**3)) ** (1 / 3)
    return np.array([random_unit_vector(rng) * ri for ri in r])


@dataclass(frozen=True)
class NmrRunConfig:
    """Settings of one simulated NMR experiment.

    Attributes:
        budget_ns: Longest total evolution time in ns.
        tau_step_ns: Spacing of the τ grid in ns; the grid starts at one step.
        n_lambda: Number of bias values per τ; each octave of τ shares one window.
        shots: Repetitions per (λ, τ) point; 0 gives exact probabilities.
        seed: Master seed.
        margin: Required ratio of λ to the largest reachable flip amplitude.
        clearance: Required ratio of λ to the largest level difference of the
            spin Hamiltonian, which keeps every bias away from resonance.
        sub_budgets_ns: Shorter budgets analysed as prefixes of the τ grid.
        jobs: Worker processes for the sweep.
        padding: Zero-padding factor of the reported spectra.
    """

    budget_ns: float = 2e6
    tau_step_ns: float = 100.0
    n_lambda: int = 100
    shots: int = 1_000_000
    seed: int = 0
    margin: float = 1e3
    clearance: float = 10.0
    sub_budgets_ns: tuple[float, ...] = (8e4, 1.6e5)
    jobs: int = 1
    padding: int = 16

    def __post_init__(self) -> None:
        if self.budget_ns <= 0 or self.tau_step_ns <= 0:
            raise ValueError("budget and τ step must be positive")
        if self.n_lambda < 5:
            raise ValueError("at least five λ values are needed per τ")
        if self.shots < 0:
            raise ValueError("shots must be non-negative")
        if any(b <= 0 or b > self.budget_ns for b in self.sub_budgets_ns):
            raise ValueError("sub-budgets must lie in (0, budget]")

    @property
    def n_tau(self) -> int:
        return int(round(self.budget_ns / self.tau_step_ns))

    @property
    def budgets_ns(self) -> tuple[float, ...]:
        return tuple(sorted(set(self.sub_budgets_ns) | {self.budget_ns}))


def choose_lambda0(
    blocks: CouplingBlocks,
    rho: NDArray[np.complex128],
    tau_max: float,
    margin: float,
    clearance: float,
    validity_margin: float = DEFAULT_MARGIN,
) -> float:
    """Lowest bias of every window, in peV.

    ``λ₀`` is the largest of ``margin·max|B_jk|`` over reachable flip matrix
    elements, ``clearance·ΔE_max`` over level differences, and the smallest λ
    meeting the second-order validity conditions at ``tau_max`` with
    ``validity_margin``. Since every gap ``|E_j − E_k|`` is at most
    ``ΔE_max``, a clearance above 1 keeps every bias ≥ λ₀ off resonance.
    """
    report = validity_report(blocks, rho, 1.0, tau_max, 2, margin=margin)
    e = blocks.a0.eigenvalues
    lam0 = max(margin * report.max_coupling, clearance * float(np.ptp(e)))
    lam0 = max(lam0, minimum_valid_lambda(blocks, rho, tau_max, 2, validity_margin))
    return float(lam0) if lam0 > 0 else 1.0


@dataclass(frozen=True)
class ReferencePeak:
    """A line of the noise-free spectrum: frequency ``E_n − E_m`` and weight."""

    omega: float
    weight: complex
    n: int
    m: int


def reference_spectrum(
    blocks: CouplingBlocks, rho: NDArray[np.complex128], floor: float = 0.0
) -> list[ReferencePeak]:
    """Lines ``⟨n₀|B|m₁⟩⟨m₁|B†ρ|n₀⟩`` at ``E_n⁰ − E_m¹`` from direct diagonalisation."""
    e0, v0 = blocks.a0.eig()
    e1, v1 = blocks.a1.eig()
    bt = v0.conj().T @ blocks.b @ v1
    right = v1.conj().T @ blocks.bdag @ rho @ v0
    w = bt * right.T
    out = []
    for n in range(e0.size):
        for m in range(e1.size):
            if abs(w[n, m]) > floor:
                out.append(ReferencePeak(float(e0[n] - e1[m]), complex(w[n, m]), n, m))
    out.sort(key=lambda p: p.omega)
    return out


@dataclass(frozen=True, eq=False)
class NmrResult:
    """Outputs of :func:`run_nmr_experiment`.

    Attributes:
        lambdas: Bias windows in peV, shape ``(n_τ, n_λ)``.
        taus_ns: τ grid in ns.
        lam0: Lowest admissible bias λ₀ in peV.
        fits: Per-τ oscillation fits of ``λ²p``.
        spectra: Spectrum of the reconstructed correlation for each budget.
        reference: Lines from direct diagonalisation.
        validity: Validity report at λ₀ and the longest τ.
        degraded: Indices of τ whose fit failed (left at zero amplitude).
    """

    lambdas: NDArray[np.float64]
    taus_ns: NDArray[np.float64]
    lam0: float
    fits: list[OscillationFit]
    spectra: dict[float, SpectrumEstimate]
    reference: list[ReferencePeak]
    validity: ValidityReport
    degraded: tuple[int, ...] = field(default=())

    @cached_property
    def series(self) -> TauSeries:
        return self.spectra[max(self.spectra)].series


def _fit_column(
    lams: NDArray, p: NDArray, tau: float, shots: int, pooled: float
) -> OscillationFit:
    if shots > 0:
        # Binomial variance with p approximated by the pooled profile pooled/λ².
        weights = shots * lams**2 / pooled
        return fit_oscillation(lams, p, tau, weights=weights, envelope_order=2)
    return fit_oscillation(lams, p, tau, envelope_order=2)


def run_nmr_experiment(geom: SpinGeometry, cfg: NmrRunConfig) -> NmrResult:
    """Simulate the λ × τ sweep, fit every τ and Fourier transform the series.

    The probe is prepared in π₀ and measured in π₁, so the transition
    probability is second order in 1/λ. Each octave of τ shares
    ``n_lambda`` biases spread evenly above λ₀ (see
    :func:`~biasprobe.estimation.octave_windows`). Each τ is fitted with
    the known frequency τ after multiplying by λ², and the complex amplitudes
    are divided by their known prefactor to give ``⟨e^{iHτ}Be^{−iHτ}B⟩``.
    Shorter budgets reuse prefixes of the same τ grid.

    Returns:
        Spectra for every budget plus the reference lines. Validity problems
        are recorded in the result, not raised.
    """
    blocks = spin_blocks(geom)
    dim = blocks.dim
    rho = np.eye(dim, dtype=np.complex128) / dim
    taus_ns = cfg.tau_step_ns * np.arange(1, cfg.n_tau + 1)
    taus = taus_ns / HBAR_PEV_NS
    lam0 = choose_lambda0(blocks, rho, taus[-1], cfg.margin, cfg.clearance)
    report = validity_report(blocks, rho, lam0, taus[-1], 2)
    model = ProbeSystemModel.from_blocks(blocks, rho)
    lams = np.empty((taus.size, cfg.n_lambda))
    p = np.empty_like(lams)
    for band, (idx, window) in enumerate(octave_windows(lam0, taus, cfg.n_lambda)):
        seed = np.random.SeedSequence(cfg.seed, spawn_key=(band,))
        sweep = run_sweep(model, PREP, MEAS, window, taus[idx], cfg.shots, seed, cfg.jobs)
        lams[idx] = window
        p[idx] = sweep.p.T
    cls = classify_leading_order(PREP, MEAS)
    _, factor = leading_series_scale(cls)
    # Over whole periods the oscillating part of λ²p averages out, leaving a
    # τ-independent mean; pooling it over the whole grid gives the envelope.
    pooled = float(np.mean(lams**2 * p))
    if pooled <= 0:
        pooled = float(np.mean(lams**2)) / max(cfg.shots, 1)
    fits, degraded = [], []
    for j, tau in enumerate(taus):
        try:
            fits.append(_fit_column(lams[j], p[j], tau, cfg.shots, pooled))
        except (ValueError, np.linalg.LinAlgError):
            degraded.append(j)
            fits.append(OscillationFit(tau, 0.0, 0.0, 0.0, 0.0, np.full((3, 3), np.inf), 2, 0))
    values = np.array([f.complex_amplitude for f in fits]) / (2 * factor)
    spectra = {}
    for budget in cfg.budgets_ns:
        k = int(round(budget / cfg.tau_step_ns))
        series = TauSeries(taus[:k], values[:k], quantity="row6")
        spectra[budget] = fourier_spectrum(series, window="rect", padding=cfg.padding)
    return NmrResult(
        lambdas=lams,
        taus_ns=taus_ns,
        lam0=lam0,
        fits=fits,
        spectra=spectra,
        reference=reference_spectrum(blocks, rho),
        validity=report,
        degraded=tuple(degraded),
    )


# Spawn keys of the demo's geometry streams, disjoint from the sweep rows.
GEOMETRY_STREAM = 2**31 + 1
PROBE_STREAM = 2**31 + 2


def nyquist_energy(tau_step_ns: float) -> float:
    """Largest unaliased line frequency ``πħ/Δτ`` in peV for a τ step in ns."""
    return np.pi * HBAR_PEV_NS / tau_step_ns


@dataclass(frozen=True)
class SpinDemoConfig:
    """A random spin cluster observed from several random probe positions.

    Attributes:
        n_spins: Number of spin-½ nuclei.
        cluster_radius_nm: Radius of the ball the spins are drawn from.
        min_separation_nm: Smallest allowed distance between two spins.
        moments: Spin moments in μ_N; ``None`` gives one μ_N for every spin.
        b_field_t: Static field, tesla.
        probe_axis: Probe moment direction, perpendicular to the field by default.
        probe_moment: Probe moment in meV/T.
        probe_shell_nm: Inner and outer radius of the shell holding the probe.
        n_positions: Number of probe positions.
        nyquist_fraction: Clusters whose level spread exceeds this fraction of
            the Nyquist energy of the τ grid are redrawn.
        seed: Master seed of geometry, bias grid and shot noise.
        nmr: Settings of each experiment; its seed is replaced per position.
    """

    n_spins: int = 4
    cluster_radius_nm: float = 0.03
    min_separation_nm: float = 0.02
    moments: tuple[float, ...] | None = None
    b_field_t: tuple[float, float, float] = (1e-3, 0.0, 0.0)
    probe_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    probe_moment: float = 0.3
    probe_shell_nm: tuple[float, float] = (1.8, 2.4)
    n_positions: int = 4
    nyquist_fraction: float = 0.8
    seed: int = 0
    nmr: NmrRunConfig = field(default_factory=NmrRunConfig)

    def __post_init__(self) -> None:
        if not 1 <= self.n_spins <= MAX_SPINS:
            raise ValueError(f"between 1 and {MAX_SPINS} spins are supported")
        if self.moments is not None and len(self.moments) != self.n_spins:
            raise ValueError("one moment per spin is required")
        lo, hi = self.probe_shell_nm
        if not 0 < lo <= hi:
            raise ValueError("probe shell radii must satisfy 0 < r_min <= r_max")
        if lo <= self.cluster_radius_nm:
            raise ValueError("the probe shell must lie outside the spin cluster")
        if self.n_positions < 1:
            raise ValueError("at least one probe position is required")


@dataclass(frozen=True, eq=False)
class SpinDemoResult:
    """One spin cluster, its probe placements and one experiment per placement."""

    geometries: list[SpinGeometry]
    results: list[NmrResult]


def demo_geometry(cfg: SpinDemoConfig, max_tries: int = 1000) -> tuple[SpinGeometry, NDArray]:
    """Draw the spin cluster and the probe positions of a demo.

    Returns:
        The geometry with the first probe position, and all probe positions.

    Raises:
        RuntimeError: No cluster with a level spread below the Nyquist limit
            was found.
    """
    moments = np.ones(cfg.n_spins) if cfg.moments is None else np.asarray(cfg.moments, float)
    geo_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(GEOMETRY_STREAM,)))
    probe_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(PROBE_STREAM,)))
    probes = random_probe_positions(probe_rng, cfg.n_positions, *cfg.probe_shell_nm)
    limit = cfg.nyquist_fraction * nyquist_energy(cfg.nmr.tau_step_ns)
    for _ in range(max_tries):
        pos = random_spin_cluster(
            geo_rng, cfg.n_spins, cfg.cluster_radius_nm, min_separation_nm=cfg.min_separation_nm
        )
        geom = SpinGeometry(
            pos, moments, np.asarray(cfg.b_field_t), probes[0], np.asarray(cfg.probe_axis), cfg.probe_moment
        )
        if np.ptp(build_spin_hamiltonian(geom).eigenvalues) < limit:
            return geom, probes
    raise RuntimeError("no spin cluster fits inside the Nyquist band of the τ grid")


def run_spin_demo(cfg: SpinDemoConfig) -> SpinDemoResult:
    """Run :func:`run_nmr_experiment` for every probe position of one cluster."""
    geom, probes = demo_geometry(cfg)
    geoms, results = [], []
    for i, position in enumerate(probes):
        g = geom.with_probe(position)
        seed = int(np.random.SeedSequence(cfg.seed, spawn_key=(PROBE_STREAM, i)).generate_state(1)[0])
        geoms.append(g)
        results.append(run_nmr_experiment(g, replace(cfg.nmr, seed=seed)))
    return SpinDemoResult(geoms, results)

"""End-to-end acceptance criteria, one test per criterion.

Each test records a one-line verdict that the session prints in its summary,
then asserts it at the stated tolerance.
"""

import hashlib
import warnings
from pathlib import Path

import numpy as np
import pytest
import scipy.optimize

from biasprobe.cli import main
from biasprobe.dynamics import run_sweep
from biasprobe.estimation import (
    build_tau_series,
    convergence_check,
    find_peaks,
    fit_oscillation,
    fourier_spectrum,
    peak_fwhm,
    period_windows,
    split_windows,
)
from biasprobe.model import CouplingBlocks, ProbePureState, ProbeSystemModel, random_model
from biasprobe.perturbation import (
    classify_leading_order,
    expansion_functions,
    leading_series_scale,
    oscillation_model,
    perturbative_probability,
    transfer_weight,
)
from biasprobe.spin import HBAR_PEV_NS, SpinDemoConfig, reference_spectrum, run_spin_demo
from biasprobe.validity import kappa_matrix, minimum_valid_lambda, validity_report
from biasprobe.vibronic import HBAR_MEV_PS, VibronicDemoConfig, run_vibronic_demo
from conftest import random_complex, random_hermitian, record_acceptance

PI0 = ProbePureState.control(0)
PI1 = ProbePureState.control(1)
ALPHA = ProbePureState.bloch(1.0, 0.3)
BETA = ProbePureState.bloch(2.1, -0.7)


def loglog_slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def test_criterion_1_perturbative_scaling():
    m = random_model(np.random.default_rng(2024), 2)
    tau = 1.0
    lam_min = minimum_valid_lambda(m.blocks, m.rho_s, tau, 2)
    lams = np.geomspace(lam_min, 10 * lam_min, 200)
    exact = run_sweep(m, PI0, PI0, lams, [tau]).p_exact[:, 0]
    pert = np.array([perturbative_probability(m.blocks, m.rho_s, PI0, PI0, lam, tau, 2) for lam in lams])
    slope = loglog_slope(lams, np.abs(exact - pert))
    passed = slope <= -2.5
    record_acceptance(1, passed, f"slope {slope:.2f} over λ in [{lam_min:.3g}, {10 * lam_min:.3g}] (need ≤ -2.5)")
    assert passed


def dominant_frequency(lams, y, guess):
    y = y - np.mean(y)
    power = lambda w: -abs(np.sum(y * np.exp(-1j * w * lams)))
    grid = np.linspace(0.5 * guess, 1.5 * guess, 2001)
    w0 = grid[np.argmin([power(w) for w in grid])]
    step = grid[1] - grid[0]
    return float(scipy.optimize.minimize_scalar(power, bounds=(w0 - step, w0 + step), method="bounded",
                                                options={"xatol": 1e-12}).x)


def test_criterion_2_classification():
    m = random_model(np.random.default_rng(7), 2)
    tau = 0.8
    period = 2 * np.pi / tau
    # The amplitude laws are asymptotic; one decade starting 10× above the
    # validity threshold keeps the subleading 1/λ terms out of the slopes.
    lam0 = 10 * minimum_valid_lambda(m.blocks, m.rho_s, tau, 2)
    centres = np.geomspace(lam0, 10 * lam0, 6)
    cases = {"general": (ALPHA, BETA, 0), "prep-control": (PI0, BETA, 1), "meas-control": (ALPHA, PI1, 1),
             "both-control": (PI0, PI1, 2)}
    details, ok = [], True
    for name, (a, b, order) in cases.items():
        amps = []
        for c in centres:
            lams = c + np.linspace(0, 2 * period, 24)
            p = run_sweep(m, a, b, lams, [tau]).p_exact[:, 0]
            amps.append(fit_oscillation(lams, p, tau).D)
        slope = loglog_slope(centres, amps)
        lams = 10 * lam0 + np.linspace(0, 40 * period, 800)
        p = run_sweep(m, a, b, lams, [tau]).p_exact[:, 0]
        freq = dominant_frequency(lams, lams**order * (p - transfer_weight(a, b)), tau)
        rel = abs(freq - tau) / tau
        case_ok = abs(slope + order) <= 0.2 and rel <= 1e-3 and classify_leading_order(a, b).order == order
        ok &= case_ok
        details.append(f"{name} slope {slope:.2f} (want {-order}), freq err {rel:.1e}")
    record_acceptance(2, ok, "; ".join(details))
    assert ok


def test_criterion_3_zeroth_order_triviality():
    rng = np.random.default_rng(5)
    b = random_complex(rng, (3, 3))
    cls = classify_leading_order(ALPHA, BETA)
    amps_pred, amps_fit = [], []
    tau = 1.2
    lams = 50 + np.linspace(0, 2 * 2 * np.pi / tau, 30)
    for _ in range(2):
        h = random_hermitian(rng, 3)
        rho = np.diag(rng.dirichlet(np.ones(3))).astype(complex)
        blk = CouplingBlocks.from_arrays(h, h, b)
        amps_pred.append(oscillation_model(cls, expansion_functions(blk, rho, 50.0, tau)).D)
        free = ProbeSystemModel.from_blocks(CouplingBlocks.from_arrays(h, h, np.zeros((3, 3))), rho)
        p = run_sweep(free, ALPHA, BETA, lams, [tau]).p_exact[:, 0]
        amps_fit.append(fit_oscillation(lams, p, tau).D)
    d_pred = abs(amps_pred[0] - amps_pred[1])
    d_fit = abs(amps_fit[0] - amps_fit[1])
    passed = d_pred <= 1e-8 and d_fit <= 1e-8
    record_acceptance(3, passed, f"|ΔD| order-0 prediction {d_pred:.1e}, exact sweep fit {d_fit:.1e} (need ≤ 1e-8)")
    assert passed


def test_criterion_4_row6_spectrum():
    # Seed chosen so that no two transition frequencies lie within 3 bins.
    m = random_model(np.random.default_rng(31), 4)
    taus = 0.5 * np.arange(1, 257)
    lam0 = minimum_valid_lambda(m.blocks, m.rho_s, taus[-1], 2)
    fits = []
    for t, window in zip(taus, period_windows(lam0, taus, 12)):
        p = run_sweep(m, PI0, PI1, window, [t]).p_exact[:, 0]
        fits.append(fit_oscillation(window, p, t, envelope_order=2))
    _, factor = leading_series_scale(classify_leading_order(PI0, PI1))
    spec = fourier_spectrum(build_tau_series(fits, 2 * factor))
    ref = reference_spectrum(m.blocks, m.rho_s)
    wmax = max(abs(r.weight) for r in ref)
    peaks = find_peaks(spec, abs_floor=0.01 * wmax)
    worst_pos = worst_w = 0.0
    for pk in peaks:
        line = min(ref, key=lambda r: abs(r.omega - pk.omega))
        worst_pos = max(worst_pos, abs(pk.omega - line.omega) / spec.resolution)
        worst_w = max(worst_w, abs(pk.weight - line.weight) / abs(line.weight))
    passed = bool(peaks) and worst_pos <= 1 and worst_w <= 0.05
    record_acceptance(4, passed, f"{len(peaks)} peaks, worst offset {worst_pos:.3f} bin, worst complex weight error {worst_w:.3f}")
    assert passed


def isolated_lines(peaks, budgets, rel=0.2, iso=0.1):
    """Strong long-budget Hann peaks with no comparable neighbour within two short-budget bins."""
    short, long_ = budgets[0], budgets[-1]
    bin_s = 2 * np.pi * HBAR_PEV_NS / short
    bin_l = 2 * np.pi * HBAR_PEV_NS / long_
    top = max(p.height for p in peaks)
    out = []
    for p in peaks:
        if p.height < rel * top or abs(p.omega) < 2 * bin_s:
            continue
        near = [q for q in peaks if 3 * bin_l < abs(q.omega - p.omega) < 2 * bin_s and q.height > iso * p.height]
        if not near:
            out.append(p.omega)
    return out


@pytest.mark.slow
def test_criterion_5_spin_resolution():
    demo = run_spin_demo(SpinDemoConfig(seed=0))
    budgets = sorted(demo.results[0].spectra)
    bins = [2 * np.pi * HBAR_PEV_NS / b for b in budgets]
    long_ = budgets[-1]
    # Positions: strong lines lie on the cluster's line set, and a line seen
    # from several probe positions sits in the same bin at each.
    lines = np.unique(np.concatenate([[r.omega for r in res.reference if abs(r.weight) > 0] for res in demo.results]))
    groups: dict[int, list[float]] = {}
    worst_offset = 0.0
    hann = [find_peaks(fourier_spectrum(res.spectra[long_].series, "hann", 16)) for res in demo.results]
    for peaks in hann:
        top = max(p.height for p in peaks)
        for p in peaks:
            if p.height < 0.1 * top:
                continue
            k = int(np.argmin(np.abs(lines - p.omega)))
            worst_offset = max(worst_offset, abs(lines[k] - p.omega) / bins[-1])
            groups.setdefault(k, []).append(p.omega)
    spreads = [np.ptp(v) / bins[-1] for v in groups.values() if len(v) > 1]
    positions_ok = worst_offset <= 1 and bool(spreads) and max(spreads) <= 1
    # Widths of lines isolated at the longest budget, median over lines and positions.
    rows = []
    for res, peaks in zip(demo.results, hann):
        found = {b: find_peaks(res.spectra[b]) for b in budgets}
        for om in isolated_lines(peaks, budgets):
            widths = []
            for b in budgets:
                cand = [q for q in found[b] if abs(q.omega - om) <= bins[0]]
                widths.append(peak_fwhm(res.spectra[b], max(cand, key=lambda q: q.height)) if cand else np.nan)
            rows.append(widths)
    rows = np.array(rows)
    rows = rows[~np.isnan(rows).any(axis=1)]
    r1 = float(np.median(rows[:, 0] / rows[:, 1])) if len(rows) else 0.0
    r2 = float(np.median(rows[:, 0] / rows[:, 2])) if len(rows) else 0.0
    passed = positions_ok and r1 >= 1.8 and r2 >= 8
    record_acceptance(
        5, passed,
        f"position offset ≤ {worst_offset:.2f} bin, cross-position spread ≤ {max(spreads, default=np.nan):.2f} bin; "
        f"FWHM ratio 80→160 μs {r1:.2f} (≥ 1.8), 80 μs→2 ms {r2:.1f} (≥ 8) on {len(rows)} isolated lines",
    )
    assert passed


@pytest.mark.slow
def test_criterion_6_vibronic_round_trip():
    clean = run_vibronic_demo(VibronicDemoConfig(fock_cutoff=24))
    noisy = run_vibronic_demo(VibronicDemoConfig(shots=10**6, seed=0))
    omega = np.array(VibronicDemoConfig().omega)
    j_true = (np.array(VibronicDemoConfig().gamma_d) - np.array(VibronicDemoConfig().gamma_a)) ** 2
    dt = clean.taus_ps[0] / HBAR_MEV_PS
    bin_width = 2 * np.pi / (clean.taus_ps.size * dt)
    freq_err = np.max(np.abs(clean.density.omega - omega)) / bin_width
    j_clean = np.max(np.abs(clean.density.J_weights / j_true - 1))
    j_noisy = np.max(np.abs(noisy.density.J_weights / j_true - 1)) if noisy.density is not None else np.inf
    t_err = abs(noisy.temperature / 300.0 - 1) if noisy.temperature else np.inf
    scale = 2 * clean.model.V**2 / clean.model.lam**2
    fock_err = float(np.max(np.abs(clean.p_fock - clean.p_analytic)) / scale)
    parts = {
        "modes": freq_err <= 1 and clean.density.omega.size == omega.size,
        "J clean": j_clean <= 0.05,
        "J 1e6 shots": j_noisy <= 0.15,
        "temperature": t_err <= 0.05,
        "Fock": fock_err <= 0.05,
    }
    passed = all(parts.values())
    record_acceptance(
        6, passed,
        f"mode offset {freq_err:.3f} bin, J error {j_clean:.4f} clean / {j_noisy:.3f} noisy, T error {t_err:.3f}, "
        f"analytic vs Fock {fock_err:.3f} of 2V²/λ² (failing parts: {[k for k, v in parts.items() if not v] or 'none'})",
    )
    assert passed


def test_criterion_7_validity_machinery():
    blk = CouplingBlocks.from_arrays(np.diag([0.0, 1.0]), np.diag([0.5, 3.0]), np.array([[0.0, 0.2], [0.0, 0.0]]))
    resonant = validity_report(blk, np.eye(2) / 2, 3.0, 1.0, 2)
    flagged = not resonant.passed and [(r.j0, r.k1) for r in resonant.resonances] == [(0, 1)]
    kappa_ok = kappa_matrix([2.0, 2.0, 5.0], 7.25)[0, 1] == 7.25
    m = random_model(np.random.default_rng(5), 2)
    tau = 1.0
    lam_valid = minimum_valid_lambda(m.blocks, m.rho_s, tau, 2)
    period = 2 * np.pi / tau

    def converged(lam0):
        lams = lam0 + np.linspace(0, 3.2 * period, 120)
        p = run_sweep(m, PI0, PI1, lams, [tau]).p_exact[:, 0]
        return convergence_check([fit_oscillation(lams[w], p[w], tau, envelope_order=2) for w in split_windows(lams, 3)]).passed

    below, above = converged(lam_valid / 100), converged(lam_valid)
    passed = flagged and kappa_ok and not below and above
    record_acceptance(
        7, passed,
        f"resonance flagged {flagged}, κ degenerate = τ {kappa_ok}, convergence below {below} / above {above} "
        f"the valid λ {lam_valid:.3g}",
    )
    assert passed


def test_criterion_8_eta_flatness():
    rng = np.random.default_rng(8)
    a = np.diag([0.0, 0.7, 1.9])
    blk = CouplingBlocks.from_arrays(a, a, random_complex(rng, (3, 3)))
    beta = ProbePureState.bloch(1.0, 0.2)
    taus = np.linspace(0.2, 4.0, 20)
    lam0 = 1e8

    def eta_series(rho):
        model = ProbeSystemModel.from_blocks(blk, rho)
        q = transfer_weight(PI0, beta)
        out = []
        for t in taus:
            lams = lam0 + np.linspace(0, 2 * 2 * np.pi / t, 16)
            p = run_sweep(model, PI0, beta, lams, [t]).p_exact[:, 0]
            out.append(fit_oscillation(lams, p, t, subtract=q, envelope_order=1).eta)
        return np.array(out)

    rho = np.diag([0.5, 0.3, 0.2]).astype(complex)
    flat = float(np.ptp(eta_series(rho)))
    rho[0, 1] = rho[1, 0] = 0.1
    varied = float(np.ptp(eta_series(rho)))
    passed = flat <= 1e-6 and varied > 1e-5
    record_acceptance(8, passed, f"η spread {flat:.1e} diagonal (≤ 1e-6), {varied:.1e} with coherence (> 1e-5)")
    assert passed


def run_pipeline(tmp: Path, jobs: int) -> dict[str, str]:
    out = tmp / f"jobs{jobs}"
    (tmp / "sweep.yaml").write_text(
        "seed: 11\nmodel: {kind: random, dim: 2}\nprep: {control: 0}\nmeas: {control: 1}\n"
        "lambdas: {start: 40, stop: 120, num: 160}\ntaus: {start: 0.5, stop: 4.0, num: 16}\nshots: 100000\n"
    )
    assert main(["sweep", "--config", str(tmp / "sweep.yaml"), "--out", str(out / "sweep"), "--jobs", str(jobs)]) == 0
    (out / "fit.yaml").write_text(f"input: {out / 'sweep' / 'sweep.csv'}\nprep: {{control: 0}}\nmeas: {{control: 1}}\n")
    assert main(["fit", "--config", str(out / "fit.yaml"), "--out", str(out / "fit"), "--jobs", str(jobs)]) == 0
    (out / "rec.yaml").write_text(f"input: {out / 'fit' / 'fit.csv'}\nprep: {{control: 0}}\nmeas: {{control: 1}}\n")
    assert main(["reconstruct", "--config", str(out / "rec.yaml"), "--out", str(out / "rec"), "--jobs", str(jobs)]) == 0
    digests = {}
    for f in sorted(out.rglob("*")):
        if f.is_file() and f.suffix != ".yaml":
            text = f.read_text().replace(str(out), "<out>")
            digests[str(f.relative_to(out))] = hashlib.sha256(text.encode()).hexdigest()
    return digests


def test_criterion_9_determinism(tmp_path):
    one = run_pipeline(tmp_path, 1)
    eight = run_pipeline(tmp_path, 8)
    sweep_identical = one["sweep/sweep.csv"] == eight["sweep/sweep.csv"]
    passed = one == eight and sweep_identical and len(one) >= 6
    record_acceptance(9, passed, f"{len(one)} output files identical across 1 and 8 workers: {one == eight}")
    assert passed

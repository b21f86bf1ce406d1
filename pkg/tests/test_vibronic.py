import math
import warnings

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from biasprobe.vibronic import (
    HBAR_MEV_PS,
    K_B_MEV_PER_K,
    ThermometryError,
    ValidityWarning,
    VibronicDemoConfig,
    VibronicModel,
    analytic_probability,
    displacement_matrix,
    displacement_matrix_element,
    f_tau,
    f_tilde,
    fock_probability,
    lambda_bound,
    lambda_windows,
    phase_shift,
    reconstruct_f_and_Er,
    run_vibronic_demo,
    spectral_density,
    thermometry,
)

OMEGA = np.array([8.0, 20.0])
GD = np.array([1.6, 5.0])
GA = np.zeros(2)


def model(lam=100.0, temperature=300.0, omega=OMEGA, gd=GD, ga=GA, V=1.0):
    return VibronicModel(np.asarray(omega), np.asarray(gd), np.asarray(ga), V, lam, temperature)


def f_oracle(omega, gd, ga, temperature, tau_ps):
    total = 0.0
    t = tau_ps / HBAR_MEV_PS
    for w, d, a in zip(map(float, omega), map(float, gd), map(float, ga)):
        x = math.inf if temperature == 0 else w / (2 * K_B_MEV_PER_K * temperature)
        coth = 1.0 if x > 50 else 1 / math.tanh(x)
        total -= ((d - a) / w) ** 2 * coth * (1 - math.cos(w * t))
    return total


class TestModel:
    def test_invariants(self):
        m = model()
        assert m.reorganization_energy == pytest.approx(np.sum(GD**2 / OMEGA), rel=1e-12)
        assert m.spectral_weights == pytest.approx(GD**2)
        with pytest.warns(ValidityWarning):
            model(lam=5.0)
        for bad in ({"omega": [-1.0, 2.0]}, {"V": 0.0}, {"temperature": -1.0}):
            with pytest.raises(ValueError):
                model(**bad)

    def test_units(self):
        m = model()
        assert m.kT == pytest.approx(25.852, rel=1e-4)
        # λ ≥ 10 τ V² gives τ_max = 10 ħ/meV.
        assert m.tau_max() == pytest.approx(10 * HBAR_MEV_PS)


class TestF:
    def test_zero(self):
        assert f_tau(model(), 0.0) == 0.0

    def test_single_mode_zero_temperature(self):
        m = model(temperature=0, omega=[5.0], gd=[2.0], ga=[0.0])
        t = np.linspace(0, 3, 7)
        assert f_tau(m, t) == pytest.approx(-(0.4**2) * (1 - np.cos(5.0 * t / HBAR_MEV_PS)), abs=1e-15)

    @given(st.floats(0, 50), st.floats(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_oracle_and_bounds(self, tau, temperature):
        m = model(temperature=temperature, ga=[0.3, -1.0])
        f = f_tau(m, tau)
        assert f == pytest.approx(f_oracle(OMEGA, GD, [0.3, -1.0], temperature, tau), abs=1e-14, rel=1e-14)
        assert f <= 0 and 0 < np.exp(f) <= 1

    def test_phase_shift(self):
        m = model()
        t = 0.7
        expected = np.sum((GD / OMEGA) ** 2 * np.sin(OMEGA * t / HBAR_MEV_PS))
        assert phase_shift(m, t) == pytest.approx(expected)


class TestAnalyticProbability:
    def test_tau_zero(self):
        m = model()
        assert analytic_probability(m, 0.0, literal=True) == pytest.approx(1e-4)
        assert analytic_probability(m, 0.0) == 0.0

    def test_literal_form(self):
        m = model()
        t = 1.3
        arg = (100 - m.reorganization_energy) * t / HBAR_MEV_PS
        expected = 1e-4 * (2 - np.cos(arg) * np.exp(f_tau(m, t)))
        assert analytic_probability(m, t, literal=True) == pytest.approx(expected)

    def test_warns_beyond_tau_max(self):
        m = model()
        with pytest.warns(ValidityWarning):
            analytic_probability(m, 2 * m.tau_max())

    def test_fock_cutoff_converged(self):
        m = model(temperature=23.0)
        t = np.linspace(0.1, 1.5, 4)
        assert fock_probability(m, t, 12) == pytest.approx(fock_probability(m, t, 14), abs=1e-3 * 2e-4)

    def test_against_fock(self):
        # Low temperature keeps cutoff 12 converged. The closed form is the
        # leading term in 1/λ, so its error relative to 2V²/λ² falls like ω/λ.
        t = np.linspace(0.05, 1.0, 8) * HBAR_MEV_PS
        lams = np.array([200.0, 400.0, 800.0, 1600.0])
        rel = []
        for lam in lams:
            m = model(lam=lam, temperature=23.0)
            exact = fock_probability(m, t, 12)
            rel.append(np.max(np.abs(exact - analytic_probability(m, t, warn=False))) / (2 / lam**2))
        slope = np.polyfit(np.log(lams), np.log(rel), 1)[0]
        assert slope == pytest.approx(-1.0, abs=0.25)
        assert rel[-2] <= 0.05

    def test_lambda_bound(self):
        b = lambda_bound(model())
        assert np.isfinite(b) and 0 < b <= 1.0
        assert 100.0 >= 10 * b


class TestDisplacement:
    def test_vacuum_overlap(self):
        xi = 0.7 - 0.2j
        assert displacement_matrix_element(0, 0, xi) == pytest.approx(np.exp(-abs(xi) ** 2 / 2))

    def test_identity(self):
        assert displacement_matrix(0.0, 6) == pytest.approx(np.eye(6))

    @pytest.mark.parametrize("xi", [0.3, 1.1 + 0.4j, -0.8j])
    def test_against_expm(self, xi):
        n = 40
        b = np.diag(np.sqrt(np.arange(1, n)), 1)
        full = scipy.linalg.expm(xi * b.conj().T - np.conj(xi) * b)
        assert displacement_matrix(xi, 15) == pytest.approx(full[:15, :15], abs=1e-8)

    def test_negative_index(self):
        with pytest.raises(ValueError):
            displacement_matrix_element(-1, 0, 0.1)


class TestReconstruction:
    def grid(self, m, n_tau=60, step=0.1):
        taus = step * HBAR_MEV_PS * np.arange(1, n_tau + 1)
        lams = lambda_windows(m.lam, taus, 32)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ValidityWarning)
            p = np.array([[analytic_probability(m.with_lambda(l), t, warn=False) for l in row] for row, t in zip(lams, taus)])
        return taus, lams, p

    def test_noise_free_inversion(self):
        m = model()
        taus, lams, p = self.grid(m)
        rec = reconstruct_f_and_Er(lams, taus, p, 1.0, mode_frequencies=OMEGA)
        assert rec.f == pytest.approx(f_tau(m, taus), abs=1e-8)
        assert rec.reorganization_energy == pytest.approx(m.reorganization_energy, abs=1e-8)
        assert not rec.unresolved

    def test_literal_inversion(self):
        m = model()
        taus, lams, _ = self.grid(m)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ValidityWarning)
            p = np.array([[analytic_probability(m.with_lambda(l), t, literal=True, warn=False) for l in row] for row, t in zip(lams, taus)])
        rec = reconstruct_f_and_Er(lams, taus, p, 1.0, literal=True)
        assert rec.f == pytest.approx(f_tau(m, taus), abs=1e-8)

    def test_zero_reorganization(self):
        m = model(omega=[10.0], gd=[2.0], ga=[-2.0])
        assert m.reorganization_energy == 0
        taus, lams, p = self.grid(m)
        rec = reconstruct_f_and_Er(lams, taus, p, 1.0, mode_frequencies=[10.0])
        assert rec.reorganization_energy == pytest.approx(0, abs=1e-8)


class TestSpectralDensity:
    def test_single_mode_on_bin(self):
        n, step = 64, 0.1
        taus = step * HBAR_MEV_PS * np.arange(1, n + 1)
        w0 = 2 * np.pi * 10 / (n * step)
        m = model(omega=[w0], gd=[3.0], ga=[0.0])
        est = spectral_density(taus, f_tau(m, taus), temperature=300.0)
        assert est.omega == pytest.approx([w0], rel=1e-8)
        assert est.J_weights == pytest.approx([9.0], rel=1e-6)

    def test_high_frequency_limit(self):
        assert f_tilde([1e4], [2.0], 300.0)[0] == pytest.approx(2.0 / 1e8, rel=1e-12)

    def test_round_trip(self):
        res = run_vibronic_demo(VibronicDemoConfig())
        bin_width = 2 * np.pi / (res.taus_ps.size * res.taus_ps[0] / HBAR_MEV_PS)
        assert res.density.omega == pytest.approx(OMEGA, abs=bin_width)
        assert res.density.J_weights == pytest.approx(GD**2, rel=0.05)
        assert res.temperature == pytest.approx(300.0, rel=1e-3)
        assert res.reconstruction.reorganization_energy == pytest.approx(model().reorganization_energy, abs=1e-6)

    def test_shot_noise(self):
        res = run_vibronic_demo(VibronicDemoConfig(shots=10**6, seed=3))
        rec = res.reconstruction
        er = model().reorganization_energy
        assert abs(rec.reorganization_energy - er) <= 3 * rec.reorganization_stderr
        good = np.isfinite(rec.f)
        err = rec.f[good] - f_tau(res.model, res.taus_ps[good])
        ratio = np.sqrt(np.mean(err**2)) / np.sqrt(np.mean(rec.f_stderr[good] ** 2))
        assert 0.5 < ratio < 2.0
        assert res.temperature == pytest.approx(300.0, rel=0.05)


class TestThermometry:
    def test_round_trip(self):
        w, j = 8.0, 2.56
        fw = f_tilde([w], [j], 300.0)[0]
        assert thermometry(w, fw, j) == pytest.approx(300.0, rel=1e-8)

    @given(st.floats(1.01, 50), st.floats(0.01, 0.5))
    @settings(max_examples=30, deadline=None)
    def test_monotone(self, scale, step):
        w, j = 8.0, 2.56
        base = j / w**2 * scale
        try:
            t1 = thermometry(w, base, j)
            t2 = thermometry(w, base * (1 + step), j)
        except ThermometryError:
            return
        assert t2 > t1

    def test_refused(self):
        with pytest.raises(ThermometryError):
            thermometry(8.0, 0.0, 1.0)
        with pytest.raises(ThermometryError):
            thermometry(8.0, 0.5 / 64, 1.0)

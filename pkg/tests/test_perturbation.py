import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biasprobe.dynamics import DysonExpansion, run_sweep
from biasprobe.estimation import fit_oscillation
from biasprobe.model import CouplingBlocks, ProbePureState, ProbeSystemModel, random_model
from biasprobe.perturbation import (
    FUNCTION_NAMES,
    NearControlStateWarning,
    classify_leading_order,
    correlations,
    expansion_functions,
    leading_series_scale,
    oscillation_model,
    perturbative_probability,
    transfer_weight,
)
from conftest import random_complex, random_hermitian, seeds

PI0 = ProbePureState.control(0)
PI1 = ProbePureState.control(1)
PLUS = ProbePureState.bloch(np.pi / 2, 0.0)


def blocks_for(seed=0, dim=3):
    m = random_model(np.random.default_rng(seed), dim)
    return m.blocks, m.rho_s


def expm_h(a, tau):
    """e^{iAτ} by eigendecomposition of a plain numpy array."""
    vals, vecs = np.linalg.eigh(a)
    return (vecs * np.exp(1j * vals * tau)) @ vecs.conj().T


class TestExpansionFunctions:
    def test_tau_zero(self):
        blk, rho = blocks_for()
        f = expansion_functions(blk, rho, 37.0, 0.0)
        assert f.zeta0 == pytest.approx(1.0)
        for name in ("zeta1", "xi1_0", "xi1_1", "xi2_0", "xi2_1"):
            # The second-order functions vanish too, so that p(τ=0) = q.
            assert abs(getattr(f, name)) < 1e-14

    def test_no_flip_coupling(self):
        blk, rho = blocks_for()
        zero_b = CouplingBlocks(blk.a0, blk.a1, np.zeros((3, 3), complex))
        f = expansion_functions(zero_b, rho, 20.0, 1.3)
        g = expansion_functions(blk, rho, 20.0, 1.3)
        for name in ("zeta1", "xi1_0", "xi1_1", "xi2_0", "xi2_1"):
            assert getattr(f, name) == 0
        assert f.zeta0 == pytest.approx(g.zeta0)

    def test_equal_diagonal_blocks(self, rng):
        a = random_hermitian(rng, 3)
        blk = CouplingBlocks.from_arrays(a, a, random_complex(rng, (3, 3)))
        rho = np.eye(3) / 3
        f = expansion_functions(blk, rho, 12.0, 0.8)
        assert f.zeta0 == pytest.approx(np.exp(1j * 12.0 * 0.8), abs=1e-14)

    def test_direct_formulas(self):
        blk, rho = blocks_for(4)
        lam, tau = 17.0, 0.6
        a0, a1, b = blk.a0.matrix, blk.a1.matrix, blk.b
        bd = b.conj().T
        u0, u1 = expm_h(a0, tau), expm_h(a1, tau)  # e^{iA τ}
        ev = lambda m: np.trace(m @ rho)
        ph = np.exp(1j * lam * tau)
        f = expansion_functions(blk, rho, lam, tau)
        assert f.zeta0 == pytest.approx(ph * ev(u0 @ u1.conj().T))
        assert f.zeta1 == pytest.approx(ev(b) - ph * ev(u0 @ b @ u1.conj().T))
        xi2 = 0.5 * ev(b @ bd) + 0.5 * ev(u0 @ b @ bd @ u0.conj().T) - ph * ev(u0 @ b @ u1.conj().T @ bd)
        assert f.xi2_0 == pytest.approx(xi2)

    @given(seeds, st.floats(1, 100), st.floats(1, 100), st.floats(0, 5))
    @settings(max_examples=30, deadline=None)
    def test_lambda_factorisation(self, seed, l1, l2, tau):
        blk, rho = blocks_for(seed % 1000, 2)
        f1 = expansion_functions(blk, rho, l1, tau)
        f2 = expansion_functions(blk, rho, l2, tau)
        for name in FUNCTION_NAMES:
            assert f1.at(l2).as_dict()[name] == pytest.approx(f2.as_dict()[name], abs=1e-12)
            # Magnitudes of the oscillating parts do not depend on λ.
        assert np.allclose(np.abs(f1.osc), np.abs(f2.osc))

    def test_negative_tau(self):
        blk, rho = blocks_for()
        with pytest.raises(ValueError):
            expansion_functions(blk, rho, 1.0, -1.0)


class TestProbability:
    @pytest.mark.parametrize("lam,tau", [(3.0, 0.4), (40.0, 2.5)])
    def test_free_precession(self, lam, tau):
        blk = CouplingBlocks.from_arrays(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
        p = perturbative_probability(blk, np.eye(2) / 2, PLUS, PLUS, lam, tau, 0)
        assert p == pytest.approx(np.cos(lam * tau / 2) ** 2, abs=1e-14)

    def test_matches_dyson_second_order(self):
        blk, rho = blocks_for(2, 2)
        for lam in (5000.0, 7300.0):
            dy = DysonExpansion(blk, rho, PI0, PI1, lam, 1.1).partial_sum(2)
            assert perturbative_probability(blk, rho, PI0, PI1, lam, 1.1, 2) == pytest.approx(dy, abs=1e-9)

    def test_general_states_fall_back(self):
        blk, rho = blocks_for(2, 2)
        with pytest.warns(UserWarning):
            p = perturbative_probability(blk, rho, PLUS, PLUS, 100.0, 1.0, 2)
        assert p == perturbative_probability(blk, rho, PLUS, PLUS, 100.0, 1.0, 0)
        dy = perturbative_probability(blk, rho, PLUS, PLUS, 100.0, 1.0, 1, dyson_fallback=True)
        assert dy == pytest.approx(DysonExpansion(blk, rho, PLUS, PLUS, 100.0, 1.0).partial_sum(2))

    def test_transfer_weight(self):
        assert transfer_weight(PI0, PI0) == 1 and transfer_weight(PI0, PI1) == 0
        assert transfer_weight(PLUS, PLUS) == pytest.approx(0.5)


class TestClassification:
    def test_general(self):
        blk, rho = blocks_for()
        f = expansion_functions(blk, rho, 50.0, 0.7)
        cls = classify_leading_order(PLUS, PLUS)
        assert (cls.order, cls.case) == (0, "general")
        assert cls.x_value(f) == pytest.approx(f.zeta0 / 4)

    def test_prep_control(self):
        blk, rho = blocks_for()
        f = expansion_functions(blk, rho, 50.0, 0.7)
        beta = ProbePureState.bloch(1.1, 0.4)
        cls = classify_leading_order(PI0, beta)
        assert (cls.order, cls.case, cls.prep_index) == (1, "prep-control", 0)
        assert cls.x_value(f) == pytest.approx(np.conj(beta.a0) * beta.a1 * f.xi1_0 / 50.0)

    def test_both_control(self):
        blk, rho = blocks_for()
        f = expansion_functions(blk, rho, 50.0, 0.7)
        cls = classify_leading_order(PI1, PI0)
        assert (cls.order, cls.case) == (2, "both-control")
        assert cls.x_value(f) == pytest.approx(f.xi2_1 / 50.0**2)
        assert classify_leading_order(PI0, PI1).x_value(f) == pytest.approx(f.xi2_0 / 50.0**2)

    def test_exhaustive(self):
        cases = {
            classify_leading_order(a, b).case
            for a in (PI0, PI1, PLUS)
            for b in (PI0, PI1, PLUS)
        }
        assert cases == {"general", "prep-control", "meas-control", "both-control"}

    def test_equator_flag(self):
        assert classify_leading_order(PI0, PLUS).sigma_beta_vanishes
        assert not classify_leading_order(PI0, PI1).sigma_beta_vanishes

    def test_near_member_warns(self):
        near = ProbePureState.bloch(1e-4, 0.0)
        with pytest.warns(NearControlStateWarning):
            classify_leading_order(near, PI1)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            classify_leading_order(PI0, PI1)

    def test_series_scale(self):
        assert leading_series_scale(classify_leading_order(PI0, PI1)) == ("row6", -1)
        assert leading_series_scale(classify_leading_order(PLUS, PLUS))[0] == "row1"
        with pytest.raises(ValueError):
            leading_series_scale(classify_leading_order(PI0, PI0).__class__(2, "x", 0, 0, (0,) * 6))


class TestOscillationModel:
    def test_equal_blocks_order_zero(self, rng):
        a = random_hermitian(rng, 2)
        blk = CouplingBlocks.from_arrays(a, a, random_complex(rng, (2, 2)))
        alpha = ProbePureState.bloch(0.7, 0.3)
        beta = ProbePureState.bloch(2.0, 1.9)
        cls = classify_leading_order(alpha, beta)
        pred = oscillation_model(cls, expansion_functions(blk, np.eye(2) / 2, 10.0, 1.0))
        coeff = alpha.a0 * np.conj(alpha.a1) * np.conj(beta.a0) * beta.a1
        assert pred.eta == pytest.approx(0, abs=1e-15)
        assert pred.D == pytest.approx(2 * abs(coeff))
        assert pred.phi == pytest.approx(np.angle(coeff))

    def test_matches_noise_free_fit(self):
        m = random_model(np.random.default_rng(8), 2)
        tau = 0.9
        lams = 8000 + np.linspace(0, 2 * 2 * np.pi / tau, 60)
        p = run_sweep(m, PI0, PI1, lams, [tau]).p_exact[:, 0]
        fit = fit_oscillation(lams, p, tau, envelope_order=2)
        pred = oscillation_model(classify_leading_order(PI0, PI1), expansion_functions(m.blocks, m.rho_s, 8000, tau))
        assert fit.eta == pytest.approx(pred.eta, rel=1e-3)
        assert fit.D == pytest.approx(pred.D, rel=1e-3)
        assert fit.phi == pytest.approx(pred.phi, abs=1e-3)

    def test_eta_flat_for_diagonal_state(self, rng):
        e = np.array([0.0, 0.7, 1.9])
        a = np.diag(e)
        blk = CouplingBlocks.from_arrays(a, a, random_complex(rng, (3, 3)))
        cls = classify_leading_order(PI0, ProbePureState.bloch(1.0, 0.2))
        taus = np.linspace(0.1, 5, 20)
        rho = np.diag([0.5, 0.3, 0.2]).astype(complex)
        etas = [oscillation_model(cls, expansion_functions(blk, rho, 30.0, t)).eta for t in taus]
        assert np.ptp(etas) <= 1e-10
        rho[0, 1] = rho[1, 0] = 0.1
        etas = [oscillation_model(cls, expansion_functions(blk, rho, 30.0, t)).eta for t in taus]
        assert np.ptp(etas) > 1e-3


def test_correlations_rows():
    blk, rho = blocks_for(1)
    c = correlations(blk, rho, 0.0)
    assert c.row1 == pytest.approx(1)
    assert c.row6 == pytest.approx(c.bbd) and c.row7 == pytest.approx(c.bdb)
    assert c.row(6) == c.row6

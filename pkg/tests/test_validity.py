import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biasprobe.model import CouplingBlocks, random_model
from biasprobe.validity import (
    kappa_matrix,
    minimum_valid_lambda,
    resonant_coupling_weight,
    validity_report,
)
from conftest import seeds


def resonant_blocks():
    # ⟨0₀|B|1₁⟩ links E₀⁰ = 0 with E₁¹ = 3, a gap of 3.
    a0 = np.diag([0.0, 1.0])
    a1 = np.diag([0.5, 3.0])
    b = np.array([[0.0, 0.2], [0.0, 0.0]])
    return CouplingBlocks.from_arrays(a0, a1, b)


class TestKappa:
    def test_two_level(self):
        k = kappa_matrix([0.3, 1.1], 5.0)
        assert k[0, 1] == pytest.approx(1 / 0.8)
        assert k[0, 0] == 5.0

    def test_degenerate_branch_is_tau(self):
        k = kappa_matrix([2.0, 2.0, 3.0], 7.25)
        assert k[0, 1] == 7.25 and k[1, 0] == 7.25 and k[2, 2] == 7.25

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.floats(0, 100))
    @settings(max_examples=40, deadline=None)
    def test_symmetric_positive(self, e, tau):
        k = kappa_matrix(e, tau)
        assert np.array_equal(k, k.T) and np.all(k >= 0)


class TestReport:
    def test_no_flip_coupling_passes(self):
        blk = CouplingBlocks.from_arrays(np.diag([0.0, 1.0]), np.diag([2.0, 0.0]), np.zeros((2, 2)))
        for order in (0, 1, 2):
            rep = validity_report(blk, np.eye(2) / 2, 5.0, 3.0, order)
            assert rep.passed
            assert all(np.isinf(c.ratio) for c in rep.constraints)

    def test_resonance_flagged(self):
        rep = validity_report(resonant_blocks(), np.eye(2) / 2, 3.0, 1.0, 2)
        assert not rep.passed
        assert [(r.j0, r.k1) for r in rep.resonances] == [(0, 1)]
        assert rep.resonances[0].gap == pytest.approx(3.0)
        off = validity_report(resonant_blocks(), np.eye(2) / 2, 3.5, 1.0, 2)
        assert not off.resonances

    def test_unreachable_pair_ignored(self):
        # Population only in 2₀ and 2₁, which B does not touch.
        blk = CouplingBlocks.from_arrays(
            np.diag([0.0, 1.0, 5.0]), np.diag([0.5, 3.0, 6.0]), np.pad(resonant_blocks().b, ((0, 1), (0, 1)))
        )
        rho = np.diag([0.0, 0.0, 1.0]).astype(complex)
        rep = validity_report(blk, rho, 3.0, 1.0, 2)
        assert not rep.resonances and rep.max_coupling == 0.0

    def test_ratios_and_margin(self):
        m = random_model(np.random.default_rng(3), 2)
        rep = validity_report(m.blocks, m.rho_s, 100.0, 2.0, 2)
        for c in rep.constraints:
            assert c.ratio == pytest.approx(c.lhs / c.rhs)
            assert c.passed == (c.ratio >= 10)
        d = rep.to_dict()
        assert d["passed"] == rep.passed and len(d["constraints"]) == len(rep.constraints)

    def test_bad_order(self):
        m = random_model(np.random.default_rng(3), 2)
        with pytest.raises(ValueError):
            validity_report(m.blocks, m.rho_s, 1.0, 1.0, 3)

    @given(seeds, st.sampled_from([0, 2]), st.floats(0.1, 10))
    @settings(max_examples=20, deadline=None)
    def test_minimum_lambda_threshold(self, seed, order, tau):
        m = random_model(np.random.default_rng(seed), 2)
        lam = minimum_valid_lambda(m.blocks, m.rho_s, tau, order)
        above = validity_report(m.blocks, m.rho_s, lam * 1.001, tau, order)
        below = validity_report(m.blocks, m.rho_s, lam * 0.99, tau, order)
        dependent = [c for c in above.constraints if c.lhs == pytest.approx(lam * 1.001)]
        assert all(c.passed for c in dependent)
        assert not all(c.passed for c in below.constraints if c.lhs == pytest.approx(lam * 0.99))


def test_resonant_coupling_weight():
    blk = resonant_blocks()
    assert resonant_coupling_weight(blk, 3.0, 0.01) == pytest.approx(0.2)
    assert resonant_coupling_weight(blk, 2.0, 0.01) == 0.0

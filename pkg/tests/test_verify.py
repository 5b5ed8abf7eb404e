from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from imcmc import corpus
from imcmc.core import FunctionKernel, Kernel, make_rng, mix
from imcmc.kernels_classic import MHKernel, discrete_proposal, uniform_proposal
from imcmc.verify import (
    CheckReport,
    EnumeratedSpace,
    TransitionMatrix,
    UnsupportedError,
    autocorrelation,
    check_detailed_balance,
    check_invariance,
    check_row_stochastic,
    check_skew_db,
    chi2_deciles,
    chi2_stationarity,
    enumerate_kernel,
    ess_autocorr,
    moment_check,
    monte_carlo_kernel,
)

PI = np.array([1.0, 2.0, 3.0])
SPACE = EnumeratedSpace([0, 1, 2], PI)


def _mh():
    return MHKernel(lambda z: math.log(PI[z]), uniform_proposal(range(3)))


class TestEnumeration:
    def test_identity_kernel(self):
        tm = enumerate_kernel(FunctionKernel(lambda s: s), SPACE)
        assert np.array_equal(tm.P, np.eye(3))

    def test_three_state_mh_by_hand(self):
        P = enumerate_kernel(_mh(), SPACE).P
        # uniform proposal over all three states, Metropolis acceptance
        expect = np.array([
            [1 / 3, 1 / 3, 1 / 3],
            [1 / 6, 1 / 2, 1 / 3],
            [1 / 9, 2 / 9, 2 / 3],
        ])
        assert np.allclose(P, expect, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 1.0))
    def test_mixture_linearity(self, w):
        a = _mh()
        b = MHKernel(lambda z: math.log(PI[z]), discrete_proposal(corpus.Q3))
        Pa = enumerate_kernel(a, SPACE).P
        Pb = enumerate_kernel(b, SPACE).P
        Pm = enumerate_kernel(mix([a, b], [w, 1 - w]), SPACE).P
        assert np.max(np.abs(Pm - (w * Pa + (1 - w) * Pb))) <= 1e-14

    def test_unsupported_kernel(self):
        class Opaque(Kernel):
            def step(self, rng, state):
                raise NotImplementedError

        with pytest.raises(UnsupportedError):
            enumerate_kernel(Opaque(), SPACE)

    def test_transition_leaving_space(self):
        with pytest.raises(KeyError):
            enumerate_kernel(FunctionKernel(lambda s: s + 5), SPACE)
        tm = enumerate_kernel(FunctionKernel(lambda s: s + 5), SPACE, strict=False)
        assert not check_row_stochastic(tm).passed

    def test_space_validation(self):
        with pytest.raises(ValueError):
            EnumeratedSpace([0, 0], [1.0, 1.0])
        with pytest.raises(ValueError):
            EnumeratedSpace([0, 1], [0.0, 0.0])
        with pytest.raises(ValueError):
            EnumeratedSpace([0, 1], [1.0])

    def test_from_log_density(self):
        sp = EnumeratedSpace.from_log_density([0, 1, 2], lambda z: math.log(PI[z]))
        assert np.allclose(sp.pi, PI / PI.sum())


def _grw_tm():
    kern, space = corpus.CORPUS["grw"].build()
    return enumerate_kernel(kern, space)


class TestBalanceChecks:
    def test_mh_detailed_balance(self):
        tm = enumerate_kernel(_mh(), SPACE)
        assert check_detailed_balance(tm, None, 1e-12).passed
        assert check_invariance(tm, None, 1e-12).passed

    def test_grw_skew_but_not_reversible(self):
        tm = _grw_tm()
        assert not check_detailed_balance(tm, None, 1e-12).passed
        assert check_skew_db(tm, None, corpus.velocity_flip, 1e-12).passed
        assert check_invariance(tm, None, 1e-12).passed

    def test_identity_sigma_reduces_to_db(self):
        tm = enumerate_kernel(_mh(), SPACE)
        skew = check_skew_db(tm, None, [0, 1, 2], 1e-12)
        db = check_detailed_balance(tm, None, 1e-12)
        assert skew.passed and skew.max_violation == pytest.approx(db.max_violation, abs=1e-17)
        grw = _grw_tm()
        n = len(grw.space)
        assert not check_skew_db(grw, None, list(range(n)), 1e-12).passed

    def test_zero_tolerance_fails_on_rounding(self):
        kern, space = corpus.CORPUS["mh"].build()
        tm = enumerate_kernel(kern, space)
        rep = check_detailed_balance(tm, None, 0.0)
        assert 0.0 < rep.max_violation < 1e-15
        assert not rep.passed
        assert check_detailed_balance(tm, None, 1e-12).passed

    def test_sigma_not_involution(self):
        tm = enumerate_kernel(_mh(), SPACE)
        rep = check_skew_db(tm, None, [1, 2, 0])
        assert not rep.passed and "sigma_not_involution" in rep.check

    def test_pi_not_sigma_invariant(self):
        tm = enumerate_kernel(_mh(), SPACE)
        rep = check_skew_db(tm, None, [1, 0, 2])
        assert not rep.passed and "pi_not_sigma_invariant" in rep.check

    def test_raw_matrix_witness_indices(self):
        P = np.array([[0.0, 1.0], [0.0, 1.0]])
        rep = check_detailed_balance(P, [0.5, 0.5])
        assert not rep.passed and sorted(rep.witness) == [0, 1]

    def test_row_stochastic_detects_mass_loss(self):
        tm = TransitionMatrix(SPACE, np.array([[0.5, 0.4, 0.0], [0, 1, 0], [0, 0, 1.0]]))
        rep = check_row_stochastic(tm)
        assert not rep.passed and rep.witness == 0


class TestCorpus:
    @pytest.mark.parametrize("name", sorted(corpus.CORPUS))
    def test_declared_checks_pass(self, name):
        reports, n = corpus.run_instance(name)
        assert n > 0
        for rep in reports:
            assert rep.passed, rep.line()

    @pytest.mark.parametrize("name", sorted(n for n, i in corpus.CORPUS.items() if corpus.DB in i.checks))
    def test_detailed_balance_implies_invariance(self, name):
        kern, space = corpus.CORPUS[name].build()
        tm = enumerate_kernel(kern, space)
        assert check_detailed_balance(tm, None, 1e-12).passed
        assert check_invariance(tm, None, 1e-12).passed


class TestReports:
    def test_json_shape(self):
        rep = check_detailed_balance(enumerate_kernel(_mh(), SPACE), None, 1e-12)
        d = json.loads(rep.to_json())
        assert set(d) == {"check", "max_violation", "threshold", "pass", "witness"}
        assert d["pass"] is True and d["check"] == "detailed_balance"

    def test_tuple_witness_serializes(self):
        rep = CheckReport("x", 1.0, 0.0, False, [((0, 1), np.int64(2))])
        assert json.loads(rep.to_json())["witness"] == [[[0, 1], 2]]

    def test_line(self):
        rep = CheckReport("invariance", 2e-13, 1e-12, True)
        assert rep.line().startswith("PASS invariance")
        assert CheckReport("invariance", 1.0, 1e-12, False).line().startswith("FAIL")


class TestMonteCarlo:
    def test_matches_exact(self):
        exact = enumerate_kernel(_mh(), SPACE).P
        mc = monte_carlo_kernel(_mh(), SPACE, make_rng(0), 20_000)
        assert mc.provenance == "monte_carlo"
        assert np.all(np.abs(mc.P - exact) <= 5 * mc.se + 1e-3)


class TestStatistics:
    def test_iid_ess(self):
        x = make_rng(1).standard_normal(20_000)
        ess = ess_autocorr(x)["ess"]
        assert abs(ess - x.size) / x.size < 0.1

    def test_ar1_ess(self):
        rng = make_rng(2)
        rho, n = 0.8, 50_000
        x = np.empty(n)
        x[0] = rng.standard_normal()
        for t in range(1, n):
            x[t] = rho * x[t - 1] + math.sqrt(1 - rho ** 2) * rng.standard_normal()
        tau = (1 + rho) / (1 - rho)
        assert ess_autocorr(x)["tau"] == pytest.approx(tau, rel=0.15)

    def test_constant_series_degenerate(self, caplog):
        out = ess_autocorr(np.ones(100))
        assert out["degenerate"] and math.isnan(out["ess"])
        assert any("degenerate" in r.message for r in caplog.records)

    def test_autocorrelation_lag0(self):
        acf = autocorrelation(make_rng(3).standard_normal(500))
        assert acf[0] == pytest.approx(1.0)

    def test_chi2_deciles_uniformity(self):
        x = make_rng(4).standard_normal(10_000)
        assert chi2_deciles(x, stats.norm.cdf) > 1e-3
        assert chi2_deciles(x + 0.3, stats.norm.cdf) < 1e-6

    def test_chi2_stationarity(self):
        rng = make_rng(5)
        p = PI / PI.sum()
        s = rng.choice(3, size=10_000, p=p)
        assert chi2_stationarity(s, PI) > 1e-3
        assert chi2_stationarity(rng.choice(3, size=10_000), PI) < 1e-6
        assert chi2_stationarity(["a", "b"], [1.0, 0.0], states=["a", "b"]) == 0.0

    def test_moment_check(self):
        x = make_rng(6).standard_normal((5_000, 2))
        assert moment_check(x)["pass"]
        assert not moment_check(x + 1.0)["pass"]

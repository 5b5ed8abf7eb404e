from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imcmc import corpus
from imcmc.core import DensityError, make_rng
from imcmc.delayed_rejection import (
    BouncyKernel,
    DeterministicDRKernel,
    DrLadder,
    DrStage,
    EventChainKernel,
    ExtraChanceKernel,
    OrbitDRKernel,
    ParticleConfig,
    StochasticDRKernel,
    Torus,
    collision_set,
    extra_chance_beta,
    extra_chance_r,
    feasible,
    generalized_inverse,
    radii_matrix,
    reverse_involution,
    slice_log_target,
    soft_potential_slice,
)
from imcmc.kernels_classic import MHKernel, discrete_proposal
from imcmc.kernels_nonrev import ReversibleMap
from imcmc.verify import (
    EnumeratedSpace,
    check_detailed_balance,
    check_invariance,
    check_row_stochastic,
    enumerate_kernel,
)

NEG_INF = -math.inf


def _law(transitions):
    out: dict = {}
    for s, p in transitions:
        out[s] = out.get(s, 0.0) + p
    return out


def _stage(Q, anchor=-1, phi=reverse_involution):
    q = discrete_proposal(Q)
    return DrStage(
        lambda rng, Z: q.sample(rng, Z[anchor]),
        lambda Z, z: q.log_density(Z[anchor], z),
        phi,
        lambda Z: q.enumerate(Z[anchor]),
    )


PI = np.array([0.2, 0.5, 0.3])
Q = np.array([[0.2, 0.5, 0.3], [0.4, 0.2, 0.4], [0.1, 0.6, 0.3]])
Q2 = np.array([[0.5, 0.25, 0.25], [0.3, 0.3, 0.4], [0.6, 0.2, 0.2]])
LOG_PI = lambda z: math.log(PI[z])


class TestStochasticDR:
    def test_single_stage_is_mh(self):
        dr = StochasticDRKernel(DrLadder([_stage(Q)]), LOG_PI)
        mh = MHKernel(LOG_PI, discrete_proposal(Q))
        for z in range(3):
            a, b = _law(dr.transitions(z)), _law(mh.transitions(z))
            for s in range(3):
                assert a.get(s, 0.0) == pytest.approx(b.get(s, 0.0), abs=1e-14)

    def test_reversal_involution(self):
        Z = (0, 2, 1)
        assert reverse_involution(Z) == (1, 2, 0)
        assert reverse_involution(reverse_involution(Z)) == Z

    def test_two_stage_exact_reversibility(self):
        dr = StochasticDRKernel(DrLadder([_stage(Q), _stage(Q2, anchor=0)]), LOG_PI)
        tm = enumerate_kernel(dr, EnumeratedSpace([0, 1, 2], PI))
        assert check_row_stochastic(tm, 1e-12).passed
        assert check_detailed_balance(tm, None, 1e-12).passed
        assert check_invariance(tm, None, 1e-12).passed

    def test_second_stage_used(self):
        dr = StochasticDRKernel(DrLadder([_stage(Q), _stage(Q2, anchor=0)]), LOG_PI)
        single = StochasticDRKernel(DrLadder([_stage(Q)]), LOG_PI)
        # from the mode, stage 1 rejects often and stage 2 adds moves
        assert _law(dr.transitions(1))[1] < _law(single.transitions(1))[1]

    def test_unterminated_ladder_rejects(self):
        lp = lambda z: 0.0 if z == 0 else NEG_INF
        dr = StochasticDRKernel(DrLadder([_stage(Q), _stage(Q2, anchor=0)]), lp)
        # Q[0, 0] > 0, so only the self-proposal passes; every other path rejects
        rng = make_rng(0)
        for _ in range(20):
            assert dr.step(rng, 0).state == 0

    def test_zero_density_start(self):
        dr = StochasticDRKernel(DrLadder([_stage(Q)]), lambda z: NEG_INF)
        with pytest.raises(DensityError):
            dr.step(make_rng(1), 0)

    def test_empty_ladder(self):
        with pytest.raises(ValueError):
            DrLadder([])


class TestDeterministicDR:
    def test_n2_is_deterministic_mh(self):
        pi = [1.0, 3.0]
        kern = DeterministicDRKernel([lambda z: 1 - z, lambda z: z], lambda z: math.log(pi[z]))
        assert _law(kern.transitions(0))[1] == pytest.approx(1.0)
        assert _law(kern.transitions(1))[0] == pytest.approx(1.0 / 3.0)

    def test_barrier_crossing(self):
        lpi, psi, sig, space = corpus._barrier_parts()
        phis = [lambda s: sig(psi(s)), lambda s: sig(psi(psi(s))), lambda s: s]
        kern = DeterministicDRKernel(phis, lpi)
        z = (0, 1)
        assert kern.alpha(1, z) == 0.0
        assert kern.alpha(2, z) > 0.0
        assert kern.alpha(2, z) == pytest.approx(1.0)
        # the standard two-stage kernel never crosses
        std = DeterministicDRKernel([phis[0], phis[2]], lpi)
        assert _law(std.transitions(z)) == {z: 1.0}
        tm = enumerate_kernel(kern, space)
        assert check_detailed_balance(tm, None, 1e-12).passed
        assert tm.P[space.index[z], space.index[(2, -1)]] > 0

    def test_evaluation_counter(self):
        lpi, psi, sig, _ = corpus._barrier_parts()
        kern = DeterministicDRKernel([lambda s: sig(psi(s)), lambda s: s], lpi)
        kern.step(make_rng(2), (0, 1))
        assert kern.evaluations >= 2


def _lattice_rmap():
    return ReversibleMap(corpus._lat_psi, corpus._lat_sigma)


def _lattice_lp(s):
    return corpus._lat_log_gamma(s[0])


def _orbit_phis(rmap, n):
    phis = []
    for k in range(1, n):
        def phi(z, k=k):
            for _ in range(k):
                z = rmap.psi(z)
            return rmap.sigma(z)
        phis.append(phi)
    phis.append(lambda z: z)
    return phis


class TestOrbitDR:
    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_matches_generic_recursion(self, n):
        rmap = _lattice_rmap()
        orbit = OrbitDRKernel(rmap, _lattice_lp, n)
        naive = DeterministicDRKernel(_orbit_phis(rmap, n), _lattice_lp)
        for s in corpus._lattice_space().states:
            a, b = _law(orbit.transitions(s)), _law(naive.transitions(s))
            assert a.keys() == b.keys()
            for key in a:
                assert a[key] == pytest.approx(b[key], abs=1e-14)

    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_evaluations_bounded(self, n):
        rmap = _lattice_rmap()
        kern = OrbitDRKernel(rmap, _lattice_lp, n)
        rng = make_rng(3)
        states = corpus._lattice_space().states
        for _ in range(300):
            res = kern.step(rng, states[int(rng.integers(len(states)))])
            assert res.info["evaluations"] <= n + 1

    def test_invariance(self):
        kern = OrbitDRKernel(_lattice_rmap(), _lattice_lp, 4)
        tm = enumerate_kernel(kern, corpus._lattice_space())
        assert check_row_stochastic(tm, 1e-12).passed
        assert check_detailed_balance(tm, None, 1e-12).passed

    def test_needs_volume_preserving(self):
        rm = ReversibleMap(corpus._lat_psi, corpus._lat_sigma, log_jacobian=lambda z: 0.1)
        with pytest.raises(ValueError):
            OrbitDRKernel(rm, _lattice_lp, 3)


class TestExtraChance:
    def test_n2_is_deterministic_mh(self):
        rmap = _lattice_rmap()
        kern = ExtraChanceKernel(rmap, _lattice_lp, 2)
        phi = rmap.phi()
        for s in corpus._lattice_space().states[:20]:
            p = min(1.0, math.exp(_lattice_lp(phi(s)) - _lattice_lp(s)))
            law = _law(kern.transitions(s))
            assert law.get(phi(s), 0.0) == pytest.approx(p, abs=1e-14)

    def test_closed_forms_match_generic_recursion(self):
        rmap = _lattice_rmap()
        n = 4
        ec = ExtraChanceKernel(rmap, _lattice_lp, n)
        phis = ec.phis()
        states = corpus._lattice_space().states
        rng = make_rng(4)
        for _ in range(100_000 // n):
            z = states[int(rng.integers(len(states)))]
            lw_z = _lattice_lp(z)
            log_u = lw_z + math.log(rng.random())
            lw_phis = [_lattice_lp(f(z)) for f in phis]
            generic = DeterministicDRKernel(phis, slice_log_target(_lattice_lp, log_u))
            for k in range(1, n + 1):
                assert bool(generic.alpha(k, z)) == extra_chance_r(k, lw_z, lw_phis, log_u)
                assert bool(generic.beta(k, z)) == extra_chance_beta(k, lw_z, lw_phis, log_u)

    def test_oscillating_energy(self):
        w = [1.0, 0.1, 0.9, 0.5, 0.5, 0.5]
        lp = lambda s: math.log(w[s[0]])
        rm = ReversibleMap(lambda s: ((s[0] + s[1]) % 6, s[1]), lambda s: (s[0], -s[1]))
        kern = ExtraChanceKernel(rm, lp, 3)
        z = (0, 1)
        lws = [math.log(0.1), math.log(0.9), 0.0]
        assert not extra_chance_r(1, 0.0, lws, math.log(0.5))
        assert extra_chance_r(2, 0.0, lws, math.log(0.5))
        law = _law(kern.transitions(z))
        assert law[(1, -1)] == pytest.approx(0.1)
        assert law[(2, -1)] == pytest.approx(0.8)
        assert law[z] == pytest.approx(0.1)

    def test_sampler_matches_transitions(self):
        kern = ExtraChanceKernel(_lattice_rmap(), _lattice_lp, 3)
        z = corpus._lattice_space().states[7]
        rng = make_rng(5)
        n = 40_000
        counts: dict = {}
        for _ in range(n):
            s = kern.step(rng, z).state
            counts[s] = counts.get(s, 0) + 1
        for s, p in _law(kern.transitions(z)).items():
            assert abs(counts.get(s, 0) / n - p) < 5 * math.sqrt(p * (1 - p) / n) + 1e-9

    def test_invariance(self):
        kern, space = corpus._extra_chance()
        tm = enumerate_kernel(kern, space)
        assert check_detailed_balance(tm, None, 1e-12).passed

    def test_zero_density(self):
        kern = ExtraChanceKernel(_lattice_rmap(), lambda s: NEG_INF, 3)
        with pytest.raises(DensityError):
            kern.step(make_rng(6), ((0, 0), (1, 0)))


def _bouncy(variant):
    return BouncyKernel(variant, corpus._lat_psi, corpus._lat_sigma, corpus._lat_bounce,
                        corpus._lat_log_gamma, lambda v: 0.0)


class TestBouncy:
    def test_variant_one_reuses_bounce(self):
        kern = _bouncy("I")
        phi1, phi2 = kern.phis
        for s in corpus._lattice_space().states:
            assert phi1(phi2(s)) == corpus._lat_bounce(phi1(s))
            assert phi2(phi2(s)) == s

    def test_variant_one_stage_one_ratio(self):
        # r1 o phi2 = gamma(x + v) / gamma(x + v + b_v(x + v, -v)), which is r1 only when
        # gamma(phi2 z) = gamma(x)
        kern = _bouncy("I")
        phi1, phi2 = kern.phis
        g = corpus._lat_log_gamma
        differs = 0
        for s in corpus._lattice_space().states:
            p2 = phi2(s)
            r1_phi2 = kern.log_ratio(1, p2)
            assert r1_phi2 == pytest.approx(g(phi1(s)[0]) - g(p2[0]), abs=1e-14)
            differs += abs(r1_phi2 - kern.log_ratio(1, s)) > 1e-9
        assert differs > 0

    def test_variant_two_stage_one_ratio(self):
        kern = _bouncy("II")
        b = corpus._lat_bounce
        g = corpus._lat_log_gamma
        for s in corpus._lattice_space().states:
            x, _ = s
            bv = b(s)[1]
            target = ((x[0] + bv[0]) % corpus._L, (x[1] + bv[1]) % corpus._L)
            assert kern.log_ratio(1, b(s)) == pytest.approx(g(target) - g(x), abs=1e-14)

    @pytest.mark.parametrize("variant", ["I", "II"])
    def test_lattice_invariance(self, variant):
        tm = enumerate_kernel(_bouncy(variant), corpus._lattice_space())
        assert check_row_stochastic(tm, 1e-12).passed
        assert check_detailed_balance(tm, None, 1e-12).passed
        assert check_invariance(tm, None, 1e-12).passed

    def test_bad_variant(self):
        with pytest.raises(ValueError):
            _bouncy("III")


TORUS = Torus(10.0, 2)


class TestEventChain:
    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), min_size=2, max_size=5),
           st.tuples(st.floats(-2, 2), st.floats(-2, 2)), st.floats(0.1, 2.0))
    def test_collision_symmetry(self, pts, v, delta):
        D = radii_matrix(delta, len(pts))
        mv = tuple(-c for c in v)
        for i in range(len(pts)):
            for j in range(len(pts)):
                if i != j:
                    assert (j in collision_set(pts, v, i, D, TORUS)) == (i in collision_set(pts, mv, j, D, TORUS))

    def test_free_move(self):
        x = ((0.0, 0.0), (5.0, 5.0))
        kern = EventChainKernel(1.0, 2, TORUS)
        res = kern.step(make_rng(7), (x, (1.0, 0.0), 0))
        assert res.state == (((1.0, 0.0), (5.0, 5.0)), (1.0, 0.0), 0)
        assert res.log_ratio == 0.0 and res.info["stage"] == 1

    def test_pure_transfer(self):
        x = ((0.0, 0.0), (1.5, 0.0))
        kern = EventChainKernel(1.0, 2, TORUS)
        assert _law(kern.transitions((x, (1.0, 0.0), 0))) == {(x, (1.0, 0.0), 1): 1.0}

    def test_asymmetric_collision_sets(self):
        x = ((0.0, 0.0), (1.5, 0.0), (0.5, 0.95))
        D = radii_matrix(1.0, 3)
        v = (1.0, 0.0)
        assert feasible(x, D, TORUS)
        I = collision_set(x, v, 0, D, TORUS)
        I_rev = collision_set(x, (-1.0, 0.0), 1, D, TORUS)
        assert I == [1] and sorted(I_rev) == [0, 2]
        law = _law(EventChainKernel(1.0, 3, TORUS).transitions((x, v, 0)))
        assert law[(x, v, 1)] == pytest.approx(0.5)
        assert law[(x, (-1.0, 0.0), 0)] == pytest.approx(0.5)

    def test_infeasible(self):
        x = ((0.0, 0.0), (0.5, 0.0))
        with pytest.raises(ValueError):
            EventChainKernel(1.0, 2, TORUS).step(make_rng(8), (x, (1.0, 0.0), 0))

    def test_lattice_invariance_with_refresh(self):
        kern, space = corpus._event_chain("2d", refresh=True)()
        tm = enumerate_kernel(kern, space)
        assert check_row_stochastic(tm, 1e-12).passed
        assert check_invariance(tm, None, 1e-12).passed

    def test_snapshot_roundtrip(self):
        cfg = ParticleConfig(((0.0, 1.0), (2.0, 3.0)), (1.0, 0.0), 1, radii_matrix(0.5, 2), TORUS)
        rec = json.loads(cfg.snapshot(12))
        assert rec == {"positions": [[0.0, 1.0], [2.0, 3.0]], "velocity": [1.0, 0.0], "active": 1, "step": 12}

    def test_radii_validation(self):
        with pytest.raises(ValueError):
            radii_matrix(np.array([[0.0, 1.0], [2.0, 0.0]]), 2)
        with pytest.raises(ValueError):
            radii_matrix(-1.0, 2)


class TestSoftPotential:
    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 1.0))
    def test_identity(self, u):
        assert generalized_inverse(lambda y: y, u) == pytest.approx(u, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-6, 1.0))
    def test_piecewise_linear(self, u):
        # slope 2 on [0, 0.25], then slope 2/3 up to 1 at y = 1
        Gamma = lambda y: 2 * y if y <= 0.25 else 0.5 + (y - 0.25) * 2.0 / 3.0
        closed = u / 2 if u <= 0.5 else 0.25 + (u - 0.5) * 1.5
        assert generalized_inverse(Gamma, u) == pytest.approx(closed, abs=1e-12)

    def test_step_function_gives_hard_spheres(self):
        d0 = 0.7
        Gamma = lambda y: 1.0 if y >= d0 else 0.0
        x = ((0.0, 0.0), (2.0, 0.0), (0.0, 3.0))
        D = soft_potential_slice(Gamma, make_rng(9), x, TORUS)
        off = D[~np.eye(3, dtype=bool)]
        assert np.allclose(off, d0, atol=1e-12)
        assert np.allclose(D, D.T)

    def test_identity_slice_radii(self):
        x = ((0.0, 0.0), (0.4, 0.0))
        rng = make_rng(10)
        D = soft_potential_slice(lambda y: min(y, 1.0), rng, x, TORUS)
        u = make_rng(10).uniform(0.0, 0.4)
        assert D[0, 1] == pytest.approx(u, abs=1e-12)

    def test_unreachable(self):
        with pytest.raises(ValueError):
            generalized_inverse(lambda y: 0.0, 0.5)

"""Registry of small enumerable kernel instances.

Every instance builds a kernel together with a finite (extended) state
space and its target. The instances are shared by the ``verify``
subcommand and the test suite; each declares which exact checks apply.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .chain_proposals import (
    AdaptiveIMHKernel,
    CoincidingWindowKernel,
    NUTSKernel,
    ProportionalSelection,
    ReversibleTriplet,
    SliceKernel,
    StopRule,
    UniformSelection,
    WindowedKernel,
    ess_rule,
    sum_threshold_rule,
)
from .core import NEG_INF, CycleKernel, InvolutionMap, Kernel
from .delayed_rejection import (
    BouncyKernel,
    DeterministicDRKernel,
    DrLadder,
    DrStage,
    EventChainKernel,
    EventChainRefresh,
    ExtraChanceKernel,
    OrbitDRKernel,
    StochasticDRKernel,
    Torus,
    feasible,
    radii_matrix,
    reverse_involution,
)
from .kernels_classic import (
    MHKernel,
    OrderedOverrelaxationKernel,
    PenaltyKernel,
    RWMKernel,
    TemperingKernel,
    TwoPointNoise,
    discrete_proposal,
    uniform_proposal,
)
from .kernels_nonrev import ReversibleMap, grw_kernel, time_reversal_embedding, velocity_flip
from .multi_try import (
    MTMKernel,
    OneHitKernel,
    PseudoMarginalMTMKernel,
    StoppingTimeMTMKernel,
    WeightFunction,
    two_point_estimator,
)
from .verify import (
    CheckReport,
    EnumeratedSpace,
    check_detailed_balance,
    check_invariance,
    check_row_stochastic,
    check_skew_db,
    enumerate_kernel,
)

logger = logging.getLogger(__name__)

DB = "db"
SKEW = "skew"
INVARIANCE = "invariance"


@dataclass
class Instance:
    """One enumerable configuration.

    Attributes:
        name: Registry key.
        module: Library module the kernel comes from.
        build: ``() -> (kernel, space)``.
        checks: Exact checks that must pass (``db``, ``skew``, ``invariance``).
        sigma: Flip map for the skew check.
        note: One-line description.
    """

    name: str
    module: str
    build: Callable[[], tuple[Kernel, EnumeratedSpace]]
    checks: tuple[str, ...]
    sigma: Callable | None = None
    note: str = ""
    tags: tuple[str, ...] = field(default_factory=tuple)


# ---------------------------------------------------------------------------
# Shared small targets
# ---------------------------------------------------------------------------

PI3 = np.array([0.2, 0.5, 0.3])
PI5 = np.array([1.0, 2.0, 3.0, 1.5, 2.5])
Q3 = np.array([[0.2, 0.5, 0.3], [0.4, 0.2, 0.4], [0.1, 0.6, 0.3]])
Q3B = np.array([[0.5, 0.25, 0.25], [0.3, 0.3, 0.4], [0.6, 0.2, 0.2]])


def _log(w):
    return lambda z: math.log(w[z]) if w[z] > 0 else NEG_INF


def metropolis_matrix(p) -> np.ndarray:
    """Metropolis matrix for ``p`` with a uniform proposal over all other states."""
    p = np.asarray(p, dtype=float)
    n = len(p)
    P = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                P[i, j] = min(1.0, p[j] / p[i]) / (n - 1)
        P[i, i] = 1.0 - P[i].sum()
    return P


def _ring_triplet(n: int) -> ReversibleTriplet:
    return ReversibleTriplet.from_map(lambda z: (z + 1) % n, lambda z: (z - 1) % n)


def _nuts_g(k, states, log_w):
    return (sum(states) * 7 + k) % 5 == 0


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _mh():
    return MHKernel(_log(PI3), discrete_proposal(Q3)), EnumeratedSpace([0, 1, 2], PI3)


def _rwm():
    return (RWMKernel(_log(PI5), noise_enumerate=[(1, 0.5), (-1, 0.5)], move=lambda z, v: (z + v) % 5),
            EnumeratedSpace(list(range(5)), PI5))


def _tempering():
    pi = np.array([1.0, 2.0, 3.0, 4.0])
    pit = np.sqrt(pi)
    Q = discrete_proposal(metropolis_matrix(pi))
    Qt = discrete_proposal(metropolis_matrix(pit))
    g = lambda z: math.log(pit[z] / pit.sum()) - math.log(pi[z] / pi.sum())
    return TemperingKernel(Q, Qt, g), EnumeratedSpace(list(range(4)), pi)


def _penalty():
    pi = np.array([1.0, 3.0, 2.0, 4.0])
    omega = [2.0, 0.5, 0.5, 2.0]
    phi0 = InvolutionMap(lambda z: 3 - z, name="mirror")
    return PenaltyKernel(_log(pi), phi0, TwoPointNoise(lambda z: omega[z])), EnumeratedSpace(list(range(4)), pi)


def _overrelaxation():
    return (OrderedOverrelaxationKernel(_log(PI3), lambda rng, n: rng.choice(3, size=n, p=PI3), 2,
                                        support=[0, 1, 2]),
            EnumeratedSpace([0, 1, 2], PI3))


def _adaptive_imh():
    nu = [(0, 0.3), (1, 0.3), (2, 0.4)]
    k = AdaptiveIMHKernel(_log(PI3), lambda z: math.log(nu[z][1]), None, sum_threshold_rule(2.0, 3),
                          ProportionalSelection(), False, nu)
    return k, EnumeratedSpace([0, 1, 2], PI3)


def _adaptive_imh_ess():
    nu = [(0, 0.3), (1, 0.3), (2, 0.4)]
    k = AdaptiveIMHKernel(_log(PI3), lambda z: math.log(nu[z][1]), None, ess_rule(1.5, 3),
                          ProportionalSelection(), True, nu)
    return k, EnumeratedSpace([0, 1, 2], PI3)


def _windowed():
    rule = StopRule(lambda s, w: (sum(s) % 3) == 0, cap=4)
    return (WindowedKernel(_ring_triplet(5), _log(PI5), rule, ProportionalSelection()),
            EnumeratedSpace(list(range(5)), PI5))


def _coinciding():
    return (CoincidingWindowKernel(_ring_triplet(5), _log(PI5), 4, ProportionalSelection()),
            EnumeratedSpace(list(range(5)), PI5))


def _nuts():
    return (NUTSKernel(_ring_triplet(5), _log(PI5), _nuts_g, ProportionalSelection(), n_max=4),
            EnumeratedSpace(list(range(5)), PI5))


def _nuts_uniform():
    return (NUTSKernel(_ring_triplet(5), _log(PI5), _nuts_g, UniformSelection(), n_max=3, early_exit=False),
            EnumeratedSpace(list(range(5)), PI5))


def _mtm():
    return MTMKernel(_log(PI3), discrete_proposal(Q3), 2), EnumeratedSpace([0, 1, 2], PI3)


def _st_mtm():
    lp = _log(PI3)
    return (StoppingTimeMTMKernel(lp, discrete_proposal(Q3), WeightFunction.target(lp), 0.6, cap=3),
            EnumeratedSpace([0, 1, 2], PI3))


def _dr_stochastic():
    q1, q2 = discrete_proposal(Q3), discrete_proposal(Q3B)
    st1 = DrStage(lambda rng, Z: q1.sample(rng, Z[-1]), lambda Z, z: q1.log_density(Z[-1], z),
                  reverse_involution, lambda Z: q1.enumerate(Z[-1]))
    st2 = DrStage(lambda rng, Z: q2.sample(rng, Z[0]), lambda Z, z: q2.log_density(Z[0], z),
                  reverse_involution, lambda Z: q2.enumerate(Z[0]))
    return StochasticDRKernel(DrLadder([st1, st2]), _log(PI3)), EnumeratedSpace([0, 1, 2], PI3)


def _pm_mtm():
    est = two_point_estimator(lambda z: PI3[z] / 0.5, 0.5)
    states = [(z, w) for z in range(3) for w, _ in est.enumerate(z)]
    pz = [w * 0.5 / 3.0 for z, w in states]
    k = PseudoMarginalMTMKernel(lambda z: -math.log(3.0), discrete_proposal(Q3), est, 2)
    return k, EnumeratedSpace(states, pz)


def _one_hit():
    f = [0.3, 0.8, 0.5]
    return OneHitKernel(lambda z: 0.0, discrete_proposal(Q3), lambda z: f[z]), EnumeratedSpace([0, 1, 2], f)


# lattice pieces shared by the deterministic DR instances
_L = 5
_VELS = [(1, 0), (-1, 0), (0, 1), (0, -1)]
_GAMMA = np.random.default_rng(0).random((_L, _L)) + 0.1


def _lat_psi(z):
    (a, b), (u, v) = z
    return (((a + u) % _L, (b + v) % _L), (u, v))


def _lat_sigma(z):
    return (z[0], (-z[1][0], -z[1][1]))


def _lat_bounce(z):
    x, v = z
    n = (1, 0) if (x[0] + x[1]) % 2 == 0 else (0, 1)
    dot = v[0] * n[0] + v[1] * n[1]
    return (x, (v[0] - 2 * dot * n[0], v[1] - 2 * dot * n[1]))


def _lat_log_gamma(x):
    return math.log(_GAMMA[x])


def _lattice_space():
    states = [(x, v) for x in itertools.product(range(_L), repeat=2) for v in _VELS]
    return EnumeratedSpace(states, [_GAMMA[s[0]] for s in states])


def _bouncy(variant):
    def build():
        return BouncyKernel(variant, _lat_psi, _lat_sigma, _lat_bounce, _lat_log_gamma, lambda v: 0.0), _lattice_space()
    return build


def _extra_chance():
    rm = ReversibleMap(_lat_psi, _lat_sigma)
    return ExtraChanceKernel(rm, lambda s: _lat_log_gamma(s[0]), 3), _lattice_space()


# barrier on a 3-cycle with a zero-mass middle site: two steps jump it
_BARRIER = {0: 1.0, 1: 0.0, 2: 2.0}


def _barrier_parts():
    lpi = lambda s: math.log(_BARRIER[s[0]]) if _BARRIER[s[0]] > 0 else NEG_INF
    psi = lambda s: ((s[0] + s[1]) % 3, s[1])
    sig = lambda s: (s[0], -s[1])
    states = [(x, v) for x in range(3) for v in (-1, 1) if _BARRIER[x] > 0]
    return lpi, psi, sig, EnumeratedSpace(states, [_BARRIER[s[0]] for s in states])


def _dr_deterministic():
    lpi, psi, sig, space = _barrier_parts()
    phis = [lambda s: sig(psi(s)), lambda s: sig(psi(psi(s))), lambda s: s]
    return DeterministicDRKernel(phis, lpi), space


def _orbit_dr():
    lpi, psi, sig, space = _barrier_parts()
    return OrbitDRKernel(ReversibleMap(psi, sig), lpi, 3), space


def _slice():
    pi = np.array([1.0, 2.0, 2.0, 4.0, 1.0])
    lp = _log(pi)

    def inner(log_u):
        return MHKernel(lambda z: 0.0 if lp(z) >= log_u else NEG_INF, uniform_proposal(range(5)))

    return SliceKernel(lp, inner, [lp(z) for z in range(5)]), EnumeratedSpace(list(range(5)), pi)


def _grw():
    w = PI5
    states = [(x, v) for x in range(5) for v in (-1, 1)]
    k = grw_kernel(_log(w), move=lambda x, v: (x + v) % 5)
    return k, EnumeratedSpace(states, [w[x] for x, v in states])


# two 3-cycles as the non-involutive symmetry, psi0 swaps the cycles
_S0 = [1, 2, 0, 4, 5, 3]
_S0I = [2, 0, 1, 5, 3, 4]
_P0 = [3, 4, 5, 0, 1, 2]
_FANG_PI = [1.0, 1.0, 1.0, 2.0, 2.0, 2.0]


def _fang_embedding():
    return time_reversal_embedding(lambda z: _P0[z], lambda z: _P0.index(z), lambda z: _S0[z],
                                   lambda z: _S0I[z], _log(_FANG_PI), check_states=range(6))


def fang_sigma(zu):
    return _fang_embedding().sigma(zu)


def _fang():
    emb = _fang_embedding()
    states = [(z, u) for z in range(6) for u in (-1, 1)]
    return emb.kernel(), EnumeratedSpace(states, [_FANG_PI[z] for z, u in states])


def _fang_restricted():
    return _fang_embedding().restricted_kernel(), EnumeratedSpace(list(range(6)), _FANG_PI)


def event_chain_space(L: int, d: int, m: int, delta: float, vels):
    g = Torus(L, d, True)
    D = radii_matrix(delta, m)
    sites = list(itertools.product(range(L), repeat=d))
    states = [(x, v, i) for x in itertools.product(sites, repeat=m) if feasible(x, D, g)
              for v in vels for i in range(m)]
    return g, EnumeratedSpace(states, np.ones(len(states)))


def event_chain_sigma(s):
    return (s[0], tuple(-c for c in s[1]), s[2])


_EC = {"1d": (6, 1, 3, 1.0, [(1,), (-1,)]), "2d": (4, 2, 3, 1.5, [(0, 1), (0, -1)])}


def _event_chain(key, refresh=False):
    def build():
        L, d, m, delta, vels = _EC[key]
        g, space = event_chain_space(L, d, m, delta, vels)
        k = EventChainKernel(delta, m, g)
        if refresh:
            k = CycleKernel([EventChainRefresh(m, vels), k])
        return k, space
    return build


CORPUS: dict[str, Instance] = {}


def _register(*items: Instance) -> None:
    for it in items:
        CORPUS[it.name] = it


_register(
    Instance("mh", "kernels_classic", _mh, (DB, INVARIANCE), note="MH with a 3x3 proposal matrix"),
    Instance("rwm", "kernels_classic", _rwm, (DB, INVARIANCE), note="RWM on a 5-cycle"),
    Instance("tempering", "kernels_classic", _tempering, (DB, INVARIANCE), note="three-move tempering"),
    Instance("penalty", "kernels_classic", _penalty, (DB, INVARIANCE), note="penalty with two-point noise"),
    Instance("overrelaxation", "kernels_classic", _overrelaxation, (DB, INVARIANCE),
             note="ordered overrelaxation, n=2"),
    Instance("adaptive_imh", "chain_proposals", _adaptive_imh, (DB, INVARIANCE),
             note="adaptive IMH, sum rule, proportional selection"),
    Instance("adaptive_imh_ess", "chain_proposals", _adaptive_imh_ess, (DB, INVARIANCE),
             note="adaptive IMH, ESS rule"),
    Instance("windowed", "chain_proposals", _windowed, (DB, INVARIANCE), note="stopping-time window"),
    Instance("coinciding", "chain_proposals", _coinciding, (DB, INVARIANCE), note="coinciding windows, m=4"),
    Instance("nuts", "chain_proposals", _nuts, (DB, INVARIANCE), note="NUTS over a permutation"),
    Instance("nuts_uniform", "chain_proposals", _nuts_uniform, (DB, INVARIANCE),
             note="NUTS, uniform selection, no early exit"),
    Instance("mtm", "multi_try", _mtm, (DB, INVARIANCE), note="MTM n=2, inverse-q weights"),
    Instance("st_mtm", "multi_try", _st_mtm, (DB, INVARIANCE), note="stopping-time MTM, c=0.6"),
    Instance("dr_stochastic", "delayed_rejection", _dr_stochastic, (DB, INVARIANCE),
             note="two-stage stochastic DR"),
    Instance("pm_mtm", "multi_try", _pm_mtm, (DB, INVARIANCE), note="pseudo-marginal MTM"),
    Instance("one_hit", "multi_try", _one_hit, (DB, INVARIANCE), note="one-hit kernel"),
    Instance("bouncy_I", "delayed_rejection", _bouncy("I"), (DB, INVARIANCE), note="bouncy variant I"),
    Instance("bouncy_II", "delayed_rejection", _bouncy("II"), (DB, INVARIANCE), note="bouncy variant II"),
    Instance("extra_chance", "delayed_rejection", _extra_chance, (DB, INVARIANCE), note="extra chance, n=3"),
    Instance("dr_deterministic", "delayed_rejection", _dr_deterministic, (DB, INVARIANCE),
             note="deterministic DR across a barrier"),
    Instance("orbit_dr", "delayed_rejection", _orbit_dr, (DB, INVARIANCE), note="orbit DR, n=3"),
    Instance("slice", "chain_proposals", _slice, (DB, INVARIANCE), note="slice lift with an MH inner kernel"),
    Instance("grw", "kernels_nonrev", _grw, (SKEW, INVARIANCE), sigma=velocity_flip, note="guided random walk"),
    Instance("fang", "kernels_nonrev", _fang, (SKEW, INVARIANCE), sigma=fang_sigma,
             note="time-reversal embedding of a 6-state map"),
    Instance("fang_restricted", "kernels_nonrev", _fang_restricted, (INVARIANCE,),
             note="restricted time-reversal kernel"),
    Instance("event_chain_1d", "delayed_rejection", _event_chain("1d"), (SKEW, INVARIANCE),
             sigma=event_chain_sigma, note="event chain, L=6, d=1, m=3"),
    Instance("event_chain_2d", "delayed_rejection", _event_chain("2d"), (SKEW, INVARIANCE),
             sigma=event_chain_sigma, note="event chain, L=4, d=2, m=3"),
    Instance("event_chain_refresh", "delayed_rejection", _event_chain("1d", True), (INVARIANCE,),
             note="event chain with velocity and active-particle refresh"),
)

#: The reversible configurations required to pass detailed balance.
DB_CORE = ("mh", "rwm", "tempering", "penalty", "overrelaxation", "adaptive_imh", "windowed",
           "coinciding", "nuts", "mtm", "st_mtm", "dr_stochastic")
#: The skew-reversible configurations.
SKEW_CORE = ("grw", "fang", "event_chain_1d", "event_chain_2d")


def run_instance(name: str, tol: float = 1e-12) -> tuple[list[CheckReport], int]:
    """Enumerate one instance and run its checks.

    Returns:
        The reports (row-stochasticity first) and the number of states.
    """
    inst = CORPUS[name]
    kernel, space = inst.build()
    tm = enumerate_kernel(kernel, space)
    reports = [check_row_stochastic(tm, tol)]
    if DB in inst.checks:
        reports.append(check_detailed_balance(tm, None, tol))
    if SKEW in inst.checks:
        reports.append(check_skew_db(tm, None, inst.sigma, tol))
    if INVARIANCE in inst.checks:
        reports.append(check_invariance(tm, None, tol))
    return reports, len(space)

"""Reversible kernels expressed as involutive MH updates.

Random walk Metropolis, textbook Metropolis-Hastings, simplified
tempering, the penalty method for noisy acceptance ratios and ordered
overrelaxation.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .core import (
    METROPOLIS,
    NEG_INF,
    AcceptanceFunction,
    AuxiliaryConditional,
    DensityError,
    InvolutionMap,
    InvolutiveMHKernel,
    Kernel,
    KernelStepResult,
    NotEnumerableError,
    accept_draw,
    log_acceptance_ratio,
)

logger = logging.getLogger(__name__)


@dataclass
class ProposalKernel:
    """Proposal ``Q(z, .)`` with optional density and enumeration.

    Attributes:
        sample: ``(rng, z) -> z'``.
        log_density: ``(z, z') -> log q(z, z')``; needed by Hastings ratios.
        symmetric: Declares ``q(z, z') = q(z', z)``.
        enumerate: ``z -> [(z', prob), ...]`` for finite proposals.
    """

    sample: Callable[[np.random.Generator, Any], Any]
    log_density: Callable[[Any, Any], float] | None = None
    symmetric: bool = False
    enumerate: Callable[[Any], list] | None = None


def uniform_proposal(states: Sequence) -> ProposalKernel:
    """Independent uniform proposal over a finite list of states."""
    states = list(states)
    lq = -math.log(len(states))
    return ProposalKernel(
        sample=lambda rng, z: states[int(rng.integers(len(states)))],
        log_density=lambda z, zp: lq,
        symmetric=True,
        enumerate=lambda z: [(s, 1.0 / len(states)) for s in states],
    )


def discrete_proposal(matrix, states: Sequence | None = None) -> ProposalKernel:
    """Proposal from a row-stochastic matrix over ``range(n)`` (or ``states``)."""
    Q = np.asarray(matrix, dtype=float)
    n = Q.shape[0]
    labels = list(range(n)) if states is None else list(states)
    index = {s: i for i, s in enumerate(labels)}

    def sample(rng, z):
        return labels[int(rng.choice(n, p=Q[index[z]]))]

    def log_density(z, zp):
        q = Q[index[z], index[zp]]
        return math.log(q) if q > 0 else NEG_INF

    def enum(z):
        row = Q[index[z]]
        return [(labels[j], float(row[j])) for j in range(n) if row[j] > 0]

    return ProposalKernel(sample, log_density, bool(np.allclose(Q, Q.T)), enum)


# ---------------------------------------------------------------------------
# Random walk Metropolis and Metropolis-Hastings
# ---------------------------------------------------------------------------


class RWMKernel(InvolutiveMHKernel):
    """Random walk Metropolis via ``phi(z, v) = (z + v, -v)``.

    The increment law must be symmetric, so its density cancels and the
    ratio is ``pi(z + v) / pi(z)``.

    Args:
        log_pi: Target log-density.
        noise: ``(rng, z) -> v`` increment sampler.
        noise_enumerate: Optional finite increment law ``[(v, prob), ...]``.
        move: Group operation, ``z + v`` by default (e.g. addition modulo
            ``L`` on a ring).
    """

    name = "rwm"

    def __init__(
        self,
        log_pi: Callable,
        noise: Callable | None = None,
        accept: AcceptanceFunction | None = None,
        noise_enumerate: Sequence | None = None,
        move: Callable | None = None,
        scale: float = 1.0,
    ):
        self.log_pi = log_pi
        self.move = move or (lambda z, v: z + v)
        if noise is None:
            if noise_enumerate is not None:
                vs = [v for v, _ in noise_enumerate]
                ps = np.array([p for _, p in noise_enumerate])

                def noise(rng, z):
                    return vs[int(rng.choice(len(vs), p=ps))]
            else:
                def noise(rng, z):
                    return scale * rng.standard_normal(np.shape(z))
        self.noise = noise
        mv = self.move
        enum = None
        if noise_enumerate is not None:
            law = list(noise_enumerate)

            def enum(z):
                return [((z, v), p) for v, p in law]

        aux = AuxiliaryConditional(lambda rng, z: (z, noise(rng, z)), enum)
        phi = InvolutionMap(lambda xi: (mv(xi[0], xi[1]), -xi[1]), name="rwm")
        super().__init__(aux, lambda xi: log_pi(xi[0]), phi, accept)


def rwm_kernel(log_pi, noise=None, accept=None, **kw) -> RWMKernel:
    return RWMKernel(log_pi, noise, accept, **kw)


class MHKernel(InvolutiveMHKernel):
    """Metropolis-Hastings with the swap involution ``(z, z') -> (z', z)``."""

    name = "mh"

    def __init__(self, log_pi: Callable, q: ProposalKernel, accept: AcceptanceFunction | None = None):
        if q.log_density is None and not q.symmetric:
            raise ValueError("an asymmetric proposal needs log_density")
        self.log_pi = log_pi
        self.q = q
        enum = None
        if q.enumerate is not None:
            def enum(z):
                return [((z, zp), p) for zp, p in q.enumerate(z)]

        if q.symmetric:
            def rho(xi):
                return log_pi(xi[0])
        else:
            def rho(xi):
                lp = log_pi(xi[0])
                if lp == NEG_INF:
                    return NEG_INF
                return lp + q.log_density(xi[0], xi[1])

        aux = AuxiliaryConditional(lambda rng, z: (z, q.sample(rng, z)), enum)
        phi = InvolutionMap(lambda xi: (xi[1], xi[0]), name="swap")
        super().__init__(aux, rho, phi, accept)


def mh_kernel(log_pi, q: ProposalKernel, accept=None) -> MHKernel:
    return MHKernel(log_pi, q, accept)


# ---------------------------------------------------------------------------
# Simplified tempering
# ---------------------------------------------------------------------------


class TemperingKernel(Kernel):
    """Three-move tempering kernel.

    Draws ``x1 ~ Q(x0, .)``, ``x2 ~ Qt(x1, .)`` and ``x3 ~ Q(x2, .)`` and
    accepts ``x3`` with ratio ``(dpi~/dpi)(x1) * (dpi/dpi~)(x2)``. The
    involution reverses the path. ``Q`` must be reversible for ``pi`` and
    ``Qt`` for ``pi~``.

    Args:
        Q: ``pi``-reversible kernel.
        Qt: ``pi~``-reversible kernel.
        log_dpitilde_dpi: ``log (dpi~/dpi)``; ``-inf`` where ``pi~`` vanishes
            and ``+inf`` where ``pi`` vanishes.
    """

    name = "tempering"

    def __init__(self, Q: ProposalKernel, Qt: ProposalKernel, log_dpitilde_dpi: Callable,
                 accept: AcceptanceFunction | None = None):
        self.Q = Q
        self.Qt = Qt
        self.g = log_dpitilde_dpi
        self.accept = accept or METROPOLIS

    @staticmethod
    def involution() -> InvolutionMap:
        """Path reversal ``(x0, x1, x2, x3) -> (x3, x2, x1, x0)``."""
        return InvolutionMap(lambda path: tuple(reversed(path)), name="path_reversal")

    def log_ratio(self, x1, x2) -> float:
        g1 = float(self.g(x1))
        g2 = float(self.g(x2))
        if math.isnan(g1) or math.isnan(g2):
            raise DensityError("log Radon-Nikodym derivative is NaN")
        if g1 == NEG_INF or g2 == math.inf:
            return NEG_INF
        return g1 - g2

    def step(self, rng, state):
        x1 = self.Q.sample(rng, state)
        x2 = self.Qt.sample(rng, x1)
        x3 = self.Q.sample(rng, x2)
        lr = self.log_ratio(x1, x2)
        if accept_draw(rng, self.accept.log(lr)):
            return KernelStepResult(x3, True, lr, (x3, x2, x1, state))
        return KernelStepResult(state, False, lr, (x3, x2, x1, state))

    def transitions(self, state):
        if self.Q.enumerate is None or self.Qt.enumerate is None:
            raise NotEnumerableError("tempering needs enumerable Q and Qt")
        out = []
        for x1, p1 in self.Q.enumerate(state):
            for x2, p2 in self.Qt.enumerate(x1):
                alpha = self.accept.prob(self.log_ratio(x1, x2))
                for x3, p3 in self.Q.enumerate(x2):
                    p = p1 * p2 * p3
                    out.append((x3, p * alpha))
                    out.append((state, p * (1.0 - alpha)))
        return out


def tempering_kernel(Q, Qt, log_dpitilde_dpi, accept=None) -> TemperingKernel:
    return TemperingKernel(Q, Qt, log_dpitilde_dpi, accept)


# ---------------------------------------------------------------------------
# Penalty method
# ---------------------------------------------------------------------------


class NoiseLaw:
    """Multiplicative noise ``W`` with ``w Q_z(dw) = Q_{phi0(z)}^{1/.}(dw)``."""

    def sample(self, rng, z) -> float:
        raise NotImplementedError

    def enumerate(self, z):
        raise NotEnumerableError(f"{type(self).__name__} is continuous")


class LognormalNoise(NoiseLaw):
    """``W = exp(-s^2/2 + s Z)`` with ``s = sigma(z)`` and ``Z ~ N(0, 1)``.

    ``sigma`` must satisfy ``sigma(phi0(z)) = sigma(z)``.
    """

    def __init__(self, sigma: Callable[[Any], float] | float):
        self.sigma = sigma if callable(sigma) else (lambda z, s=float(sigma): s)

    def sample(self, rng, z) -> float:
        s = float(self.sigma(z))
        return math.exp(-0.5 * s * s + s * rng.standard_normal())


class TwoPointNoise(NoiseLaw):
    """``W = 1/w`` w.p. ``w/(1+w)`` and ``w`` w.p. ``1/(1+w)``, ``w = omega(z)``.

    This is the mean-one law satisfying ``w Q_z(dw) = Q_{phi0(z)}^{1/.}(dw)``,
    which the ratio ``r_exact * w`` needs. ``omega`` must satisfy
    ``omega(phi0(z)) = omega(z)``.
    """

    def __init__(self, omega: Callable[[Any], float] | float):
        self.omega = omega if callable(omega) else (lambda z, w=float(omega): w)

    def sample(self, rng, z) -> float:
        w = float(self.omega(z))
        return 1.0 / w if rng.random() < w / (1.0 + w) else w

    def enumerate(self, z):
        w = float(self.omega(z))
        if w == 1.0:
            return [(1.0, 1.0)]
        return [(1.0 / w, w / (1.0 + w)), (w, 1.0 / (1.0 + w))]


class PenaltyKernel(Kernel):
    """Accept ``phi0(z)`` with ``a(r_exact(z) * w)``, ``w`` drawn fresh.

    The joint involution is ``(z, w) -> (phi0(z), 1/w)``. In applications
    ``r_exact * w`` is the only thing observed (a noisy ratio); here the
    exact part is computed from ``log_pi`` and ``phi0``.
    """

    name = "penalty"

    def __init__(self, log_pi: Callable, phi0: InvolutionMap, noise: NoiseLaw,
                 accept: AcceptanceFunction | None = None):
        self.log_pi = log_pi
        self.phi0 = phi0
        self.noise = noise
        self.accept = accept or METROPOLIS

    def joint_involution(self, lebesgue_noise: bool = True) -> InvolutionMap:
        """``(z, w) -> (phi0(z), 1/w)``.

        With Lebesgue reference on ``w`` the map ``w -> 1/w`` contributes
        ``log |d(1/w)/dw| = -2 log w``; counting reference contributes 0.
        """
        phi0 = self.phi0

        def apply(zw):
            z, w = zw
            return (phi0(z), 1.0 / w)

        def log_jac(zw):
            z, w = zw
            return phi0.log_jacobian(z) + (-2.0 * math.log(w) if lebesgue_noise else 0.0)

        return InvolutionMap(apply, log_jac, name="penalty_joint")

    def _log_ratio(self, z, w) -> float:
        if not w > 0:
            raise ValueError(f"noise draw must be positive, got {w}")
        lr = log_acceptance_ratio(self.log_pi, self.phi0, z)
        return lr + math.log(w) if lr > NEG_INF else NEG_INF

    def step(self, rng, state):
        w = self.noise.sample(rng, state)
        lr = self._log_ratio(state, w)
        prop = self.phi0(state)
        if accept_draw(rng, self.accept.log(lr)):
            return KernelStepResult(prop, True, lr, (prop, 1.0 / w), info={"w": w})
        return KernelStepResult(state, False, lr, (prop, 1.0 / w), info={"w": w})

    def transitions(self, state):
        out = []
        prop = self.phi0(state)
        for w, p in self.noise.enumerate(state):
            alpha = self.accept.prob(self._log_ratio(state, w))
            out.append((prop, p * alpha))
            out.append((state, p * (1.0 - alpha)))
        return out


def penalty_kernel(log_pi, phi0, noise, accept=None) -> PenaltyKernel:
    return PenaltyKernel(log_pi, phi0, noise, accept)


# ---------------------------------------------------------------------------
# Ordered overrelaxation
# ---------------------------------------------------------------------------


def rank_swap(values: Sequence, keys: Sequence[int]) -> int:
    """Index swapped with position 0 by the ordered overrelaxation map.

    Elements are ordered by ``(value, key)`` where ``keys`` are distinct
    tie-break labels that travel with their values. If ``y_0`` has rank
    ``r`` the partner is the element of rank ``n - r``.
    """
    n = len(values) - 1
    order = sorted(range(n + 1), key=lambda i: (values[i], keys[i]))
    r = order.index(0)
    return order[n - r]


def overrelaxation_involution() -> InvolutionMap:
    """Involution on ``(values, keys)`` swapping ``y_0`` with its antithetic rank."""

    def apply(xi):
        values, keys = xi
        j = rank_swap(values, keys)
        if j == 0:
            return xi
        v = list(values)
        k = list(keys)
        v[0], v[j] = v[j], v[0]
        k[0], k[j] = k[j], k[0]
        return (tuple(v), tuple(k))

    return InvolutionMap(apply, name="rank_swap")


class OrderedOverrelaxationKernel(InvolutiveMHKernel):
    """Ordered overrelaxation for a one-dimensional conditional.

    ``n`` fresh draws ``y_1..y_n`` are taken from ``proposal`` (the exact
    conditional by default, in which case every move is accepted). The
    current value ``y_0`` with rank ``r`` is swapped with the rank ``n - r``
    order statistic. Ties are broken by a uniformly random ordering of
    tied positions carried along with the values, which keeps the map an
    exact involution on discrete supports.

    Args:
        log_target: Log-density of the target conditional.
        sample: ``(rng, size) -> array`` drawing from the proposal.
        n: Number of fresh draws.
        log_proposal: Log-density of the proposal when it differs from
            the target.
        support: Finite support of the proposal, enabling enumeration.
    """

    name = "overrelaxation"

    def __init__(
        self,
        log_target: Callable,
        sample: Callable,
        n: int,
        log_proposal: Callable | None = None,
        support: Sequence | None = None,
        accept: AcceptanceFunction | None = None,
    ):
        if n < 1:
            raise ValueError("n must be at least 1")
        self.n = n
        self.log_target = log_target
        self.log_proposal = log_proposal
        exact = log_proposal is None

        def rho(xi):
            values, _ = xi
            lp = log_target(values[0])
            if lp == NEG_INF:
                return NEG_INF
            dens = log_target if exact else log_proposal
            return lp + math.fsum(dens(y) for y in values[1:])

        def aux_sample(rng, y0):
            ys = sample(rng, n)
            keys = tuple(int(k) for k in rng.permutation(n + 1))
            return ((y0,) + tuple(ys.tolist() if hasattr(ys, "tolist") else ys), keys)

        enum = None
        if support is not None:
            supp = list(support)
            perms = list(itertools.permutations(range(n + 1)))
            lw = np.array([
                log_target(y) if exact else log_proposal(y) for y in supp
            ])
            probs = np.exp(lw - np.logaddexp.reduce(lw))

            def enum(y0):
                out = []
                pk = 1.0 / len(perms)
                for combo in itertools.product(range(len(supp)), repeat=n):
                    pc = float(np.prod(probs[list(combo)]))
                    if pc == 0.0:
                        continue
                    ys = tuple(supp[c] for c in combo)
                    for keys in perms:
                        out.append((((y0,) + ys, keys), pc * pk))
                return out

        aux = AuxiliaryConditional(aux_sample, enum, project=lambda xi: xi[0][0])
        super().__init__(aux, rho, overrelaxation_involution(), accept)


def ordered_overrelaxation_kernel(log_target, sample, n, **kw) -> OrderedOverrelaxationKernel:
    return OrderedOverrelaxationKernel(log_target, sample, n, **kw)

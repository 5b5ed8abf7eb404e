"""Nonreversible kernels satisfying skew detailed balance.

Given an involution ``sigma`` that preserves the target (typically a
velocity flip) and a map ``psi`` with ``psi^{-1} = sigma o psi o sigma``,
the cycle ``Pi S`` moves to ``psi(xi)`` with probability ``a(r)`` and to
``sigma(xi)`` otherwise. It leaves the target invariant and satisfies
``mu(dx) P(x, dy) = mu(dy) (S P S)(y, dx)``.
"""

from __future__ import annotations

import logging
import math
from typing import Any, Callable, Sequence

import numpy as np

from .core import (
    METROPOLIS,
    NEG_INF,
    AcceptanceFunction,
    AuxiliaryConditional,
    CycleKernel,
    FunctionKernel,
    InvolutionError,
    InvolutionMap,
    InvolutiveMHKernel,
    Kernel,
    KernelStepResult,
    MixtureKernel,
    RefreshKernel,
    accept_draw,
    state_distance,
)

logger = logging.getLogger(__name__)


class ReversibleMap:
    """Invertible map ``psi`` with a flip ``sigma`` such that ``psi^{-1} = sigma psi sigma``.

    Args:
        psi: Forward map.
        sigma: Involution with ``mu^sigma = mu`` and ``lambda^sigma = lambda``.
        psi_inv: Inverse map; defaults to ``sigma o psi o sigma``.
        log_jacobian: ``log (d lambda^{psi^{-1}} / d lambda)``; ``None`` for a
            volume-preserving map.
    """

    def __init__(
        self,
        psi: Callable,
        sigma: Callable,
        psi_inv: Callable | None = None,
        log_jacobian: Callable | None = None,
        name: str = "psi",
    ):
        self.psi = psi
        self.sigma = sigma
        self.psi_inv = psi_inv or (lambda xi: sigma(psi(sigma(xi))))
        self.volume_preserving = log_jacobian is None
        self._log_jacobian = log_jacobian or (lambda xi: 0.0)
        self.name = name

    def log_jacobian(self, xi) -> float:
        return float(self._log_jacobian(xi))

    def phi(self) -> InvolutionMap:
        """The involution ``sigma o psi``."""
        sigma, psi = self.sigma, self.psi
        lj = None if self.volume_preserving else self._log_jacobian
        return InvolutionMap(lambda xi: sigma(psi(xi)), lj, name=f"sigma_{self.name}")

    def check(self, points: Sequence) -> dict:
        """Worst violations of ``psi psi^{-1} = Id`` and ``sigma psi sigma psi = Id``."""
        inv = 0.0
        rev = 0.0
        flip = 0.0
        for xi in points:
            inv = max(inv, state_distance(self.psi(self.psi_inv(xi)), xi))
            rev = max(rev, state_distance(self.sigma(self.psi(self.sigma(self.psi(xi)))), xi))
            flip = max(flip, state_distance(self.sigma(self.sigma(xi)), xi))
        return {"psi_inverse": inv, "time_reversal": rev, "sigma_involution": flip}


class SkewKernel(Kernel):
    """The cycle ``Pi S``: accept ``psi(xi)`` with ``a(r)``, else return ``sigma(xi)``.

    ``r = (rho o psi / rho) * d lambda^{psi^{-1}} / d lambda``.
    """

    name = "skew"

    def __init__(self, rmap: ReversibleMap, rho: Callable, accept: AcceptanceFunction | None = None):
        self.rmap = rmap
        self.rho = rho
        self.accept = accept or METROPOLIS

    def log_ratio(self, xi, prop=None) -> float:
        lp = float(self.rho(xi))
        if math.isnan(lp):
            raise ValueError("log-density is NaN")
        if lp == NEG_INF:
            return NEG_INF
        if prop is None:
            prop = self.rmap.psi(xi)
        lq = float(self.rho(prop))
        if math.isnan(lq):
            raise ValueError("log-density is NaN")
        if lq == NEG_INF:
            return NEG_INF
        return lq - lp + self.rmap.log_jacobian(xi)

    def step(self, rng, state):
        prop = self.rmap.psi(state)
        lr = self.log_ratio(state, prop)
        if accept_draw(rng, self.accept.log(lr)):
            return KernelStepResult(prop, True, lr, prop)
        return KernelStepResult(self.rmap.sigma(state), False, lr, prop, flipped=True)

    def transitions(self, state):
        alpha = self.accept.prob(self.log_ratio(state))
        return [(self.rmap.psi(state), alpha), (self.rmap.sigma(state), 1.0 - alpha)]

    def reversible_part(self) -> InvolutiveMHKernel:
        """The reversible kernel ``Pi`` using the involution ``sigma o psi``."""
        aux = AuxiliaryConditional(lambda rng, xi: xi, lambda xi: [(xi, 1.0)], project=lambda xi: xi)
        return InvolutiveMHKernel(aux, self.rho, self.rmap.phi(), self.accept)

    def flip_kernel(self) -> FunctionKernel:
        return FunctionKernel(self.rmap.sigma, name="flip")

    def flip_first(self) -> CycleKernel:
        """The alternative ordering ``S Pi``."""
        return CycleKernel([self.flip_kernel(), self.reversible_part()])


def skew_kernel(phi: InvolutionMap, sigma: Callable, rho: Callable,
                accept: AcceptanceFunction | None = None) -> SkewKernel:
    """Skew kernel from an involution ``phi`` and flip ``sigma`` (``psi = sigma o phi``)."""
    lj = None if phi.lambda_invariant else phi.log_jacobian
    rmap = ReversibleMap(lambda xi: sigma(phi(xi)), sigma, psi_inv=lambda xi: phi(sigma(xi)),
                         log_jacobian=lj)
    return SkewKernel(rmap, rho, accept)


def velocity_flip(xv):
    x, v = xv
    return (x, -v)


def velocity_refresh(sample_v: Callable, enumerate_v: Sequence | None = None) -> RefreshKernel:
    """Full velocity refreshment ``(x, v) -> (x, v')`` with ``v' ~ kappa``.

    Args:
        sample_v: ``(rng, x) -> v``.
        enumerate_v: Optional finite law ``[(v, prob), ...]``.
    """
    enum = None
    if enumerate_v is not None:
        law = list(enumerate_v)

        def enum(x):
            return [((x, v), p) for v, p in law]

    return RefreshKernel(AuxiliaryConditional(lambda rng, x: (x, sample_v(rng, x)), enum))


def with_refresh(kernel: Kernel, refresh: Kernel, prob: float = 1.0) -> CycleKernel:
    """Refresh (with probability ``prob``) then move."""
    if prob >= 1.0:
        first = refresh
    else:
        first = MixtureKernel([refresh, FunctionKernel(lambda s: s, "identity")], [prob, 1.0 - prob])
    return CycleKernel([first, kernel])


# ---------------------------------------------------------------------------
# Guided random walk
# ---------------------------------------------------------------------------


def grw_kernel(log_pi: Callable, move: Callable | None = None,
               accept: AcceptanceFunction | None = None) -> SkewKernel:
    """Guided random walk on ``(x, v)``: ``psi(x, v) = (x + v, v)``, flip on rejection.

    The velocity law must be symmetric; it cancels from the ratio, which is
    ``pi(x + v) / pi(x)``.
    """
    mv = move or (lambda x, v: x + v)
    rmap = ReversibleMap(lambda xv: (mv(xv[0], xv[1]), xv[1]), velocity_flip, name="grw")
    return SkewKernel(rmap, lambda xv: log_pi(xv[0]), accept)


# ---------------------------------------------------------------------------
# Leapfrog and HMC
# ---------------------------------------------------------------------------


def gaussian_grad_log_kappa(v):
    return -v


class LeapfrogConfig:
    """Leapfrog parameters.

    Args:
        grad_log_pi: Gradient used in the velocity half steps. It may be a
            surrogate; the accept step always uses the exact target.
        eps: Step size.
        k: Number of leapfrog steps per proposal.
        grad_log_kappa: Gradient of the log velocity density (standard
            Gaussian by default). Must be odd.
        textbook: Position update sign. ``False`` (default) keeps
            ``x <- x + eps * grad log kappa(v)`` verbatim, so a Gaussian
            kappa gives ``x <- x - eps v``. That map is volume preserving
            and time reversible but integrates an unstable flow, so
            acceptance collapses as ``k`` grows. ``True`` uses
            ``x <- x - eps * grad log kappa(v)``, the Hamiltonian flow
            ``x <- x + eps v``; the sampling constructors default to it.
    """

    def __init__(self, grad_log_pi: Callable, eps: float, k: int = 1,
                 grad_log_kappa: Callable | None = None, textbook: bool = False):
        if eps <= 0:
            raise ValueError("eps must be positive")
        if k < 1:
            raise ValueError("k must be at least 1")
        self.grad_log_pi = grad_log_pi
        self.eps = float(eps)
        self.k = int(k)
        self.grad_log_kappa = grad_log_kappa or gaussian_grad_log_kappa
        self.textbook = textbook

    def imath(self, x):
        return 0.5 * self.eps * np.asarray(self.grad_log_pi(x), dtype=float)

    def jmath(self, v):
        sign = -1.0 if self.textbook else 1.0
        return sign * self.eps * np.asarray(self.grad_log_kappa(v), dtype=float)


def leapfrog_map(cfg: LeapfrogConfig) -> ReversibleMap:
    """``psi = (psi_B psi_A psi_B)^k`` with ``psi_B: v += i(x)`` and ``psi_A: x += j(v)``."""

    def h(xv):
        x, v = xv
        v = v + cfg.imath(x)
        x = x + cfg.jmath(v)
        v = v + cfg.imath(x)
        return (x, v)

    def psi(xv):
        x = np.asarray(xv[0], dtype=float)
        v = np.asarray(xv[1], dtype=float)
        xv = (x, v)
        for _ in range(cfg.k):
            xv = h(xv)
        return xv

    return ReversibleMap(psi, velocity_flip, name="leapfrog")


class HMCKernel(CycleKernel):
    """HMC as a skew kernel over the leapfrog map, composed with refreshment.

    State is ``(x, v)``. With ``refresh=1`` the velocity is redrawn every
    step and the position chain is reversible (``k=1`` gives MALA); with
    ``0 < refresh < 1`` it is redrawn with that probability, which keeps
    persistence of motion.
    """

    name = "hmc"

    def __init__(self, log_pi: Callable, cfg: LeapfrogConfig, refresh: float = 1.0,
                 log_kappa: Callable | None = None, accept: AcceptanceFunction | None = None):
        self.cfg = cfg
        log_kappa = log_kappa or (lambda v: -0.5 * float(np.dot(np.ravel(v), np.ravel(v))))

        def rho(xv):
            lp = float(log_pi(xv[0]))
            if lp == NEG_INF:
                return NEG_INF
            return lp + float(log_kappa(xv[1]))

        self.rho = rho
        self.skew = SkewKernel(leapfrog_map(cfg), rho, accept)
        ref = velocity_refresh(lambda rng, x: rng.standard_normal(np.shape(x)))
        if refresh <= 0.0:
            kernels = [self.skew]
        elif refresh >= 1.0:
            kernels = [ref, self.skew]
        else:
            kernels = [MixtureKernel([ref, FunctionKernel(lambda s: s, "identity")],
                                     [refresh, 1.0 - refresh]), self.skew]
        super().__init__(kernels)


def hmc_kernel(log_pi, grad_log_pi, eps, k=1, refresh=1.0, textbook=True, **kw) -> HMCKernel:
    return HMCKernel(log_pi, LeapfrogConfig(grad_log_pi, eps, k, textbook=textbook), refresh, **kw)


def mala_kernel(log_pi, grad_log_pi, eps, textbook=True, **kw) -> HMCKernel:
    """One leapfrog step with full refreshment."""
    return hmc_kernel(log_pi, grad_log_pi, eps, 1, 1.0, textbook=textbook, **kw)


# ---------------------------------------------------------------------------
# Reflections
# ---------------------------------------------------------------------------


def reflection_involution(normal: Callable, atol: float = 1e-9) -> InvolutionMap:
    """``b(x, v) = (x, v - 2 (n(x).v) n(x))`` for a unit normal field ``n``."""

    def apply(xv):
        x, v = xv
        n = np.asarray(normal(x), dtype=float)
        if abs(float(n @ n) - 1.0) > atol:
            raise InvolutionError("normal field must have unit norm")
        v = np.asarray(v, dtype=float)
        return (x, v - 2.0 * float(n @ v) * n)

    return InvolutionMap(apply, name="reflection")


# ---------------------------------------------------------------------------
# Time-reversal symmetric maps with a non-involutive flip
# ---------------------------------------------------------------------------


def _power(f: Callable, f_inv: Callable, u: int) -> Callable:
    return f if u == 1 else f_inv


class TimeReversalEmbedding:
    """Embed ``psi0`` with ``psi0^{-1} = sigma0^{-1} psi0 sigma0`` on ``Z x {-1, +1}``.

    Builds ``sigma(z, u) = (sigma0^u(z), -u)`` and
    ``psi(z, u) = (sigma0^{-u} psi0^u (z), u)``; the resulting skew kernel
    targets ``mu0 x Uniform{-1, 1}``.

    Args:
        psi0, psi0_inv: The map and its inverse on ``Z``.
        sigma0, sigma0_inv: The (not necessarily involutive) symmetry.
        log_pi0: Log-density of ``mu0``; must be ``sigma0``-invariant.
        log_jac_psi0_inv: ``u -> (z -> log d lambda^{psi0^{-u}} / d lambda0 (z))``;
            ``None`` for measure-preserving maps.
    """

    def __init__(self, psi0, psi0_inv, sigma0, sigma0_inv, log_pi0,
                 log_jac_psi0_inv: Callable | None = None,
                 accept: AcceptanceFunction | None = None):
        self.psi0 = psi0
        self.psi0_inv = psi0_inv
        self.sigma0 = sigma0
        self.sigma0_inv = sigma0_inv
        self.log_pi0 = log_pi0
        self.log_jac = log_jac_psi0_inv
        self.accept = accept or METROPOLIS

    def sigma(self, zu):
        z, u = zu
        return (_power(self.sigma0, self.sigma0_inv, u)(z), -u)

    def psi(self, zu):
        z, u = zu
        y = _power(self.psi0, self.psi0_inv, u)(z)
        return (_power(self.sigma0, self.sigma0_inv, -u)(y), u)

    def psi_inv(self, zu):
        z, u = zu
        y = _power(self.sigma0, self.sigma0_inv, u)(z)
        return (_power(self.psi0, self.psi0_inv, -u)(y), u)

    def log_alpha(self, z, u: int) -> float:
        """``log a(pi0(psi0^u z) / pi0(z) * jac)``."""
        lp = float(self.log_pi0(z))
        if lp == NEG_INF:
            return NEG_INF
        lq = float(self.log_pi0(_power(self.psi0, self.psi0_inv, u)(z)))
        if lq == NEG_INF:
            return NEG_INF
        lj = 0.0 if self.log_jac is None else float(self.log_jac(u)(z))
        return self.accept.log(lq - lp + lj)

    def kernel(self) -> SkewKernel:
        lj = None
        if self.log_jac is not None:
            def lj(zu):
                return float(self.log_jac(zu[1])(zu[0]))
        rmap = ReversibleMap(self.psi, self.sigma, self.psi_inv, lj, name="time_reversal")
        return SkewKernel(rmap, lambda zu: self.log_pi0(zu[0]), self.accept)

    def restricted_kernel(self) -> "RestrictedTimeReversalKernel":
        return RestrictedTimeReversalKernel(self)


class RestrictedTimeReversalKernel(Kernel):
    """Kernel on ``Z``: ``psi0(z)`` w.p. ``alpha(z, 1)``, else ``sigma0(z)``.

    Leaves ``mu0`` invariant although it satisfies neither detailed nor
    skew detailed balance.
    """

    name = "time_reversal_restricted"

    def __init__(self, emb: TimeReversalEmbedding):
        self.emb = emb

    def step(self, rng, state):
        la = self.emb.log_alpha(state, 1)
        if accept_draw(rng, la):
            return KernelStepResult(self.emb.psi0(state), True, la)
        return KernelStepResult(self.emb.sigma0(state), False, la, flipped=True)

    def transitions(self, state):
        a = math.exp(self.emb.log_alpha(state, 1))
        return [(self.emb.psi0(state), a), (self.emb.sigma0(state), 1.0 - a)]


def time_reversal_embedding(psi0, psi0_inv, sigma0, sigma0_inv, log_pi0,
                            check_states: Sequence | None = None, atol: float = 1e-9,
                            **kw) -> TimeReversalEmbedding:
    """Build the embedding, optionally verifying ``sigma psi sigma psi = Id`` on ``check_states``."""
    emb = TimeReversalEmbedding(psi0, psi0_inv, sigma0, sigma0_inv, log_pi0, **kw)
    if check_states is not None:
        for z in check_states:
            for u in (-1, 1):
                zu = (z, u)
                if state_distance(emb.sigma(emb.psi(emb.sigma(emb.psi(zu)))), zu) > atol:
                    raise InvolutionError(f"sigma psi sigma psi != Id at {zu!r}")
    return emb

"""Delayed rejection kernels.

Stochastic and deterministic delayed rejection, the extra-chance slice
kernel and its closed forms, discrete-time bouncy kernels and the
discrete-time event-chain kernel for hard spheres (with soft potentials
handled through slice variables).

Stage indices are 1-based; ``alpha_0 = 0`` and ``beta_1 = 1``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .core import (
    METROPOLIS,
    NEG_INF,
    AcceptanceFunction,
    DensityError,
    KernelStepResult,
    NotEnumerableError,
    RandomSource,
    SourceKernel,
    accept_draw,
    state_key,
)
from .kernels_nonrev import ReversibleMap

logger = logging.getLogger(__name__)


def _log(p: float) -> float:
    return math.log(p) if p > 0 else NEG_INF


# ---------------------------------------------------------------------------
# Stochastic delayed rejection
# ---------------------------------------------------------------------------


@dataclass
class DrStage:
    """One stage of a stochastic delayed-rejection ladder.

    Attributes:
        sample: ``(rng, Z) -> z_k`` drawing ``Q_k(Z^{k-1}, .)``; ``Z`` is the tuple ``(z_0, ..., z_{k-1})``.
        log_density: ``(Z, z_k) -> log q_k``.
        phi: Involution on tuples of length ``k + 1``.
        enumerate: Optional ``Z -> [(z_k, prob), ...]``.
        log_jacobian: Optional log Jacobian of ``phi`` w.r.t. the reference.
        accept: Stage acceptance function.
    """

    sample: Callable
    log_density: Callable
    phi: Callable
    enumerate: Callable | None = None
    log_jacobian: Callable | None = None
    accept: AcceptanceFunction = METROPOLIS


def reverse_involution(Z: tuple) -> tuple:
    """``(z_0, ..., z_k) -> (z_k, ..., z_0)``."""
    return tuple(reversed(Z))


def identity_stage(stage: DrStage) -> DrStage:
    """Copy of ``stage`` whose involution is the identity."""
    return DrStage(stage.sample, stage.log_density, lambda Z: Z, stage.enumerate, None, stage.accept)


class DrLadder:
    """Ordered stages; running out of stages rejects (as a final identity stage would)."""

    def __init__(self, stages: Sequence[DrStage]):
        if not stages:
            raise ValueError("a ladder needs at least one stage")
        self.stages = list(stages)

    def __len__(self):
        return len(self.stages)


class _StochasticDRState:
    def __init__(self, ladder: DrLadder, log_pi: Callable):
        self.ladder = ladder
        self.log_pi = log_pi
        self._alpha: dict = {}
        self._eta: dict = {}

    def log_eta(self, Z: tuple) -> float:
        key = state_key(Z)
        if key not in self._eta:
            val = float(self.log_pi(Z[0]))
            for i in range(1, len(Z)):
                if val == NEG_INF:
                    break
                val += float(self.ladder.stages[i - 1].log_density(Z[:i], Z[i]))
            if math.isnan(val):
                raise DensityError(f"NaN density at {Z!r}")
            self._eta[key] = val
        return self._eta[key]

    def beta(self, k: int, Z: tuple) -> float:
        b = 1.0
        for i in range(1, k):
            b *= 1.0 - self.alpha(i, Z[: i + 1])
            if b == 0.0:
                break
        return b

    def log_ratio(self, k: int, Z: tuple) -> float:
        stage = self.ladder.stages[k - 1]
        b = self.beta(k, Z)
        le = self.log_eta(Z)
        if b == 0.0 or le == NEG_INF:
            return NEG_INF
        PZ = tuple(stage.phi(Z))
        bp = self.beta(k, PZ)
        lep = self.log_eta(PZ)
        if bp == 0.0 or lep == NEG_INF:
            return NEG_INF
        lj = 0.0 if stage.log_jacobian is None else float(stage.log_jacobian(Z))
        return (lep - le) + (math.log(bp) - math.log(b)) + lj

    def alpha(self, k: int, Z: tuple) -> float:
        key = (k, state_key(Z))
        if key not in self._alpha:
            self._alpha[key] = self.ladder.stages[k - 1].accept.prob(self.log_ratio(k, Z))
        return self._alpha[key]


class StochasticDRKernel(SourceKernel):
    """Stochastic delayed rejection.

    At stage ``k`` draws ``z_k ~ Q_k(Z^{k-1}, .)`` and outputs
    ``phi_k(Z^k)_0`` with probability ``alpha_k(Z^k)``; ``beta_k o phi_k``
    is recomputed along the reflected path with memoized evaluations.
    """

    name = "dr_stochastic"

    def __init__(self, ladder: DrLadder, log_pi: Callable):
        self.ladder = ladder
        self.log_pi = log_pi

    def _run(self, src: RandomSource, state):
        ctx = _StochasticDRState(self.ladder, self.log_pi)
        if ctx.log_eta((state,)) == NEG_INF:
            raise DensityError("current state has zero density")
        Z: tuple = (state,)
        for k, stage in enumerate(self.ladder.stages, start=1):
            z_k = src.draw(stage.sample, stage.enumerate, Z)
            Z = Z + (z_k,)
            a = ctx.alpha(k, Z)
            if src.accept(_log(a)):
                out = tuple(stage.phi(Z))[0]
                return KernelStepResult(out, True, ctx.log_ratio(k, Z), out, info={"stage": k})
        return KernelStepResult(state, False, NEG_INF, info={"stage": None})


def dr_stochastic_step(ladder, log_pi, rng, z) -> KernelStepResult:
    return StochasticDRKernel(ladder, log_pi).step(rng, z)


# ---------------------------------------------------------------------------
# Deterministic delayed rejection
# ---------------------------------------------------------------------------


class DeterministicDRKernel(SourceKernel):
    """Deterministic delayed rejection with involutions ``phi_1, ..., phi_n``.

    Outputs ``phi_k(z)`` with probability ``alpha_k(z)`` at the first
    accepted stage; exhausting the ladder returns ``z``. Density values are
    cached by state and :attr:`evaluations` counts fresh evaluations.

    Args:
        phis: Involutions on the state space.
        log_pi: Target log-density w.r.t. a reference left invariant by
            every ``phi_k`` unless ``log_jacobians`` is given.
        accepts: Per-stage acceptance functions (metropolis by default).
    """

    name = "dr_deterministic"

    def __init__(self, phis: Sequence[Callable], log_pi: Callable,
                 accepts: Sequence[AcceptanceFunction] | None = None,
                 log_jacobians: Sequence[Callable | None] | None = None):
        self.phis = list(phis)
        self.log_pi = log_pi
        self.accepts = list(accepts) if accepts is not None else [METROPOLIS] * len(self.phis)
        self.log_jacobians = list(log_jacobians) if log_jacobians is not None else [None] * len(self.phis)
        self.evaluations = 0
        self._reset()

    def _reset(self):
        self._lp: dict = {}
        self._alpha: dict = {}

    def lp(self, z) -> float:
        key = state_key(z)
        if key not in self._lp:
            self.evaluations += 1
            val = float(self.log_pi(z))
            if math.isnan(val):
                raise DensityError(f"NaN density at {z!r}")
            self._lp[key] = val
        return self._lp[key]

    def beta(self, k: int, z) -> float:
        b = 1.0
        for i in range(1, k):
            b *= 1.0 - self.alpha(i, z)
            if b == 0.0:
                break
        return b

    def log_ratio(self, k: int, z) -> float:
        b = self.beta(k, z)
        l0 = self.lp(z)
        if b == 0.0 or l0 == NEG_INF:
            return NEG_INF
        zp = self.phis[k - 1](z)
        bp = self.beta(k, zp)
        l1 = self.lp(zp)
        if bp == 0.0 or l1 == NEG_INF:
            return NEG_INF
        lj = self.log_jacobians[k - 1]
        return (l1 - l0) + (math.log(bp) - math.log(b)) + (0.0 if lj is None else float(lj(z)))

    def alpha(self, k: int, z) -> float:
        key = (k, state_key(z))
        if key not in self._alpha:
            self._alpha[key] = self.accepts[k - 1].prob(self.log_ratio(k, z))
        return self._alpha[key]

    def _run(self, src, state):
        self._reset()
        if self.lp(state) == NEG_INF:
            raise DensityError("current state has zero density")
        for k in range(1, len(self.phis) + 1):
            if src.accept(_log(self.alpha(k, state))):
                out = self.phis[k - 1](state)
                return KernelStepResult(out, True, self.log_ratio(k, state), out, info={"stage": k})
        return KernelStepResult(state, False, NEG_INF, info={"stage": None})


def dr_deterministic_step(phis, log_pi, accepts, rng, z) -> KernelStepResult:
    return DeterministicDRKernel(phis, log_pi, accepts).step(rng, z)


class OrbitDRKernel(SourceKernel):
    """Deterministic DR with ``phi_i = sigma psi^i`` (``i < n``) and ``phi_n = Id``.

    States met by the recursion are all of the form ``sigma^s psi^j (z)``,
    so densities are cached by the orbit index ``j`` using
    ``pi o sigma = pi``; :attr:`evaluations` counts distinct indices
    evaluated in the last step.

    Args:
        rmap: Volume-preserving ``psi`` with flip ``sigma``.
        log_pi: Target log-density, invariant under ``sigma``.
        n: Number of stages including the final identity.
    """

    name = "dr_orbit"

    def __init__(self, rmap: ReversibleMap, log_pi: Callable, n: int,
                 accepts: Sequence[AcceptanceFunction] | None = None):
        if n < 1:
            raise ValueError("n must be at least 1")
        if not rmap.volume_preserving:
            raise ValueError("orbit caching assumes a volume-preserving psi")
        self.rmap = rmap
        self.log_pi = log_pi
        self.n = int(n)
        self.accepts = list(accepts) if accepts is not None else [METROPOLIS] * self.n
        self.evaluations = 0

    def _phi(self, k, node):
        s, j = node
        if k == self.n:
            return node
        return (1, j + k) if s == 0 else (0, j - k)

    def _run(self, src, state):
        orbit = {0: state}
        lp: dict[int, float] = {}
        alpha_memo: dict = {}

        def point(j):
            while j not in orbit:
                if j > 0:
                    m = max(i for i in orbit if i >= 0)
                    orbit[m + 1] = self.rmap.psi(orbit[m])
                else:
                    m = min(i for i in orbit if i <= 0)
                    orbit[m - 1] = self.rmap.psi_inv(orbit[m])
            return orbit[j]

        def lpj(j):
            if j not in lp:
                lp[j] = float(self.log_pi(point(j)))
            return lp[j]

        def beta(k, node):
            b = 1.0
            for i in range(1, k):
                b *= 1.0 - alpha(i, node)
                if b == 0.0:
                    break
            return b

        def log_ratio(k, node):
            b = beta(k, node)
            l0 = lpj(node[1])
            if b == 0.0 or l0 == NEG_INF:
                return NEG_INF
            img = self._phi(k, node)
            bp = beta(k, img)
            l1 = lpj(img[1])
            if bp == 0.0 or l1 == NEG_INF:
                return NEG_INF
            return (l1 - l0) + (math.log(bp) - math.log(b))

        def alpha(k, node):
            key = (k, node)
            if key not in alpha_memo:
                alpha_memo[key] = self.accepts[k - 1].prob(log_ratio(k, node))
            return alpha_memo[key]

        if lpj(0) == NEG_INF:
            raise DensityError("current state has zero density")
        root = (0, 0)
        for k in range(1, self.n + 1):
            a = alpha(k, root)
            if src.accept(_log(a)):
                self.evaluations = len(lp)
                s, j = self._phi(k, root)
                out = point(j) if s == 0 else self.rmap.sigma(point(j))
                return KernelStepResult(out, True, log_ratio(k, root), out,
                                        info={"stage": k, "evaluations": len(lp), "orbit": sorted(lp)})
        self.evaluations = len(lp)
        return KernelStepResult(state, False, NEG_INF, info={"stage": None, "evaluations": len(lp)})


# ---------------------------------------------------------------------------
# Extra-chance slice kernel
# ---------------------------------------------------------------------------


def extra_chance_r(k: int, lw_z: float, lw_phis: Sequence[float], log_u: float) -> bool:
    """``1{max_{i<k} w(phi_i z) < u <= w(z) ∧ w(phi_k z)}``; ``lw_phis[i-1] = log w(phi_i z)``."""
    prev = max(lw_phis[: k - 1], default=NEG_INF)
    return prev < log_u <= min(lw_z, lw_phis[k - 1])


def extra_chance_beta(k: int, lw_z: float, lw_phis: Sequence[float], log_u: float) -> bool:
    """``1{w(z) ∧ max_{i<k} w(phi_i z) < u}``."""
    prev = max(lw_phis[: k - 1], default=NEG_INF)
    return min(lw_z, prev) < log_u


class ExtraChanceKernel(SourceKernel):
    """Slice sampler whose inner update is deterministic DR on the slice.

    With ``u0 ~ Uniform(0, 1)`` it scans ``phi_k(z) = sigma psi^k (z)`` for
    ``k < n`` and moves to the first with ``pi(phi_k z) / pi(z) >= u0``; the
    identity stage ``n`` keeps ``z``. Only metropolis stage acceptance is
    supported since the closed forms rely on it.
    """

    name = "extra_chance"

    def __init__(self, rmap: ReversibleMap, log_pi: Callable, n: int):
        if n < 1:
            raise ValueError("n must be at least 1")
        self.rmap = rmap
        self.log_pi = log_pi
        self.n = int(n)

    def phis(self) -> list[Callable]:
        out = []
        for k in range(1, self.n):
            def phi(z, k=k):
                for _ in range(k):
                    z = self.rmap.psi(z)
                return self.rmap.sigma(z)
            out.append(phi)
        out.append(lambda z: z)
        return out

    def _scan(self, state):
        """``log pi(z)`` and the images ``phi_k(z)`` with their log-densities, ``k < n``."""
        lw = float(self.log_pi(state))
        if lw == NEG_INF:
            raise DensityError("current state has zero density")
        imgs = []
        z = state
        for _ in range(1, self.n):
            z = self.rmap.psi(z)
            img = self.rmap.sigma(z)
            imgs.append((img, float(self.log_pi(img))))
        return lw, imgs

    def step(self, rng, state):
        lw = float(self.log_pi(state))
        if lw == NEG_INF:
            raise DensityError("current state has zero density")
        u0 = rng.random()
        log_u0 = math.log(u0) if u0 > 0 else NEG_INF
        z = state
        for k in range(1, self.n):
            z = self.rmap.psi(z)
            img = self.rmap.sigma(z)
            lr = float(self.log_pi(img)) - lw
            if lr >= log_u0:
                return KernelStepResult(img, True, lr, img, info={"stage": k, "log_u0": log_u0})
        return KernelStepResult(state, True, 0.0, state, info={"stage": self.n, "log_u0": log_u0})

    def transitions(self, state):
        """Exact law after integrating ``u0`` out."""
        lw, imgs = self._scan(state)
        out = []
        prev = 0.0
        used = []
        for img, l in imgs:
            top = min(1.0, math.exp(l - lw))
            p = max(0.0, top - prev)
            if p > 0:
                out.append((img, p))
                used.append(p)
            prev = max(prev, min(1.0, math.exp(l - lw)))
        out.append((state, max(0.0, 1.0 - math.fsum(used))))
        return out


def extra_chance_step(psi: ReversibleMap, log_pi, n, rng, z) -> KernelStepResult:
    return ExtraChanceKernel(psi, log_pi, n).step(rng, z)


def slice_log_target(log_pi: Callable, log_u: float) -> Callable:
    """Log of ``1{u <= pi(z)}``."""
    return lambda z: 0.0 if float(log_pi(z)) >= log_u else NEG_INF


# ---------------------------------------------------------------------------
# Bouncy kernels
# ---------------------------------------------------------------------------


class BouncyKernel(DeterministicDRKernel):
    """Two-stage deterministic DR on ``(x, v)`` with a bounce involution.

    Variant ``"I"`` uses ``phi_2 = phi_1 b phi_1``, variant ``"II"`` uses
    ``phi_2 = b``, both with ``phi_1 = sigma psi``.

    Args:
        psi: Forward map on ``(x, v)``.
        sigma: Velocity flip.
        bounce: Involution ``(x, v) -> (x, b_v(x, v))`` preserving ``kappa``.
    """

    name = "bouncy"

    def __init__(self, variant: str, psi: Callable, sigma: Callable, bounce: Callable,
                 log_gamma: Callable, log_kappa: Callable,
                 accepts: Sequence[AcceptanceFunction] | None = None):
        variant = variant.upper()
        if variant not in ("I", "II"):
            raise ValueError("variant must be 'I' or 'II'")

        def phi1(z):
            return sigma(psi(z))

        if variant == "I":
            def phi2(z):
                return phi1(bounce(phi1(z)))
        else:
            phi2 = bounce

        def log_pi(z):
            x, v = z
            lg = float(log_gamma(x))
            return NEG_INF if lg == NEG_INF else lg + float(log_kappa(v))

        super().__init__([phi1, phi2], log_pi, accepts)
        self.variant = variant
        self.log_gamma = log_gamma


def bouncy_step(variant, psi, sigma, bounce, log_gamma, log_kappa, rng, z) -> KernelStepResult:
    return BouncyKernel(variant, psi, sigma, bounce, log_gamma, log_kappa).step(rng, z)


# ---------------------------------------------------------------------------
# Event chain
# ---------------------------------------------------------------------------


@dataclass
class Torus:
    """Periodic box ``[0, L)^d`` (or ``Z_L^d`` when ``lattice``) with minimum-image distances."""

    L: float
    d: int
    lattice: bool = False

    def wrap(self, x):
        x = np.mod(np.asarray(x, dtype=float), self.L)
        if self.lattice:
            return tuple(int(round(c)) % int(self.L) for c in x)
        return tuple(float(c) for c in x)

    def distance(self, a, b) -> float:
        diff = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
        diff = np.minimum(diff, self.L - diff)
        return float(np.sqrt(diff @ diff))


@dataclass
class ParticleConfig:
    """Positions, velocity, active particle and pairwise radii.

    ``x`` is a tuple of ``m`` position tuples and ``v`` a tuple; both stay
    hashable so configurations can be enumerated.
    """

    x: tuple
    v: tuple
    i: int
    delta: np.ndarray
    geometry: Torus

    @property
    def m(self) -> int:
        return len(self.x)

    def state(self) -> tuple:
        return (self.x, self.v, self.i)

    def snapshot(self, step: int) -> str:
        return json.dumps({"positions": [list(p) for p in self.x], "velocity": list(self.v),
                           "active": int(self.i), "step": int(step)})


def radii_matrix(delta, m: int) -> np.ndarray:
    """Symmetric nonnegative ``m x m`` radii from a scalar or matrix."""
    D = np.full((m, m), float(delta)) if np.isscalar(delta) else np.asarray(delta, dtype=float)
    if D.shape != (m, m) or not np.allclose(D, D.T) or np.any(D < 0):
        raise ValueError("radii must form a symmetric nonnegative matrix")
    return D


def feasible(x, delta: np.ndarray, geom: Torus) -> bool:
    m = len(x)
    return all(geom.distance(x[a], x[b]) > delta[a, b] for a in range(m) for b in range(a + 1, m))


def collision_set(x, v, i: int, delta: np.ndarray, geom: Torus) -> list[int]:
    """``I(x, v, i) = {k != i : |x_i + v - x_k| <= delta_ik}`` (ties collide)."""
    target = np.asarray(x[i], dtype=float) + np.asarray(v, dtype=float)
    return [k for k in range(len(x)) if k != i and geom.distance(target, x[k]) <= delta[i, k]]


class EventChainKernel(SourceKernel):
    """Discrete-time event-chain kernel for hard spheres on a torus.

    Stage 1 translates the active particle when no collision occurs.
    Otherwise a colliding particle ``j`` is drawn uniformly and becomes
    active with probability ``a(|I(x, v, i)| / |I(x, -v, j)|)``. With
    ``flip`` the velocity is negated afterwards, so the net moves are a
    free translation ``(x + v e_i, v, i)``, a transfer ``(x, v, j)`` and a
    bounce ``(x, -v, i)``.

    States are ``(x, v, i)`` tuples.
    """

    name = "event_chain"

    def __init__(self, delta, m: int, geometry: Torus, accept: AcceptanceFunction | None = None,
                 flip: bool = True):
        self.delta = radii_matrix(delta, m)
        self.m = m
        self.geom = geometry
        self.accept = accept or METROPOLIS
        self.flip = flip

    def _out(self, x, v, i):
        if self.flip:
            v = tuple(-c for c in v)
        return (x, v, i)

    def _run(self, src, state):
        x, v, i = state
        if not feasible(x, self.delta, self.geom):
            raise ValueError("infeasible configuration")
        I = collision_set(x, v, i, self.delta, self.geom)
        if not I:
            x2 = list(x)
            x2[i] = self.geom.wrap(np.asarray(x[i], dtype=float) + np.asarray(v, dtype=float))
            out = self._out(tuple(x2), tuple(-c for c in v), i)
            return KernelStepResult(out, True, 0.0, out, info={"stage": 1})
        j = I[src.categorical([1.0 / len(I)] * len(I))]
        mv = tuple(-c for c in v)
        I2 = collision_set(x, mv, j, self.delta, self.geom)
        lr = math.log(len(I)) - math.log(len(I2))
        if src.accept(self.accept.log(lr)):
            out = self._out(x, mv, j)
            return KernelStepResult(out, True, lr, out, info={"stage": 2, "I": len(I), "I_rev": len(I2)})
        out = self._out(x, v, i)
        return KernelStepResult(out, False, lr, info={"stage": 2, "I": len(I), "I_rev": len(I2)})


def event_chain_step(cfg: ParticleConfig, a: AcceptanceFunction, rng) -> tuple:
    kern = EventChainKernel(cfg.delta, cfg.m, cfg.geometry, a)
    return kern.step(rng, cfg.state()).state


class EventChainRefresh(SourceKernel):
    """Redraw the velocity from ``velocities`` and/or the active particle uniformly."""

    name = "event_chain_refresh"

    def __init__(self, m: int, velocities: Sequence[tuple] | None = None, weights=None,
                 refresh_active: bool = True):
        self.m = m
        self.velocities = None if velocities is None else [tuple(v) for v in velocities]
        if self.velocities is not None:
            w = np.ones(len(self.velocities)) if weights is None else np.asarray(weights, dtype=float)
            self.weights = w / w.sum()
        self.refresh_active = refresh_active

    def _run(self, src, state):
        x, v, i = state
        if self.velocities is not None:
            v = self.velocities[src.categorical(self.weights)]
        if self.refresh_active:
            i = src.categorical([1.0 / self.m] * self.m)
        out = (x, v, i)
        return KernelStepResult(out, True, 0.0, out)


# ---------------------------------------------------------------------------
# Soft potentials
# ---------------------------------------------------------------------------


def generalized_inverse(Gamma: Callable, u: float, lo: float = 0.0, hi: float = 1.0,
                        tol: float = 1e-14, max_iter: int = 200) -> float:
    """``inf{y >= lo : Gamma(y) >= u}`` for nondecreasing ``Gamma`` by bisection.

    ``hi`` is doubled until ``Gamma(hi) >= u``.
    """
    if Gamma(lo) >= u:
        return lo
    for _ in range(200):
        if Gamma(hi) >= u:
            break
        hi = lo + 2.0 * (hi - lo)
    else:
        raise ValueError(f"Gamma never reaches {u}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if Gamma(mid) >= u:
            hi = mid
        else:
            lo = mid
        if hi - lo <= tol * max(1.0, abs(hi)):
            break
    return hi


def soft_potential_slice(Gamma: Callable, rng: np.random.Generator, x, geometry: Torus,
                         Gamma_inv: Callable | None = None) -> np.ndarray:
    """Draw ``u_ij ~ Uniform(0, Gamma(|x_i - x_j|))`` and return ``delta_ij = Gamma^{-1}(u_ij)``."""
    m = len(x)
    D = np.zeros((m, m))
    for a in range(m):
        for b in range(a + 1, m):
            g = float(Gamma(geometry.distance(x[a], x[b])))
            u = rng.uniform(0.0, g)
            try:
                d = Gamma_inv(u) if Gamma_inv is not None else generalized_inverse(Gamma, u)
            except (ValueError, OverflowError) as exc:
                raise ValueError(f"cannot invert Gamma at {u}") from exc
            D[a, b] = D[b, a] = d
    return D

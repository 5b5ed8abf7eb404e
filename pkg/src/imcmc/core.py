"""Involutive Metropolis-Hastings building blocks.

A kernel is specified by a target embedding on an extended space, an
involution on that space and an acceptance function. This module provides
those three ingredients, the generic accept/reject step and the ways of
combining kernels (refreshment, cycles and mixtures).

Kernels share a small interface:

* ``step(rng, state)`` returns a :class:`KernelStepResult`.
* ``transitions(state)`` returns the exact list of ``(next_state, prob)``
  pairs when all randomness is finite. Kernels that cannot enumerate raise
  :class:`NotEnumerableError`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

NEG_INF = -math.inf


class DensityError(ValueError):
    """Raised when a log-density evaluates to NaN."""


class InvolutionError(ValueError):
    """Raised when a map fails the involution or Jacobian checks."""


class NotEnumerableError(NotImplementedError):
    """Raised by kernels whose randomness cannot be enumerated exactly."""


# ---------------------------------------------------------------------------
# Random number streams
# ---------------------------------------------------------------------------


def _zigzag(k: int) -> int:
    # Map an integer in Z to a non-negative key.
    return 2 * k if k >= 0 else -2 * k - 1


def make_rng(seed: int | None) -> np.random.Generator:
    """Generator seeded from a 64-bit integer."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *keys)``.

    Keys may be negative, which is convenient for two-sided sequences.
    The same keys always yield the same stream, whatever order streams
    are requested in.
    """
    key = tuple(_zigzag(int(k)) for k in keys)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def fresh_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit integer seed from ``rng``."""
    return int(rng.integers(0, 2**63 - 1))


# ---------------------------------------------------------------------------
# Densities, involutions and acceptance functions
# ---------------------------------------------------------------------------


class LogDensity:
    """Log-density of a measure with respect to a declared reference.

    Args:
        fn: Callable returning ``log rho(xi)``; ``-inf`` marks points
            outside the support.
        reference: Free-form description of the reference measure, e.g.
            ``"lebesgue"`` or ``"counting"``.
    """

    def __init__(self, fn: Callable[[Any], float], reference: str = "lebesgue"):
        if isinstance(fn, LogDensity):
            fn = fn.fn
        self.fn = fn
        self.reference = reference

    def __call__(self, xi) -> float:
        val = float(self.fn(xi))
        if math.isnan(val):
            raise DensityError(f"log-density returned NaN at {xi!r}")
        return val

    def in_support(self, xi) -> bool:
        return self(xi) > NEG_INF


def as_log_density(fn, reference: str = "lebesgue") -> LogDensity:
    return fn if isinstance(fn, LogDensity) else LogDensity(fn, reference)


def _zero_log_jacobian(xi) -> float:
    return 0.0


class InvolutionMap:
    """Self-inverse map with its log-Jacobian correction.

    Args:
        apply: The map ``phi``.
        log_jacobian: ``c(xi) = log (d lambda^phi / d lambda)(xi)``. ``None``
            declares that ``phi`` preserves the reference measure.
        name: Label used in reports.
        debug: Verify ``phi(phi(xi)) == xi`` and Jacobian reciprocity on
            every call. Doubles the cost of each evaluation.
    """

    def __init__(
        self,
        apply: Callable[[Any], Any],
        log_jacobian: Callable[[Any], float] | None = None,
        name: str = "phi",
        debug: bool = False,
        atol: float = 1e-9,
    ):
        self._apply = apply
        self.lambda_invariant = log_jacobian is None
        self._log_jacobian = _zero_log_jacobian if log_jacobian is None else log_jacobian
        self.name = name
        self.debug = debug
        self.atol = atol

    def __call__(self, xi):
        out = self._apply(xi)
        if self.debug:
            back = self._apply(out)
            if state_distance(back, xi) > self.atol:
                raise InvolutionError(f"{self.name}: phi(phi(xi)) != xi at {xi!r}")
            c = self._log_jacobian(xi) + self._log_jacobian(out)
            if abs(c) > self.atol:
                raise InvolutionError(f"{self.name}: Jacobians not reciprocal at {xi!r}")
        return out

    def log_jacobian(self, xi) -> float:
        return float(self._log_jacobian(xi))

    def check(self, points: Iterable) -> tuple[float, float]:
        """Return the worst ``|phi(phi(xi)) - xi|`` and ``|c(xi) + c(phi(xi))|``."""
        worst_map = 0.0
        worst_jac = 0.0
        for xi in points:
            out = self._apply(xi)
            worst_map = max(worst_map, state_distance(self._apply(out), xi))
            worst_jac = max(
                worst_jac, abs(self._log_jacobian(xi) + self._log_jacobian(out))
            )
        return worst_map, worst_jac


def state_distance(a, b) -> float:
    """Sup-norm distance between two (possibly nested) states."""
    if isinstance(a, (tuple, list)):
        if not isinstance(b, (tuple, list)) or len(a) != len(b):
            return math.inf
        return max((state_distance(x, y) for x, y in zip(a, b)), default=0.0)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        return math.inf
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))


def identity_involution() -> InvolutionMap:
    return InvolutionMap(lambda xi: xi, name="identity")


class AcceptanceFunction:
    """Acceptance function ``a`` with ``a(0) = 0`` and ``a(r) = r a(1/r)``.

    Evaluation works in the log domain: :meth:`log` maps ``log r`` to
    ``log a(r)``.
    """

    def __init__(self, log_fn: Callable[[float], float], variant: str = "custom"):
        self._log_fn = log_fn
        self.variant = variant

    def log(self, log_r: float) -> float:
        if log_r == NEG_INF:
            return NEG_INF
        if math.isnan(log_r):
            raise DensityError("acceptance ratio is NaN")
        return self._log_fn(log_r)

    def __call__(self, r: float) -> float:
        if r <= 0.0:
            return 0.0
        return math.exp(self.log(math.log(r)))

    def prob(self, log_r: float) -> float:
        return math.exp(self.log(log_r))

    def __repr__(self) -> str:
        return f"AcceptanceFunction({self.variant!r})"


def _log_metropolis(log_r: float) -> float:
    return min(0.0, log_r)


def _log_barker(log_r: float) -> float:
    # log(r / (1 + r)) = -log(1 + 1/r)
    return -float(np.logaddexp(0.0, -log_r))


def make_acceptance(variant: str = "metropolis") -> AcceptanceFunction:
    """Return the ``metropolis`` (``1 ^ r``) or ``barker`` (``r/(1+r)``) rule."""
    if variant == "metropolis":
        return AcceptanceFunction(_log_metropolis, "metropolis")
    if variant == "barker":
        return AcceptanceFunction(_log_barker, "barker")
    raise ValueError(f"unknown acceptance variant {variant!r}")


METROPOLIS = make_acceptance("metropolis")
BARKER = make_acceptance("barker")


def log_acceptance_ratio(rho: Callable, phi: InvolutionMap, xi) -> float:
    """``log r(xi)`` with ``r = (rho o phi / rho) * d lambda^phi / d lambda``.

    Returns ``-inf`` when ``xi`` or ``phi(xi)`` lies outside the support.
    """
    lp = _checked(rho, xi)
    if lp == NEG_INF:
        return NEG_INF
    lp_new = _checked(rho, phi(xi))
    if lp_new == NEG_INF:
        return NEG_INF
    return lp_new - lp + phi.log_jacobian(xi)


def _checked(rho: Callable, xi) -> float:
    val = float(rho(xi))
    if math.isnan(val):
        raise DensityError(f"log-density returned NaN at {xi!r}")
    return val


def accept_draw(rng: np.random.Generator, log_alpha: float) -> bool:
    """Consume one uniform and return ``log U < log alpha``."""
    u = rng.random()
    if log_alpha == NEG_INF:
        return False
    if log_alpha >= 0.0:
        return True
    return math.log(u) < log_alpha if u > 0.0 else True


# ---------------------------------------------------------------------------
# Auxiliary conditionals and kernels
# ---------------------------------------------------------------------------


@dataclass
class AuxiliaryConditional:
    """Law of the instrumental variables given the state of interest.

    Args:
        sample: ``(rng, xi0) -> xi`` returning the full extended state
            ``xi = (xi0, xi_{-0})``.
        enumerate: Optional ``xi0 -> [(xi, prob), ...]`` for finite laws.
        project: ``xi -> xi0``; defaults to the first coordinate.
    """

    sample: Callable[[np.random.Generator, Any], Any]
    enumerate: Callable[[Any], list] | None = None
    project: Callable[[Any], Any] = field(default=lambda xi: xi[0])


@dataclass
class KernelStepResult:
    """Outcome of one kernel step.

    Attributes:
        state: Next state of the chain.
        accepted: Whether the proposal was accepted.
        log_ratio: Log acceptance ratio of the step (``-inf`` off support).
        proposal: Proposed extended state, when meaningful.
        flipped: True when a rejection returned the flipped state of a
            skew-reversible kernel.
        info: Kernel specific diagnostics.
    """

    state: Any
    accepted: bool
    log_ratio: float
    proposal: Any = None
    flipped: bool = False
    info: dict = field(default_factory=dict)


class Kernel:
    """Base class for Markov kernels."""

    name = "kernel"

    def step(self, rng: np.random.Generator, state) -> KernelStepResult:
        raise NotImplementedError

    def transitions(self, state) -> list[tuple[Any, float]]:
        raise NotEnumerableError(f"{type(self).__name__} cannot enumerate transitions")

    def run(self, rng: np.random.Generator, state, n: int):
        """Run ``n`` steps, returning the list of step results."""
        out = []
        for _ in range(n):
            res = self.step(rng, state)
            state = res.state
            out.append(res)
        return out


class InvolutiveMHKernel(Kernel):
    """Generic involutive MH kernel on the state of interest.

    Draws the auxiliary variables, applies the involution and accepts the
    projected image with probability ``a(r)``. The induced kernel is
    reversible with respect to the marginal of ``rho``.

    Args:
        aux: Auxiliary conditional building the extended state.
        rho: Log-density on the extended space.
        phi: Involution on the extended space.
        accept: Acceptance function, metropolis by default.
    """

    name = "involutive_mh"

    def __init__(
        self,
        aux: AuxiliaryConditional,
        rho: Callable,
        phi: InvolutionMap,
        accept: AcceptanceFunction | None = None,
    ):
        self.aux = aux
        self.rho = rho
        self.phi = phi
        self.accept = accept or METROPOLIS

    def log_ratio(self, xi) -> float:
        """Log acceptance ratio at the extended state ``xi``."""
        return log_acceptance_ratio(self.rho, self.phi, xi)

    def step(self, rng, state) -> KernelStepResult:
        xi = self.aux.sample(rng, state)
        prop = self.phi(xi)
        log_r = log_acceptance_ratio(self.rho, self.phi, xi)
        log_alpha = self.accept.log(log_r)
        if accept_draw(rng, log_alpha):
            return KernelStepResult(self.aux.project(prop), True, log_r, prop)
        return KernelStepResult(state, False, log_r, prop)

    def transitions(self, state):
        if self.aux.enumerate is None:
            raise NotEnumerableError("auxiliary conditional is not enumerable")
        out = []
        for xi, p in self.aux.enumerate(state):
            if p == 0.0:
                continue
            alpha = self.accept.prob(log_acceptance_ratio(self.rho, self.phi, xi))
            out.append((self.aux.project(self.phi(xi)), p * alpha))
            out.append((state, p * (1.0 - alpha)))
        return out


def involutive_mh_step(aux, rho, phi, a, rng, xi0) -> KernelStepResult:
    """One step of the involutive MH kernel (functional form)."""
    return InvolutiveMHKernel(aux, rho, phi, a).step(rng, xi0)


# ---------------------------------------------------------------------------
# Involution constructors
# ---------------------------------------------------------------------------


def extend_to_involution(
    forward: Callable,
    inverse: Callable,
    forward_log_jac: Callable | None = None,
    inverse_log_jac: Callable | None = None,
    check_points: Sequence | None = None,
    atol: float = 1e-9,
) -> InvolutionMap:
    """Turn an invertible map into an involution on ``E x {-1, +1}``.

    The returned map is ``(xi, v) -> (f^v(xi), -v)``; its companion
    auxiliary law puts mass 1/2 on each direction (see
    :func:`direction_coin`).

    Args:
        forward: The map ``f``.
        inverse: Its inverse ``f^{-1}``.
        forward_log_jac: ``log |det f'(xi)|``; ``None`` for unit Jacobian.
        inverse_log_jac: ``log |det (f^{-1})'(xi)|``.
        check_points: Points on which consistency of the two maps and of
            their Jacobians is verified at construction.

    Raises:
        InvolutionError: if ``c_fwd(xi) + c_inv(f(xi)) != 0`` on a check point.
    """
    fj = forward_log_jac or _zero_log_jacobian
    ij = inverse_log_jac or _zero_log_jacobian
    if check_points is not None:
        for xi in check_points:
            y = forward(xi)
            if state_distance(inverse(y), xi) > atol:
                raise InvolutionError("inverse(forward(xi)) != xi")
            if abs(fj(xi) + ij(y)) > atol:
                raise InvolutionError("forward and inverse Jacobians are inconsistent")

    def apply(xv):
        xi, v = xv
        return (forward(xi), -1) if v == 1 else (inverse(xi), 1)

    def log_jac(xv):
        xi, v = xv
        return fj(xi) if v == 1 else ij(xi)

    both_none = forward_log_jac is None and inverse_log_jac is None
    return InvolutionMap(apply, None if both_none else log_jac, name="extended")


def direction_coin() -> AuxiliaryConditional:
    """Fair coin on ``v`` companion to :func:`extend_to_involution`."""
    return AuxiliaryConditional(
        sample=lambda rng, xi0: (xi0, 1 if rng.random() < 0.5 else -1),
        enumerate=lambda xi0: [((xi0, 1), 0.5), ((xi0, -1), 0.5)],
    )


def counting_lebesgue_jacobian(
    f_log_jac: Callable[[Any, Any], float],
    g: Callable[[Any], Any] | None = None,
) -> Callable[[tuple], float]:
    """Log-Jacobian of ``phi(x, y) = (f_y(x), g(y))`` on Lebesgue x counting.

    The discrete part contributes nothing since counting measure is
    invariant under bijections; ``g`` is accepted for documentation only.
    """

    def log_jac(xy) -> float:
        x, y = xy
        return float(f_log_jac(x, y))

    return log_jac


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------


class RefreshKernel(Kernel):
    """Redraw the instrumental variables of an extended state.

    Keeps ``xi0 = aux.project(xi)`` and resamples ``xi_{-0}`` from its
    conditional, so it leaves the extended target invariant.
    """

    name = "refresh"

    def __init__(self, aux: AuxiliaryConditional):
        self.aux = aux

    def step(self, rng, state) -> KernelStepResult:
        xi = self.aux.sample(rng, self.aux.project(state))
        return KernelStepResult(xi, True, 0.0, xi)

    def transitions(self, state):
        if self.aux.enumerate is None:
            raise NotEnumerableError("auxiliary conditional is not enumerable")
        return list(self.aux.enumerate(self.aux.project(state)))


def refresh_kernel(aux: AuxiliaryConditional) -> RefreshKernel:
    return RefreshKernel(aux)


class FunctionKernel(Kernel):
    """Deterministic kernel ``xi -> f(xi)``, e.g. a velocity flip."""

    def __init__(self, fn: Callable, name: str = "map"):
        self.fn = fn
        self.name = name

    def step(self, rng, state):
        return KernelStepResult(self.fn(state), True, 0.0)

    def transitions(self, state):
        return [(self.fn(state), 1.0)]


class CycleKernel(Kernel):
    """Apply kernels in sequence; the result reports the last component."""

    name = "cycle"

    def __init__(self, kernels: Sequence[Kernel]):
        if not kernels:
            raise ValueError("cycle needs at least one kernel")
        self.kernels = list(kernels)

    def step(self, rng, state):
        res = None
        infos = []
        for k in self.kernels:
            res = k.step(rng, state)
            state = res.state
            infos.append(res)
        assert res is not None
        return KernelStepResult(
            state, res.accepted, res.log_ratio, res.proposal, res.flipped,
            {"components": infos},
        )

    def transitions(self, state):
        dist = {_key(state): (state, 1.0)}
        for k in self.kernels:
            nxt: dict = {}
            for s, p in dist.values():
                for t, q in k.transitions(s):
                    if q == 0.0:
                        continue
                    key = _key(t)
                    prev = nxt.get(key)
                    nxt[key] = (t, (prev[1] if prev else 0.0) + p * q)
            dist = nxt
        return list(dist.values())


class MixtureKernel(Kernel):
    """Pick one component kernel at random with the given weights."""

    name = "mixture"

    def __init__(self, kernels: Sequence[Kernel], weights: Sequence[float]):
        if not kernels:
            raise ValueError("mixture needs at least one kernel")
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(kernels),) or np.any(w < 0) or abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        self.kernels = list(kernels)
        self.weights = w

    def step(self, rng, state):
        idx = int(rng.choice(len(self.kernels), p=self.weights))
        res = self.kernels[idx].step(rng, state)
        res.info["component"] = idx
        return res

    def transitions(self, state):
        out = []
        for k, w in zip(self.kernels, self.weights):
            if w == 0.0:
                continue
            out.extend((t, w * p) for t, p in k.transitions(state))
        return out


def compose_cycle(*kernels: Kernel) -> CycleKernel:
    return CycleKernel(kernels)


def mix(kernels: Sequence[Kernel], weights: Sequence[float]) -> MixtureKernel:
    return MixtureKernel(kernels, weights)


def _key(state):
    """Hashable key for a state (arrays become tuples)."""
    if isinstance(state, np.ndarray):
        return tuple(state.tolist())
    if isinstance(state, (tuple, list)):
        return tuple(_key(s) for s in state)
    return state


state_key = _key


# ---------------------------------------------------------------------------
# Path enumeration by replay
# ---------------------------------------------------------------------------


class RandomSource:
    """Source of the random choices made inside a kernel step.

    Kernels written against this interface can be sampled (with
    :class:`RngSource`) or enumerated exactly (with
    :func:`enumerate_outcomes`) from the same code path.
    """

    def categorical(self, probs) -> int:
        raise NotImplementedError

    def draw(self, sampler: Callable, law: Callable | None, *args):
        """Draw from ``sampler(rng, *args)`` or branch over ``law(*args)``."""
        raise NotImplementedError

    def accept(self, log_alpha: float) -> bool:
        raise NotImplementedError


class RngSource(RandomSource):
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def categorical(self, probs) -> int:
        p = np.asarray(probs, dtype=float)
        return int(np.searchsorted(np.cumsum(p), self.rng.random() * math.fsum(p), side="right"))

    def draw(self, sampler, law, *args):
        return sampler(self.rng, *args)

    def accept(self, log_alpha: float) -> bool:
        return accept_draw(self.rng, log_alpha)


class _Branch(Exception):
    def __init__(self, probs, values=None):
        self.probs = probs
        self.values = values


class _ReplaySource(RandomSource):
    def __init__(self, prefix: list):
        self.prefix = prefix
        self.pos = 0
        self.prob = 1.0

    def _take(self, probs, values=None):
        if self.pos == len(self.prefix):
            raise _Branch(probs, values)
        i = self.prefix[self.pos]
        self.pos += 1
        self.prob *= probs[i]
        return i

    def categorical(self, probs) -> int:
        return self._take([float(p) for p in probs])

    def draw(self, sampler, law, *args):
        if law is None:
            raise NotEnumerableError("draw without a finite law")
        pairs = [(v, float(p)) for v, p in law(*args) if p > 0]
        i = self._take([p for _, p in pairs], [v for v, _ in pairs])
        return pairs[i][0]

    def accept(self, log_alpha: float) -> bool:
        a = 0.0 if log_alpha == NEG_INF else math.exp(min(0.0, log_alpha))
        return self._take([a, 1.0 - a]) == 0


def enumerate_outcomes(fn: Callable[[RandomSource], Any], max_paths: int = 10**6) -> list[tuple[Any, float]]:
    """All outcomes of ``fn`` with their path probabilities.

    ``fn`` is re-run from scratch for every path; zero-probability branches
    are pruned.
    """
    out = []
    stack: list[list[int]] = [[]]
    while stack:
        prefix = stack.pop()
        src = _ReplaySource(prefix)
        try:
            val = fn(src)
        except _Branch as br:
            for i, p in enumerate(br.probs):
                if p > 0.0:
                    stack.append(prefix + [i])
            continue
        out.append((val, src.prob))
        if len(out) > max_paths:
            raise NotEnumerableError(f"more than {max_paths} paths")
    return out


class SourceKernel(Kernel):
    """Kernel whose step is written against a :class:`RandomSource`.

    Subclasses implement ``_run(src, state) -> KernelStepResult``.
    """

    def _run(self, src: RandomSource, state) -> KernelStepResult:
        raise NotImplementedError

    def step(self, rng, state):
        return self._run(RngSource(rng), state)

    def transitions(self, state):
        return [(res.state, p) for res, p in enumerate_outcomes(lambda src: self._run(src, state))]

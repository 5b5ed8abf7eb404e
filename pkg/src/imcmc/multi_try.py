"""Multiple-try Metropolis and related kernels.

Standard MTM, MTM with stopping times for the number of candidates, the
pseudo-marginal MTM and the one-hit kernel. Candidate sequences use
1-based positions as in the usual MTM presentation; position 1 of the
reverse sequence holds the current state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
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
)
from .kernels_classic import ProposalKernel

logger = logging.getLogger(__name__)


def _lse(x) -> float:
    x = np.asarray(x, dtype=float)
    finite = x[np.isfinite(x)]
    if finite.size == 0:
        return NEG_INF
    m = float(finite.max())
    return m + math.log(math.fsum(np.exp(finite - m).tolist()))


def _normalise(log_w) -> np.ndarray:
    lz = _lse(log_w)
    if lz == NEG_INF:
        return np.zeros(len(log_w))
    return np.exp(np.asarray(log_w, dtype=float) - lz)


@dataclass
class WeightFunction:
    """Weight ``w(z, z')`` on the log scale."""

    log_w: Callable[[Any, Any], float]

    def __call__(self, z, zp) -> float:
        return math.exp(self.log_w(z, zp))

    @classmethod
    def from_lambda(cls, log_pi: Callable, q: ProposalKernel, log_lam: Callable) -> "WeightFunction":
        """``w(z, z') = pi(z) q(z, z') lam(z, z')`` with ``lam`` symmetric."""

        def lw(z, zp):
            a = float(log_pi(z))
            if a == NEG_INF:
                return NEG_INF
            return a + float(q.log_density(z, zp)) + float(log_lam(z, zp))

        return cls(lw)

    @classmethod
    def inverse_q(cls, log_pi: Callable, q: ProposalKernel) -> "WeightFunction":
        """``lam = 1 / (q(z, z') q(z', z))``, i.e. ``w(z, z') = pi(z) / q(z', z)``."""
        return cls.from_lambda(log_pi, q, lambda z, zp: -float(q.log_density(z, zp)) - float(q.log_density(zp, z)))

    @classmethod
    def target(cls, log_pi: Callable) -> "WeightFunction":
        """``w(z, z') = pi(z)``."""
        return cls(lambda z, zp: float(log_pi(z)))


# ---------------------------------------------------------------------------
# Standard MTM
# ---------------------------------------------------------------------------


class MTMKernel(SourceKernel):
    """Multiple-try Metropolis with ``n`` forward and ``n - 1`` reverse candidates.

    The selection law is ``varsigma(l; z, Z2) ∝ w(z_{2,l}, z)`` and the
    acceptance ratio uses the general form
    ``pi(z2l) q(z2l, z1k) varsigma(k; z2l, Z1) / (pi(z1k) q(z1k, z2l) varsigma(l; z1k, Z2))``.
    """

    name = "mtm"

    def __init__(self, log_pi: Callable, q: ProposalKernel, n: int, w: WeightFunction | None = None,
                 accept: AcceptanceFunction | None = None):
        if n < 1:
            raise ValueError("n must be at least 1")
        if q.log_density is None:
            raise ValueError("MTM needs the proposal density")
        self.log_pi = log_pi
        self.q = q
        self.n = int(n)
        self.w = w or WeightFunction.inverse_q(log_pi, q)
        self.accept = accept or METROPOLIS

    def _select_logw(self, anchor, cands):
        return np.array([self.w.log_w(c, anchor) for c in cands])

    def log_ratio(self, Z1, Z2, k, l) -> float:
        """General-selection log ratio at 0-based positions ``k``, ``l``."""
        z, zp = Z1[k], Z2[l]
        lp = float(self.log_pi(zp))
        if lp == NEG_INF:
            return NEG_INF
        lf = self._select_logw(z, Z2)
        lr = self._select_logw(zp, Z1)
        log_s_f = lf[l] - _lse(lf)
        log_s_r = lr[k] - _lse(lr)
        num = lp + float(self.q.log_density(zp, z)) + log_s_r
        den = float(self.log_pi(z)) + float(self.q.log_density(z, zp)) + log_s_f
        return num - den

    def log_ratio_sums(self, Z1, Z2, k, l) -> float:
        """``log sum_i w(z2i, z1k) - log sum_i w(z1i, z2l)``; valid for ``w = pi q lam``."""
        return _lse([self.w.log_w(c, Z1[k]) for c in Z2]) - _lse([self.w.log_w(c, Z2[l]) for c in Z1])

    def _run(self, src: RandomSource, state) -> KernelStepResult:
        n = self.n
        k = src.categorical([1.0 / n] * n)
        Z2 = [src.draw(self.q.sample, self.q.enumerate, state) for _ in range(n)]
        lf = self._select_logw(state, Z2)
        if _lse(lf) == NEG_INF:
            src.accept(NEG_INF)
            return KernelStepResult(state, False, NEG_INF, info={"k": k})
        l = src.categorical(_normalise(lf))
        zp = Z2[l]
        Z1 = [None] * n
        Z1[k] = state
        for i in range(n):
            if i != k:
                Z1[i] = src.draw(self.q.sample, self.q.enumerate, zp)
        lr = self.log_ratio(Z1, Z2, k, l)
        info = {"k": k + 1, "l": l + 1}
        if src.accept(self.accept.log(lr)):
            return KernelStepResult(zp, True, lr, zp, info=info)
        return KernelStepResult(state, False, lr, zp, info=info)


def mtm_step(log_pi, q, w, n, rng, z) -> KernelStepResult:
    return MTMKernel(log_pi, q, n, w).step(rng, z)


# ---------------------------------------------------------------------------
# Stopping-time MTM
# ---------------------------------------------------------------------------


def sum_weight_stop(w: WeightFunction, c: float, cap: int = 1000) -> Callable:
    """``s_i(z, Z') = 1{sum_{j<=i} w(z, z'_j) >= c}``, forced once ``i >= cap``."""
    log_c = math.log(c)

    def s(i, z, seq):
        if i >= cap:
            return True
        return _lse([w.log_w(z, x) for x in seq[:i]]) >= log_c

    s.cap = cap
    return s


def frak_s(stop: Callable, n: int, z, seq) -> int:
    """``s_n(z, Z) prod_{i<n} (1 - s_i(z, Z))``."""
    if not stop(n, z, seq):
        return 0
    return int(not any(stop(i, z, seq) for i in range(1, n)))


class StoppingTimeMTMKernel(SourceKernel):
    """Locally adaptive MTM with stopped candidate sequences.

    Forward candidates are drawn until ``s_n(z, Z2)`` fires, ``l`` is
    selected on the first ``n - 1`` of them with ``varsigma ∝ w(z2l, z)``,
    reverse candidates (position 1 holding ``z``) are drawn from ``z2l``
    until ``s_m(z2l, Z1)`` fires and ``k`` is uniform on the first
    ``m - 1``. Steps with ``n = 1`` or ``m = 1`` leave ``z`` unchanged.

    The acceptance ratio is
    ``pi(z2l) q(z2l, z) varsigma(k; z2l, sigma_k Z1) (m - 1) /
    (pi(z) q(z, z2l) varsigma(l; z, Z2) (n - 1))``.
    """

    name = "st_mtm"

    def __init__(self, log_pi: Callable, q: ProposalKernel, w: WeightFunction, c: float,
                 cap: int = 1000, accept: AcceptanceFunction | None = None,
                 stop: Callable | None = None):
        self.log_pi = log_pi
        self.q = q
        self.w = w
        self.stop = stop or sum_weight_stop(w, c, cap)
        self.cap = cap
        self.accept = accept or METROPOLIS

    def _grow(self, src, anchor, seq, origin):
        i = 1
        while True:
            while len(seq) < i:
                seq.append(src.draw(self.q.sample, self.q.enumerate, origin))
            if self.stop(i, anchor, seq):
                if i >= self.cap:
                    logger.debug("stopping-time MTM reached the cap %d", self.cap)
                return i
            i += 1

    def _log_sel(self, anchor, seq, size, pos) -> float:
        lw = [self.w.log_w(x, anchor) for x in seq[:size]]
        return lw[pos] - _lse(lw)

    def log_ratio(self, z, Z1, Z2, m, n, k, l) -> float:
        """Log ratio at 0-based positions ``k < m - 1`` and ``l < n - 1``."""
        zp = Z2[l]
        lp = float(self.log_pi(zp))
        if lp == NEG_INF:
            return NEG_INF
        swapped = list(Z1)
        swapped[0], swapped[k] = swapped[k], swapped[0]
        num = lp + float(self.q.log_density(zp, z)) + self._log_sel(zp, swapped, m - 1, k) + math.log(m - 1)
        den = float(self.log_pi(z)) + float(self.q.log_density(z, zp)) + self._log_sel(z, Z2, n - 1, l) + math.log(n - 1)
        return num - den

    def _run(self, src, state):
        Z2: list = []
        n = self._grow(src, state, Z2, state)
        if n == 1:
            return KernelStepResult(state, False, NEG_INF, info={"n": 1})
        lw = [self.w.log_w(x, state) for x in Z2[: n - 1]]
        if _lse(lw) == NEG_INF:
            return KernelStepResult(state, False, NEG_INF, info={"n": n})
        l = src.categorical(_normalise(lw))
        zp = Z2[l]
        Z1 = [state]
        m = self._grow(src, zp, Z1, zp)
        if m == 1:
            return KernelStepResult(state, False, NEG_INF, zp, info={"n": n, "m": 1})
        k = src.categorical([1.0 / (m - 1)] * (m - 1))
        lr = self.log_ratio(state, Z1, Z2, m, n, k, l)
        info = {"n": n, "m": m, "k": k + 1, "l": l + 1}
        if src.accept(self.accept.log(lr)):
            return KernelStepResult(zp, True, lr, zp, info=info)
        return KernelStepResult(state, False, lr, zp, info=info)


def st_mtm_step(log_pi, q, w, c, rng, z, **kw) -> KernelStepResult:
    return StoppingTimeMTMKernel(log_pi, q, w, c, **kw).step(rng, z)


# ---------------------------------------------------------------------------
# Pseudo-marginal MTM
# ---------------------------------------------------------------------------


@dataclass
class EstimatorLaw:
    """Nonnegative unbiased estimator of ``pi(z)``.

    Attributes:
        sample: ``(rng, z) -> w`` with ``E[w] = pi(z)``.
        enumerate: Optional ``z -> [(w, prob), ...]``.
    """

    sample: Callable
    enumerate: Callable | None = None


def two_point_estimator(pi: Callable, spread: float = 0.5) -> EstimatorLaw:
    """``w = pi(z) (1 +- spread)`` with probability 1/2 each."""
    if not 0 <= spread <= 1:
        raise ValueError("spread must lie in [0, 1]")

    def sample(rng, z):
        return pi(z) * (1.0 + spread if rng.random() < 0.5 else 1.0 - spread)

    def enum(z):
        return [(pi(z) * (1.0 + spread), 0.5), (pi(z) * (1.0 - spread), 0.5)]

    return EstimatorLaw(sample, enum)


def bernoulli_estimator(pi: Callable) -> EstimatorLaw:
    """``w ~ Bernoulli(pi(z))`` for ``pi`` with values in ``[0, 1]``."""
    return EstimatorLaw(lambda rng, z: float(rng.random() < pi(z)),
                        lambda z: [(1.0, pi(z)), (0.0, 1.0 - pi(z))])


class PseudoMarginalMTMKernel(SourceKernel):
    """Pseudo-marginal MTM on states ``(z, w)``.

    Each step redraws the position ``k`` of the current estimate and the
    other ``n - 1`` estimates, proposes ``z' ~ Q(z, .)`` with ``n`` fresh
    estimates, selects ``l ∝ w'_l`` and accepts with
    ``p(z') q(z', z) sum w' / (p(z) q(z, z') sum w)``.

    Args:
        log_p: Log-density of the base measure ``nu``.
        q: Proposal on ``z``.
        estimator: Unbiased estimator law of the density of ``pi`` w.r.t. ``nu``.
        n: Number of estimates per point.
    """

    name = "pm_mtm"

    def __init__(self, log_p: Callable, q: ProposalKernel, estimator: EstimatorLaw, n: int,
                 accept: AcceptanceFunction | None = None):
        if n < 1:
            raise ValueError("n must be at least 1")
        self.log_p = log_p
        self.q = q
        self.est = estimator
        self.n = int(n)
        self.accept = accept or METROPOLIS

    def log_ratio(self, z, zp, W, Wp) -> float:
        sp = math.fsum(Wp)
        if sp <= 0:
            return NEG_INF
        lq = (0.0 if self.q.symmetric else float(self.q.log_density(zp, z)) - float(self.q.log_density(z, zp)))
        return float(self.log_p(zp)) - float(self.log_p(z)) + lq + math.log(sp) - math.log(math.fsum(W))

    def _run(self, src, state):
        z, wk = state
        n = self.n
        k = src.categorical([1.0 / n] * n)
        W = [wk if i == k else src.draw(self.est.sample, self.est.enumerate, z) for i in range(n)]
        if math.fsum(W) <= 0:
            raise DensityError(f"all estimates vanish at {z!r}")
        zp = src.draw(self.q.sample, self.q.enumerate, z)
        Wp = [src.draw(self.est.sample, self.est.enumerate, zp) for _ in range(n)]
        lr = self.log_ratio(z, zp, W, Wp)
        if lr == NEG_INF:
            src.accept(NEG_INF)
            return KernelStepResult(state, False, lr, info={"k": k + 1})
        l = src.categorical(np.asarray(Wp) / math.fsum(Wp))
        new = (zp, Wp[l])
        info = {"k": k + 1, "l": l + 1}
        if src.accept(self.accept.log(lr)):
            return KernelStepResult(new, True, lr, new, info=info)
        return KernelStepResult(state, False, lr, new, info=info)


def pm_mtm_step(log_p, q, estimator, n, rng, state) -> KernelStepResult:
    return PseudoMarginalMTMKernel(log_p, q, estimator, n).step(rng, state)


# ---------------------------------------------------------------------------
# One-hit kernel
# ---------------------------------------------------------------------------


def one_hit_tau(W: Sequence[int], Wp: Sequence[int]) -> int | None:
    """First ``n`` with ``sum_{i<=n} w_i + sum_{i<=n} w'_i >= 2``."""
    total = 0
    for n, (a, b) in enumerate(zip(W, Wp), start=1):
        total += a + b
        if total >= 2:
            return n
    return None


def one_hit_indicator(W: Sequence[int], Wp: Sequence[int]) -> bool:
    """Closed-form ``1{w_1 = w'_n = 1, tau = tau∘phi = n}`` on stopped streams.

    ``W`` and ``Wp`` hold the first ``tau`` values of both streams.
    """
    n = len(W)
    if W[0] != 1 or Wp[n - 1] != 1:
        return False
    return n == 1 or W[n - 1] == 0


class OneHitKernel(SourceKernel):
    """One-hit kernel for a target ``p(z) f(z)`` with ``f`` in ``[0, 1]``.

    Only Bernoulli(``f``) draws are available. The current point carries
    ``w_1 = 1``; further draws for ``z`` and ``z'`` run in pairs until one
    more hit. The move is eligible when the stopping hit came from the
    ``z'`` stream alone (or at the first pair) and is then accepted with
    the ratio ``p(z') q(z', z) / (p(z) q(z, z'))``.

    Args:
        log_p: Log-density of the base measure.
        q: Proposal.
        success: ``z -> f(z)`` success probability.
        cap: Maximum number of paired draws; reaching it rejects.
    """

    name = "one_hit"

    def __init__(self, log_p: Callable, q: ProposalKernel, success: Callable, cap: int = 10**6,
                 accept: AcceptanceFunction | None = None):
        self.log_p = log_p
        self.q = q
        self.success = success
        self.cap = int(cap)
        self.accept = accept or METROPOLIS

    def base_log_ratio(self, z, zp) -> float:
        lq = 0.0 if self.q.symmetric else float(self.q.log_density(zp, z)) - float(self.q.log_density(z, zp))
        return float(self.log_p(zp)) - float(self.log_p(z)) + lq

    def streams(self, rng, z, zp):
        """Draw both streams up to the stopping time (or the cap)."""
        f, fp = self.success(z), self.success(zp)
        W, Wp = [1], []
        n = 0
        while n < self.cap:
            n += 1
            if n > 1:
                W.append(int(rng.random() < f))
            Wp.append(int(rng.random() < fp))
            if one_hit_tau(W, Wp) == n:
                return W, Wp
        return None, None

    def step(self, rng, state):
        zp = self.q.sample(rng, state)
        W, Wp = self.streams(rng, state, zp)
        if W is None:
            logger.warning("one-hit kernel reached the cap of %d paired draws", self.cap)
            rng.random()
            return KernelStepResult(state, False, NEG_INF, zp, info={"tau": None})
        ok = one_hit_indicator(W, Wp)
        lr = self.base_log_ratio(state, zp) if ok else NEG_INF
        info = {"tau": len(W), "eligible": ok}
        if accept_draw(rng, self.accept.log(lr)):
            return KernelStepResult(zp, True, lr, zp, info=info)
        return KernelStepResult(state, False, lr, zp, info=info)

    def eligible_probability(self, z, zp) -> float:
        """Probability that the stopping hit makes the move eligible.

        Sums the geometric series over ``tau``: ``f' / (f + f' - f f')``.
        """
        f, fp = self.success(z), self.success(zp)
        den = f + fp - f * fp
        if den <= 0:
            return 0.0
        return fp / den

    def transitions(self, state):
        if self.q.enumerate is None:
            raise NotEnumerableError("one-hit enumeration needs a finite proposal")
        out = []
        for zp, pq in self.q.enumerate(state):
            e = self.eligible_probability(state, zp)
            a = self.accept.prob(self.base_log_ratio(state, zp)) if e > 0 else 0.0
            out.append((zp, pq * e * a))
            out.append((state, pq * (1.0 - e * a)))
        return out


def one_hit_step(log_p, q, success, cap, rng, z) -> KernelStepResult:
    return OneHitKernel(log_p, q, success, cap).step(rng, z)

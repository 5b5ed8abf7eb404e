"""Proposals built from lazily simulated, stopped Markov chains.

Covers the adaptive independent MH kernel with a stopping rule, kernels
selecting a state from a window of a two-sided chain (fixed, stopping-time
and coinciding windows) and the NUTS-like doubling kernel. Chains are
simulated lazily with per-index random substreams, so extending, shifting
or re-reading a chain never changes realized states.

Indices follow the zero-based convention: ``z_0`` is the current state.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from collections import abc
from typing import Any, Callable, Sequence

import numpy as np

from .core import (
    METROPOLIS,
    NEG_INF,
    AcceptanceFunction,
    Kernel,
    InvolutionMap,
    KernelStepResult,
    NotEnumerableError,
    accept_draw,
    fresh_seed,
    substream,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Selection laws
# ---------------------------------------------------------------------------


def log_sum(logits: np.ndarray) -> float:
    """Order-independent ``log sum exp`` (correctly rounded inner sum)."""
    finite = logits[np.isfinite(logits)]
    if finite.size == 0:
        return NEG_INF
    m = float(finite.max())
    return m + math.log(math.fsum(np.exp(finite - m).tolist()))


class SelectionLaw:
    """Categorical law over the positions of a window.

    Subclasses implement :meth:`logits`, the unnormalised log masses given
    the log weights of the window and the position of the anchor (the
    current state). When every logit is ``-inf`` the law falls back to a
    point mass on the anchor.
    """

    name = "selection"

    def logits(self, log_w: np.ndarray, anchor: int) -> np.ndarray:
        raise NotImplementedError

    def parts(self, log_w: np.ndarray, anchor: int) -> tuple[np.ndarray, float]:
        lg = self.logits(np.asarray(log_w, dtype=float), anchor)
        lz = log_sum(lg)
        if lz == NEG_INF:
            lg = np.full(lg.shape, NEG_INF)
            lg[anchor] = 0.0
            lz = 0.0
        return lg, lz

    def log_probs(self, log_w, anchor: int) -> np.ndarray:
        lg, lz = self.parts(log_w, anchor)
        return lg - lz

    def probs(self, log_w, anchor: int) -> np.ndarray:
        return np.exp(self.log_probs(log_w, anchor))

    def sample(self, rng: np.random.Generator, log_w, anchor: int) -> int:
        """Gumbel-max draw of a position."""
        lg, _ = self.parts(log_w, anchor)
        g = lg + rng.gumbel(size=lg.shape)
        return int(np.argmax(g))


class ProportionalSelection(SelectionLaw):
    """``P(k) ∝ w_k``, optionally excluding the anchor."""

    def __init__(self, exclude_anchor: bool = False):
        self.exclude_anchor = exclude_anchor
        self.name = "proportional" + ("_excl" if exclude_anchor else "")

    def logits(self, log_w, anchor):
        lg = np.array(log_w, dtype=float)
        if self.exclude_anchor:
            lg[anchor] = NEG_INF
        return lg


class UniformSelection(SelectionLaw):
    """Uniform over positions with positive weight, optionally excluding the anchor."""

    def __init__(self, exclude_anchor: bool = False):
        self.exclude_anchor = exclude_anchor
        self.name = "uniform" + ("_excl" if exclude_anchor else "")

    def logits(self, log_w, anchor):
        lg = np.where(np.isfinite(log_w), 0.0, NEG_INF)
        if self.exclude_anchor:
            lg[anchor] = NEG_INF
        return lg


def _log_ratio_from_parts(lw_k: float, lw_0: float, fwd: tuple, rev: tuple) -> float:
    """``log [w_k s_rev] - log [w_0 s_fwd]`` computed symmetrically.

    Both sides are formed as ``(lw + logit) - logZ`` so that identical
    multisets of weights give exactly zero.
    """
    logit_f, lz_f = fwd
    logit_r, lz_r = rev
    if not (math.isfinite(lw_k) and math.isfinite(lw_0) and logit_f > NEG_INF and logit_r > NEG_INF):
        return NEG_INF
    num = (lw_k + logit_r) - lz_r
    den = (lw_0 + logit_f) - lz_f
    return num - den


# ---------------------------------------------------------------------------
# Stopping rules
# ---------------------------------------------------------------------------


@dataclass
class StopRule:
    """Stopping rule ``s_n`` evaluated on the states ``z_0..z_n``.

    Attributes:
        fn: ``(states, log_w) -> bool`` on the realized prefix or window.
        monotone: Declares ``n -> s_n`` nondecreasing.
        swap_invariant: Declares invariance under swaps inside the prefix.
        cap: ``s_n`` is forced to 1 once ``n >= cap``; part of the rule so
            the stopped process stays well defined.
    """

    fn: Callable[[Sequence, np.ndarray], bool]
    monotone: bool = False
    swap_invariant: bool = False
    cap: int = 1000
    name: str = "stop"

    def __call__(self, n: int, states: Sequence, log_w: np.ndarray) -> bool:
        if n >= self.cap:
            return True
        return bool(self.fn(states, log_w))


def sum_threshold_rule(c: float, cap: int = 1000) -> StopRule:
    """``s_n = 1{sum_{i<=n} w(z_i) > c}``; monotone and swap invariant."""
    log_c = math.log(c)

    def fn(states, log_w):
        return log_sum(np.asarray(log_w, dtype=float)) > log_c

    return StopRule(fn, True, True, cap, f"sum>{c}")


def ess_rule(c: float, cap: int = 1000) -> StopRule:
    """``s_n = 1{ESS(z_0..z_n) > c}`` with ``ESS = (sum w)^2 / sum w^2``."""

    def fn(states, log_w):
        lw = np.asarray(log_w, dtype=float)
        return 2.0 * log_sum(lw) - log_sum(2.0 * lw) > math.log(c)

    return StopRule(fn, False, True, cap, f"ess>{c}")


def constant_rule(value: bool = True, cap: int = 1000) -> StopRule:
    return StopRule(lambda s, w: value, True, True, cap, f"const{int(value)}")


def stopping_time(rule: StopRule, states: Sequence, log_w: np.ndarray) -> int | None:
    """First ``n >= 1`` with ``s_n = 1`` among realized states, or ``None``."""
    for n in range(1, len(states)):
        if rule(n, states[: n + 1], log_w[: n + 1]):
            return n
    return None


def check_stop_rule(rule: StopRule, trajectories: Sequence[tuple[Sequence, np.ndarray]]) -> dict:
    """Empirically test the conditions making ``tau`` swap invariant.

    For each trajectory checks (1) ``s_k`` nondecreasing in ``k``, (2)
    ``s_k(Z) = s_k(sigma_l Z)`` for ``1 <= l <= k`` and the conclusion
    ``tau(sigma_l Z) = tau(Z)`` for ``1 <= l < tau``.

    Returns:
        Dict with counts and the first counterexample for each property.
    """
    out = {"n": 0, "monotone_violations": 0, "swap_violations": 0, "tau_violations": 0,
           "monotone_witness": None, "swap_witness": None, "tau_witness": None}
    for states, log_w in trajectories:
        states = list(states)
        log_w = np.asarray(log_w, dtype=float)
        out["n"] += 1
        L = len(states) - 1
        s = [rule(k, states[: k + 1], log_w[: k + 1]) for k in range(1, L + 1)]
        if any(s[i] > s[i + 1] for i in range(len(s) - 1)):
            out["monotone_violations"] += 1
            out["monotone_witness"] = out["monotone_witness"] or (states, log_w.tolist())
        swap_bad = False
        for k in range(1, L + 1):
            for l in range(1, k + 1):
                sw, lw = _swap(states, log_w, l)
                if rule(k, sw[: k + 1], lw[: k + 1]) != s[k - 1]:
                    swap_bad = True
        if swap_bad:
            out["swap_violations"] += 1
            out["swap_witness"] = out["swap_witness"] or (states, log_w.tolist())
        tau = stopping_time(rule, states, log_w)
        if tau is None:
            continue
        for l in range(1, tau):
            sw, lw = _swap(states, log_w, l)
            if stopping_time(rule, sw, lw) != tau:
                out["tau_violations"] += 1
                out["tau_witness"] = out["tau_witness"] or (states, log_w.tolist(), l)
                break
    return out


def _swap(states, log_w, k):
    s = list(states)
    w = np.array(log_w, dtype=float)
    s[0], s[k] = s[k], s[0]
    w[0], w[k] = w[k], w[0]
    return s, w


# ---------------------------------------------------------------------------
# Adaptive independent MH
# ---------------------------------------------------------------------------


class AdaptiveIMHKernel(Kernel):
    """Independent MH with a stopped iid candidate stream.

    Draws ``z_1, z_2, ...`` iid from ``nu`` until ``s_n`` fires, selects
    ``k ~ varsigma(.; n, Z)``, swaps ``z_0`` and ``z_k``, recomputes the
    stopping time on the swapped sequence (drawing further candidates if
    needed) and accepts ``z_k`` with ratio
    ``w(z_k) varsigma(k; n', Z') / (w(z_0) varsigma(k; n, Z))``, where
    ``w = d pi / d nu``.

    Args:
        log_pi: Target log-density.
        log_nu: Proposal log-density.
        nu_sampler: ``rng -> z``.
        stop: Stopping rule (cap included).
        select: Selection law over the candidate positions.
        include_last: Support of ``varsigma`` is ``0..n`` when True and
            ``0..n-1`` otherwise.
        nu_enumerate: Finite law ``[(z, prob), ...]`` enabling enumeration.
    """

    name = "adaptive_imh"

    def __init__(self, log_pi, log_nu, nu_sampler, stop: StopRule, select: SelectionLaw,
                 include_last: bool = True, nu_enumerate: Sequence | None = None,
                 accept: AcceptanceFunction | None = None):
        self.log_pi = log_pi
        self.log_nu = log_nu
        self.nu_sampler = nu_sampler
        self.stop = stop
        self.select = select
        self.include_last = include_last
        self.nu_enumerate = None if nu_enumerate is None else list(nu_enumerate)
        self.accept = accept or METROPOLIS

    def log_w(self, z) -> float:
        lp = float(self.log_pi(z))
        if lp == NEG_INF:
            return NEG_INF
        return lp - float(self.log_nu(z))

    def _tau(self, states, lws, draw):
        i = 1
        while True:
            while len(states) <= i:
                z = draw()
                states.append(z)
                lws.append(self.log_w(z))
            if self.stop(i, states[: i + 1], np.asarray(lws[: i + 1])):
                return i
            i += 1

    def _support(self, n):
        return n + 1 if self.include_last else n

    def _evaluate(self, states, lws, k, n, draw):
        """Return ``(log_ratio, n')`` for the swap at ``k``."""
        m = self._support(n)
        fwd = self.select.parts(np.asarray(lws[:m]), 0)
        sw_states = list(states)
        sw_lws = list(lws)
        sw_states[0], sw_states[k] = sw_states[k], sw_states[0]
        sw_lws[0], sw_lws[k] = sw_lws[k], sw_lws[0]
        n2 = self._tau(sw_states, sw_lws, draw)
        # draws made while extending the swapped sequence are shared
        for j in range(len(states), len(sw_states)):
            states.append(sw_states[j])
            lws.append(sw_lws[j])
        m2 = self._support(n2)
        if k >= m2:
            return NEG_INF, n2
        rev = self.select.parts(np.asarray(sw_lws[:m2]), 0)
        lr = _log_ratio_from_parts(lws[k], lws[0], (fwd[0][k], fwd[1]), (rev[0][k], rev[1]))
        return lr, n2

    def step(self, rng, state):
        states = [state]
        lws = [self.log_w(state)]

        def draw():
            return self.nu_sampler(rng)

        n = self._tau(states, lws, draw)
        k = self.select.sample(rng, np.asarray(lws[: self._support(n)]), 0)
        if k == 0:
            accept_draw(rng, 0.0)
            return KernelStepResult(state, True, 0.0, state, info={"n": n, "k": 0, "n_prime": n})
        prop = states[k]
        lr, n2 = self._evaluate(states, lws, k, n, draw)
        if n >= self.stop.cap or n2 >= self.stop.cap:
            logger.debug("adaptive IMH reached the cap (n=%d, n'=%d)", n, n2)
        info = {"n": n, "k": k, "n_prime": n2}
        if accept_draw(rng, self.accept.log(lr)):
            return KernelStepResult(prop, True, lr, prop, info=info)
        return KernelStepResult(state, False, lr, prop, info=info)

    def transitions(self, state):
        if self.nu_enumerate is None:
            raise NotEnumerableError("adaptive IMH needs nu_enumerate")
        cap = self.stop.cap
        out = []
        lw0 = self.log_w(state)
        for combo in itertools.product(range(len(self.nu_enumerate)), repeat=cap):
            p = math.prod(self.nu_enumerate[c][1] for c in combo)
            if p == 0.0:
                continue
            states = [state] + [self.nu_enumerate[c][0] for c in combo]
            lws = [lw0] + [self.log_w(z) for z in states[1:]]

            def draw():
                raise RuntimeError("enumeration exhausted the candidate sequence")

            n = self._tau(states, lws, draw)
            probs = self.select.probs(np.asarray(lws[: self._support(n)]), 0)
            for k, pk in enumerate(probs):
                if pk == 0.0:
                    continue
                if k == 0:
                    out.append((state, p * pk))
                    continue
                lr, _ = self._evaluate(list(states), list(lws), k, n, draw)
                a = self.accept.prob(lr)
                out.append((states[k], p * pk * a))
                out.append((state, p * pk * (1.0 - a)))
        return out


def adaptive_imh_step(log_pi, log_nu, nu_sampler, stop, select, rng, z0, **kw) -> KernelStepResult:
    return AdaptiveIMHKernel(log_pi, log_nu, nu_sampler, stop, select, **kw).step(rng, z0)


# ---------------------------------------------------------------------------
# Two-sided chains
# ---------------------------------------------------------------------------


class ReversibleTriplet:
    """``(nu, Q, Q*)`` with ``nu(dz) Q(z, dz') = nu*(dz') Q*(z', dz)``.

    Args:
        forward: ``(rng, z) -> z'`` sampling ``Q``; ``rng`` is ``None`` for
            deterministic maps.
        backward: ``(rng, z) -> z'`` sampling ``Q*``.
        log_dnu_dnustar: ``z -> log (d nu / d nu*)(z)``; ``None`` when
            ``nu* = nu``.
        deterministic: True when both kernels are Dirac masses.
    """

    def __init__(self, forward: Callable, backward: Callable,
                 log_dnu_dnustar: Callable | None = None, deterministic: bool = False):
        self.forward = forward
        self.backward = backward
        self.log_dnu_dnustar = log_dnu_dnustar
        self.deterministic = deterministic

    @classmethod
    def from_map(cls, psi: Callable, psi_inv: Callable,
                 log_abs_det_psi_inv: Callable | None = None) -> "ReversibleTriplet":
        """Deterministic triplet from an invertible map.

        Args:
            log_abs_det_psi_inv: ``z -> log |det (psi^{-1})'(z)|``, i.e.
                ``log d nu^psi / d nu``; ``None`` for measure-preserving maps.
        """
        corr = None
        if log_abs_det_psi_inv is not None:
            def corr(z):
                return -float(log_abs_det_psi_inv(z))
        return cls(lambda rng, z: psi(z), lambda rng, z: psi_inv(z), corr, deterministic=True)


class ChainWindow(abc.Sequence):
    """Read-only view of ``chain[lo..hi]``; states are realized on access."""

    __slots__ = ("chain", "lo", "n")

    def __init__(self, chain, lo: int, hi: int):
        self.chain = chain
        self.lo = lo
        self.n = hi - lo + 1

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, j):
        if isinstance(j, slice):
            return [self[i] for i in range(*j.indices(self.n))]
        if j < 0:
            j += self.n
        if not 0 <= j < self.n:
            raise IndexError(j)
        return self.chain[self.lo + j]


class LazyChain:
    """Two-sided chain ``(z_i)_{i in Z}`` realized on demand.

    State ``i > 0`` is drawn from ``Q(z_{i-1}, .)`` with the substream keyed
    by ``(seed, i)``; state ``i < 0`` from ``Q*(z_{i+1}, .)`` keyed by
    ``(seed, i)``. Re-reading an index returns the stored state.
    """

    def __init__(self, z0, triplet: ReversibleTriplet, seed: int = 0,
                 log_w: Callable | None = None):
        self.triplet = triplet
        self.seed = int(seed)
        self.states: dict[int, Any] = {0: z0}
        self._log_w_fn = log_w
        self._log_w: dict[int, float] = {}
        self._log_corr: dict[int, float] = {}
        self.lo = 0
        self.hi = 0

    def _rng(self, i):
        return None if self.triplet.deterministic else substream(self.seed, i)

    def __getitem__(self, i: int):
        i = int(i)
        while i > self.hi:
            j = self.hi + 1
            self.states[j] = self.triplet.forward(self._rng(j), self.states[j - 1])
            self.hi = j
        while i < self.lo:
            j = self.lo - 1
            self.states[j] = self.triplet.backward(self._rng(j), self.states[j + 1])
            self.lo = j
        return self.states[i]

    def log_w(self, i: int) -> float:
        if i not in self._log_w:
            self._log_w[i] = float(self._log_w_fn(self[i]))
        return self._log_w[i]

    def _corr(self, i: int) -> float:
        if i not in self._log_corr:
            self._log_corr[i] = float(self.triplet.log_dnu_dnustar(self[i]))
        return self._log_corr[i]

    def log_F(self, k: int) -> float:
        """``log F_k``: change-of-measure factor for non-preserving triplets."""
        if k == 0 or self.triplet.log_dnu_dnustar is None:
            return 0.0
        if k > 0:
            return math.fsum(self._corr(i) for i in range(1, k + 1))
        return -math.fsum(self._corr(i) for i in range(k + 1, 1))

    def window_log_w(self, lo: int, hi: int) -> np.ndarray:
        """``log w(z_i) + log F_i`` for ``i`` in ``lo..hi`` (relative to index 0)."""
        if self.triplet.log_dnu_dnustar is None:
            return np.fromiter((self.log_w(i) for i in range(lo, hi + 1)), float, hi - lo + 1)
        return np.array([self.log_w(i) + self.log_F(i) for i in range(lo, hi + 1)])

    def window(self, lo: int, hi: int) -> ChainWindow:
        return ChainWindow(self, lo, hi)

    def shifted(self, k: int) -> "ShiftedChain":
        return ShiftedChain(self, k)


class ShiftedChain:
    """View ``theta^k Z`` of a lazy chain: index ``j`` reads ``z_{k+j}``."""

    def __init__(self, base: LazyChain, k: int):
        self.base = base
        self.k = int(k)

    def __getitem__(self, j: int):
        return self.base[self.k + j]

    def log_w(self, j: int) -> float:
        return self.base.log_w(self.k + j)

    def log_F(self, j: int) -> float:
        return self.base.log_F(self.k + j) - self.base.log_F(self.k)

    def window_log_w(self, lo: int, hi: int) -> np.ndarray:
        return np.array([self.log_w(j) + self.log_F(j) for j in range(lo, hi + 1)])

    def window(self, lo: int, hi: int) -> ChainWindow:
        return ChainWindow(self, lo, hi)


def chain_log_radon_nikodym(chain: LazyChain, k: int) -> float:
    """``log d Lambda^k / d Lambda^0 (Z) = log w(z_k) - log w(z_0) + log F_k(Z)``."""
    if k == 0:
        return 0.0
    lw0 = chain.log_w(0)
    lwk = chain.log_w(k)
    if lwk == NEG_INF or lw0 == NEG_INF:
        return NEG_INF
    return lwk - lw0 + chain.log_F(k)


# ---------------------------------------------------------------------------
# Window kernels
# ---------------------------------------------------------------------------


class _ChainKernel(Kernel):
    def __init__(self, triplet: ReversibleTriplet, log_w: Callable, select: SelectionLaw,
                 accept: AcceptanceFunction | None = None):
        self.triplet = triplet
        self.log_w_fn = log_w
        self.select = select
        self.accept = accept or METROPOLIS

    def _chain(self, rng, z0):
        seed = 0 if self.triplet.deterministic else fresh_seed(rng)
        return LazyChain(z0, self.triplet, seed, self.log_w_fn)


def _symmetric_tau(rule: StopRule, chain) -> int:
    n = 1
    while True:
        lo, hi = -n, n
        if rule(n, chain.window(lo, hi), chain.window_log_w(lo, hi)):
            return n
        n += 1


class WindowedKernel(_ChainKernel):
    """Select ``z_k`` from the symmetric window ``[-tau, tau]`` around ``z_0``.

    ``tau`` is a fixed integer or a :class:`StopRule` evaluated on the
    windows ``z_{-n..n}``. The ratio is
    ``w(z_k) F_k varsigma(-k; theta^k Z) / (w(z_0) varsigma(k; Z))`` which,
    for proportional selection, is the ratio of window sums.
    """

    name = "windowed"

    def __init__(self, triplet, log_w, window: int | StopRule, select: SelectionLaw, accept=None):
        super().__init__(triplet, log_w, select, accept)
        self.window = window

    def _tau(self, chain) -> int:
        if isinstance(self.window, StopRule):
            return _symmetric_tau(self.window, chain)
        return int(self.window)

    def _log_ratio(self, chain, tau, k) -> tuple[float, int]:
        lw = chain.window_log_w(-tau, tau)
        fwd = self.select.parts(lw, tau)
        view = chain.shifted(k)
        tau2 = self._tau(view)
        if abs(k) > tau2:
            return NEG_INF, tau2
        lw2 = view.window_log_w(-tau2, tau2)
        rev = self.select.parts(lw2, tau2 - k)
        pos = tau + k
        lr = _log_ratio_from_parts(lw[pos], lw[tau], (fwd[0][pos], fwd[1]),
                                   (rev[0][tau2 - k], rev[1]))
        return lr, tau2

    def step(self, rng, state):
        chain = self._chain(rng, state)
        tau = self._tau(chain)
        pos = self.select.sample(rng, chain.window_log_w(-tau, tau), tau)
        k = pos - tau
        if k == 0:
            accept_draw(rng, 0.0)
            return KernelStepResult(state, True, 0.0, state, info={"k": 0, "tau": tau})
        lr, tau2 = self._log_ratio(chain, tau, k)
        prop = chain[k]
        info = {"k": k, "tau": tau, "tau_prime": tau2}
        if accept_draw(rng, self.accept.log(lr)):
            return KernelStepResult(prop, True, lr, prop, info=info)
        return KernelStepResult(state, False, lr, prop, info=info)

    def transitions(self, state):
        if not self.triplet.deterministic:
            raise NotEnumerableError("enumeration needs a deterministic triplet")
        chain = LazyChain(state, self.triplet, 0, self.log_w_fn)
        tau = self._tau(chain)
        probs = self.select.probs(chain.window_log_w(-tau, tau), tau)
        out = []
        for pos, p in enumerate(probs):
            if p == 0.0:
                continue
            k = pos - tau
            if k == 0:
                out.append((state, p))
                continue
            a = self.accept.prob(self._log_ratio(chain, tau, k)[0])
            out.append((chain[k], p * a))
            out.append((state, p * (1.0 - a)))
        return out


class CoincidingWindowKernel(_ChainKernel):
    """Shared window of ``m`` states with a uniformly placed left end.

    Draws ``l ~ Uniform{0..m-1}``, realizes ``z_{-l..r}`` with
    ``r = m - 1 - l`` and selects ``k`` inside it. The reverse move
    re-anchors the same window at ``k``, so no state outside it is needed.
    """

    name = "coinciding_window"

    def __init__(self, triplet, log_w, m: int, select: SelectionLaw, accept=None):
        if m < 1:
            raise ValueError("m must be at least 1")
        super().__init__(triplet, log_w, select, accept)
        self.m = int(m)

    def _log_ratio(self, lw, ell, pos):
        fwd = self.select.parts(lw, ell)
        rev = self.select.parts(lw, pos)
        return _log_ratio_from_parts(lw[pos], lw[ell], (fwd[0][pos], fwd[1]), (rev[0][ell], rev[1]))

    def step(self, rng, state):
        chain = self._chain(rng, state)
        ell = int(rng.integers(self.m))
        r = self.m - 1 - ell
        lw = chain.window_log_w(-ell, r)
        pos = self.select.sample(rng, lw, ell)
        k = pos - ell
        info = {"k": k, "ell": ell}
        if k == 0:
            accept_draw(rng, 0.0)
            return KernelStepResult(state, True, 0.0, state, info=info)
        lr = self._log_ratio(lw, ell, pos)
        prop = chain[k]
        if accept_draw(rng, self.accept.log(lr)):
            return KernelStepResult(prop, True, lr, prop, info=info)
        return KernelStepResult(state, False, lr, prop, info=info)

    def transitions(self, state):
        if not self.triplet.deterministic:
            raise NotEnumerableError("enumeration needs a deterministic triplet")
        chain = LazyChain(state, self.triplet, 0, self.log_w_fn)
        out = []
        for ell in range(self.m):
            r = self.m - 1 - ell
            lw = chain.window_log_w(-ell, r)
            probs = self.select.probs(lw, ell)
            for pos, p in enumerate(probs):
                p = p / self.m
                if p == 0.0:
                    continue
                if pos == ell:
                    out.append((state, p))
                    continue
                a = self.accept.prob(self._log_ratio(lw, ell, pos))
                out.append((chain[pos - ell], p * a))
                out.append((state, p * (1.0 - a)))
        return out


# ---------------------------------------------------------------------------
# NUTS-like doubling
# ---------------------------------------------------------------------------


def ell_n(bits: Sequence[int], n: int) -> int:
    """``l_n(b) = sum_{j<=n} b_j 2^{j-1}``."""
    return sum(int(bits[j]) << j for j in range(n))


def r_n(bits: Sequence[int], n: int) -> int:
    return (1 << n) - 1 - ell_n(bits, n)


def m_n(bits: Sequence[int], n: int) -> int:
    return (1 << (n - 1)) - 1 - ell_n(bits, n)


def beta(i: int, n: int) -> tuple[int, ...]:
    """Reversed binary representation of ``i`` with ``n`` bits."""
    if not 0 <= i < (1 << n):
        raise ValueError(f"{i} does not fit in {n} bits")
    return tuple((i >> j) & 1 for j in range(n))


def chi(bits: Sequence[int], n: int, k: int) -> tuple[int, ...]:
    """``chi_{n,k}(b) = (beta_n(l_n(b) + k), b_{n+1:})``."""
    return beta(ell_n(bits, n) + k, n) + tuple(bits[n:])


def chi_involution(n: int) -> InvolutionMap:
    """``(b, k) -> (chi_{n,k}(b), -k)`` on pairs with ``0 <= l_n(b) + k < 2^n``."""

    def apply(bk):
        bits, k = bk
        return (chi(bits, n, k), -k)

    return InvolutionMap(apply, name=f"chi_{n}")


GFunc = Callable[[int, Sequence, np.ndarray], bool]


class DoublingTree:
    """Evaluates ``s_n`` for the doubling scheme with memoized subtree flags.

    Args:
        chain: Object with ``window(lo, hi)`` and ``window_log_w(lo, hi)``.
        g: ``(k, states, log_w) -> bool`` on windows of ``2^k`` states.
    """

    def __init__(self, chain, g: GFunc):
        self.chain = chain
        self.g = g
        self._f: dict[tuple[int, int], bool] = {}
        self._g: dict[tuple[int, int], bool] = {}
        self._lw: dict[tuple[int, int], np.ndarray] = {}
        self.g_evals = 0

    def log_w_at(self, k: int, start: int) -> np.ndarray:
        """Window log-weights, built from the two memoized halves."""
        key = (k, start)
        arr = self._lw.get(key)
        if arr is None:
            if k == 0:
                arr = self.chain.window_log_w(start, start)
            else:
                half = 1 << (k - 1)
                arr = np.concatenate((self.log_w_at(k - 1, start), self.log_w_at(k - 1, start + half)))
            self._lw[key] = arr
        return arr

    def g_at(self, k: int, start: int) -> bool:
        key = (k, start)
        if key not in self._g:
            hi = start + (1 << k) - 1
            self.g_evals += 1
            self._g[key] = bool(self.g(k, self.chain.window(start, hi), self.log_w_at(k, start)))
        return self._g[key]

    def f_at(self, k: int, start: int) -> bool:
        key = (k, start)
        if key in self._f:
            return self._f[key]
        if k == 0:
            val = self.g_at(0, start)
        else:
            half = 1 << (k - 1)
            # evaluate subtrees first: any stop inside is found without g_k
            val = self.f_at(k - 1, start) or self.f_at(k - 1, start + half) or self.g_at(k, start)
        self._f[key] = val
        return val

    def s(self, n: int, bits: Sequence[int]) -> bool:
        """``s_n = f_{n-1}(z_{-l_n..m_n}) or f_{n-1}(z_{m_n+1..r_n})``."""
        lo = -ell_n(bits, n)
        mid = m_n(bits, n)
        return self.f_at(n - 1, lo) or self.f_at(n - 1, mid + 1)


def nuts_tau(chain, bits_source, g: GFunc, n_max: int, early_exit: bool = True):
    """Run the doubling loop; return ``(tau, bits, tree)``.

    ``bits_source`` is a sequence of bits or a callable ``n -> b_n``. The
    cap forces ``s_n = 1`` for ``n > n_max``. With ``early_exit``, a
    U-turn of the full current window (``g_n = 1``) stops at ``n + 1``
    without simulating the next half.
    """
    tree = DoublingTree(chain, g)
    bits: list[int] = []
    n = 0
    while True:
        n += 1
        bits.append(int(bits_source(n) if callable(bits_source) else bits_source[n - 1]))
        if n > n_max:
            return n, bits, tree
        if n >= 2 and early_exit and tree.g_at(n - 1, -ell_n(bits, n - 1)):
            return n, bits, tree
        if tree.s(n, bits):
            return n, bits, tree


def s_sequence(chain, bits: Sequence[int], g: GFunc, n_max: int, upto: int) -> list[bool]:
    """``[s_1, ..., s_upto]`` including the cap, without early exit."""
    tree = DoublingTree(chain, g)
    return [True if n > n_max else tree.s(n, bits) for n in range(1, upto + 1)]


class NUTSKernel(_ChainKernel):
    """NUTS-like kernel on a two-sided chain.

    Doubles the window left or right according to fair bits until the
    stopping rule built from ``g`` fires at ``tau``; keeps the window of
    step ``tau - 1``, selects ``k`` in it and accepts with
    ``w(z_k) varsigma(-k; theta^k Z) / (w(z_0) varsigma(k; Z))``.

    Args:
        triplet: Chain dynamics (e.g. a leapfrog map).
        log_w: ``log d pi / d nu``.
        g: Stop test ``(k, states, log_w) -> bool`` on ``2^k`` states.
        select: Selection law over the kept window.
        n_max: Maximum kept depth; the kept window has at most ``2^n_max`` states.
        trace: Collect one record per step in :attr:`records`.
    """

    name = "nuts"

    def __init__(self, triplet, log_w, g: GFunc, select: SelectionLaw | None = None,
                 n_max: int = 10, accept=None, early_exit: bool = True, trace: bool = False):
        super().__init__(triplet, log_w, select or ProportionalSelection(), accept)
        self.g = g
        self.n_max = int(n_max)
        self.early_exit = early_exit
        self.trace = trace
        self.records: list[dict] = []

    def _log_ratio(self, lw, ell, pos):
        fwd = self.select.parts(lw, ell)
        rev = self.select.parts(lw, pos)
        return _log_ratio_from_parts(lw[pos], lw[ell], (fwd[0][pos], fwd[1]), (rev[0][ell], rev[1]))

    def step(self, rng, state):
        chain = self._chain(rng, state)
        tau, bits, tree = nuts_tau(chain, lambda n: int(rng.random() < 0.5), self.g,
                                   self.n_max, self.early_exit)
        if tau > self.n_max:
            logger.debug("NUTS doubling reached n_max=%d", self.n_max)
        ell = ell_n(bits, tau - 1)
        r = r_n(bits, tau - 1)
        lw = chain.window_log_w(-ell, r)
        pos = self.select.sample(rng, lw, ell)
        k = pos - ell
        lr = 0.0 if k == 0 else self._log_ratio(lw, ell, pos)
        prop = chain[k]
        accepted = accept_draw(rng, self.accept.log(lr))
        info = {"tau": tau, "bits": bits, "ell": ell, "r": r, "k": k}
        if self.trace:
            self.records.append({"window": [-ell, r], "bits": list(bits), "tau": tau, "k": k,
                                 "log_ratio": lr, "accepted": bool(accepted)})
        if accepted:
            return KernelStepResult(prop, True, lr, prop, info=info)
        return KernelStepResult(state, False, lr, prop, info=info)

    def transitions(self, state):
        if not self.triplet.deterministic:
            raise NotEnumerableError("enumeration needs a deterministic triplet")
        chain = LazyChain(state, self.triplet, 0, self.log_w_fn)
        out = []
        stack = [()]
        while stack:
            bits = stack.pop()
            try:
                tau, _, _ = nuts_tau(chain, bits, self.g, self.n_max, self.early_exit)
            except IndexError:
                stack.append(bits + (0,))
                stack.append(bits + (1,))
                continue
            pb = 0.5 ** len(bits)
            ell = ell_n(bits, tau - 1)
            r = r_n(bits, tau - 1)
            lw = chain.window_log_w(-ell, r)
            probs = self.select.probs(lw, ell)
            for pos, p in enumerate(probs):
                if p == 0.0:
                    continue
                if pos == ell:
                    out.append((state, pb * p))
                    continue
                a = self.accept.prob(self._log_ratio(lw, ell, pos))
                out.append((chain[pos - ell], pb * p * a))
                out.append((state, pb * p * (1.0 - a)))
        return out


def nuts_step(chain_triplet, log_w, g, select, n_max, rng, z0) -> KernelStepResult:
    return NUTSKernel(chain_triplet, log_w, g, select, n_max).step(rng, z0)


def uturn_g(delta_max: float = math.inf, log_u: float | None = None, sign: float = 1.0) -> GFunc:
    """U-turn test for states ``(x, v)`` of a chain moving as ``x <- x + sign * eps * v``.

    For ``k >= 1`` fires when the window's end-to-end displacement has a
    negative projection on the direction of motion at either end, and, in
    the unsliced form, when ``max_ij pi_i / pi_j > delta_max``. ``g_0`` is
    identically 0 unless ``log_u`` is given (sliced form), in which case
    ``g_0(z) = 1{log pi(z) < log_u - delta_max}`` with ``delta_max`` on the
    log scale.
    """
    log_delta = math.log(delta_max) if delta_max not in (0, math.inf) else delta_max

    def g(k, states, log_w):
        if k == 0:
            if log_u is None:
                return False
            return bool(log_w[0] < log_u - delta_max)
        xl, vl = states[0]
        xr, vr = states[-1]
        dx = np.subtract(xr, xl)
        if sign * np.vdot(dx, vl) < 0 or sign * np.vdot(dx, vr) < 0:
            return True
        if log_u is None and math.isfinite(log_delta):
            finite = log_w[np.isfinite(log_w)]
            if finite.size and finite.max() - finite.min() > log_delta:
                return True
        return False

    return g


# ---------------------------------------------------------------------------
# Slice lifting
# ---------------------------------------------------------------------------


class SliceKernel(Kernel):
    """Alternate ``u ~ Uniform(0, pi(z))`` with an inner kernel for ``pi_u``.

    ``u`` is handled as ``log u = log pi(z) + log u0`` with
    ``u0 ~ Uniform(0, 1)``.

    Args:
        log_pi: Log target.
        inner_factory: ``log_u -> kernel`` leaving the uniform law on
            ``{z : log pi(z) >= log_u}`` invariant.
        levels: Distinct values of ``log pi`` on a finite space; enables
            enumeration, with ``u`` grouped by the level sets it selects.
    """

    name = "slice"

    def __init__(self, log_pi: Callable, inner_factory: Callable, levels: Sequence[float] | None = None):
        self.log_pi = log_pi
        self.inner_factory = inner_factory
        self.levels = None if levels is None else sorted(set(float(x) for x in levels if x > NEG_INF))

    def step(self, rng, state):
        lp = float(self.log_pi(state))
        if lp == NEG_INF:
            raise ValueError("current state has zero density")
        log_u = lp + math.log(rng.random() or 1e-300)
        res = self.inner_factory(log_u).step(rng, state)
        res.info["log_u"] = log_u
        return res

    def transitions(self, state):
        if self.levels is None:
            raise NotEnumerableError("slice enumeration needs the finite level set")
        lp = float(self.log_pi(state))
        top = math.exp(lp)
        out = []
        prev = 0.0
        for lev in self.levels:
            if lev > lp:
                break
            hi = math.exp(lev)
            p = (hi - prev) / top
            prev = hi
            if p <= 0:
                continue
            # any u in (prev, hi] selects the set {log pi >= lev}
            for t, q in self.inner_factory(lev).transitions(state):
                out.append((t, p * q))
        return out


def slice_lift(log_pi, inner_factory, levels=None) -> SliceKernel:
    return SliceKernel(log_pi, inner_factory, levels)


# ---------------------------------------------------------------------------
# HMC helpers
# ---------------------------------------------------------------------------


def hmc_triplet(grad_log_pi: Callable, eps: float, textbook: bool = True) -> ReversibleTriplet:
    """Deterministic triplet of a single leapfrog step on ``(x, v)``.

    Leapfrog preserves Lebesgue measure, so ``nu* = nu``.
    """
    sign = 1.0 if textbook else -1.0
    half = 0.5 * eps

    def psi(z):
        x, v = z
        v = v + half * grad_log_pi(x)
        x = x + sign * eps * v
        v = v + half * grad_log_pi(x)
        return (x, v)

    def psi_inv(z):
        x, v = z
        x2, v2 = psi((x, -v))
        return (x2, -v2)

    return ReversibleTriplet.from_map(psi, psi_inv)


class NUTSHMCKernel(Kernel):
    """NUTS on ``(x, v)`` with velocity refreshment, reported on ``(x, v)``."""

    name = "nuts_hmc"

    def __init__(self, log_pi: Callable, grad_log_pi: Callable, eps: float, n_max: int = 10,
                 delta_max: float = 1e3, select: SelectionLaw | None = None, trace: bool = False):
        self.log_pi = log_pi

        def log_w(z):
            x, v = z
            return float(log_pi(x)) - 0.5 * float(np.dot(v, v))

        self.inner = NUTSKernel(hmc_triplet(grad_log_pi, eps, True), log_w,
                                uturn_g(delta_max), select, n_max, trace=trace)

    @property
    def records(self):
        return self.inner.records

    def step(self, rng, state):
        x, _ = state
        v = rng.standard_normal(np.shape(x))
        return self.inner.step(rng, (x, v))

"""Exact and statistical verification oracles.

The exact oracles build the full transition matrix of a kernel on a finite
(extended) state space and check detailed balance, skew detailed balance or
invariance entrywise. The statistical helpers cover chi-square
stationarity, moment checks and effective sample size.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Any, Callable, Sequence

import numpy as np
from scipy import stats

from .core import Kernel, NotEnumerableError, state_key

logger = logging.getLogger(__name__)


class UnsupportedError(NotEnumerableError):
    """Raised when a kernel cannot be enumerated."""


@dataclass
class EnumeratedSpace:
    """Finite list of states with their target probabilities.

    Args:
        states: Distinct states.
        pi: Target probabilities (normalised on construction when given as
            unnormalised weights).
    """

    states: list
    pi: np.ndarray

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        if len(self.states) != self.pi.shape[0]:
            raise ValueError("states and pi have different lengths")
        total = math.fsum(self.pi)
        if total <= 0:
            raise ValueError("pi has no mass")
        self.pi = self.pi / total
        self.index = {}
        for i, s in enumerate(self.states):
            key = state_key(s)
            if key in self.index:
                raise ValueError(f"duplicate state {s!r}")
            self.index[key] = i

    @classmethod
    def from_log_density(cls, states: Sequence, log_pi: Callable) -> "EnumeratedSpace":
        logp = np.array([float(log_pi(s)) for s in states])
        finite = np.isfinite(logp)
        w = np.zeros_like(logp)
        w[finite] = np.exp(logp[finite] - logp[finite].max())
        return cls(list(states), w)

    def __len__(self) -> int:
        return len(self.states)

    def locate(self, state) -> int:
        try:
            return self.index[state_key(state)]
        except KeyError:
            raise KeyError(f"state {state!r} is not in the enumerated space") from None


@dataclass
class TransitionMatrix:
    """Row-stochastic matrix over an :class:`EnumeratedSpace`."""

    space: EnumeratedSpace
    P: np.ndarray
    provenance: str = "exact"
    se: np.ndarray | None = None


@dataclass
class CheckReport:
    """Result of one verification check."""

    check: str
    max_violation: float
    threshold: float
    passed: bool
    witness: Any = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        d["witness"] = _jsonable(self.witness)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.check}: max violation {self.max_violation:.3e} (threshold {self.threshold:.1e})"


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, list)):
        return [_jsonable(o) for o in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _report(name: str, viol: float, tol: float, witness) -> CheckReport:
    return CheckReport(name, float(viol), float(tol), bool(viol <= tol), witness)


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------


def enumerate_kernel(kernel: Kernel, space: EnumeratedSpace, strict: bool = True) -> TransitionMatrix:
    """Exact transition matrix of ``kernel`` on ``space``.

    Each entry is accumulated with ``math.fsum`` over all contributing
    paths, so entries are correctly rounded sums of path probabilities.

    Raises:
        UnsupportedError: if the kernel lacks ``transitions``.
        KeyError: if a transition leaves the space (``strict``).
    """
    n = len(space)
    P = np.zeros((n, n))
    for i, s in enumerate(space.states):
        try:
            trans = kernel.transitions(s)
        except NotEnumerableError as exc:
            raise UnsupportedError(str(exc)) from exc
        acc: dict[int, list[float]] = defaultdict(list)
        for t, p in trans:
            if p == 0.0:
                continue
            try:
                j = space.locate(t)
            except KeyError:
                if strict:
                    raise
                continue
            acc[j].append(p)
        for j, ps in acc.items():
            P[i, j] = math.fsum(ps)
    return TransitionMatrix(space, P)


def check_row_stochastic(tm: TransitionMatrix, tol: float = 1e-12) -> CheckReport:
    sums = np.array([math.fsum(row) for row in tm.P])
    dev = np.abs(sums - 1.0)
    i = int(np.argmax(dev))
    return _report("row_stochastic", dev[i], tol, tm.space.states[i])


def check_detailed_balance(P, pi, tol: float = 1e-12) -> CheckReport:
    """Max ``|pi_i P_ij - pi_j P_ji|``."""
    P, pi, states = _unpack(P, pi)
    flow = pi[:, None] * P
    viol = np.abs(flow - flow.T)
    i, j = np.unravel_index(int(np.argmax(viol)), viol.shape)
    return _report("detailed_balance", viol[i, j], tol, _witness(states, i, j))


def check_skew_db(P, pi, sigma: Sequence[int] | Callable, tol: float = 1e-12) -> CheckReport:
    """Max ``|pi_x P_xy - pi_y (S P S)_yx|`` with ``S`` the flip permutation.

    Args:
        sigma: Either an index permutation or a state map (requires ``P``
            to be a :class:`TransitionMatrix`).
    """
    P, pi, states = _unpack(P, pi)
    if callable(sigma):
        if states is None:
            raise ValueError("a state map needs a TransitionMatrix")
        space = EnumeratedSpace(list(states), pi)
        perm = np.array([space.locate(sigma(s)) for s in space.states])
    else:
        perm = np.asarray(sigma, dtype=int)
    if not np.array_equal(perm[perm], np.arange(len(perm))):
        return _report("skew_detailed_balance:sigma_not_involution", math.inf, tol, None)
    pre = float(np.max(np.abs(pi[perm] - pi)))
    if pre > tol:
        return _report("skew_detailed_balance:pi_not_sigma_invariant", pre, tol, None)
    SPS = P[np.ix_(perm, perm)]
    lhs = pi[:, None] * P
    rhs = (pi[:, None] * SPS).T
    viol = np.abs(lhs - rhs)
    i, j = np.unravel_index(int(np.argmax(viol)), viol.shape)
    return _report("skew_detailed_balance", viol[i, j], tol, _witness(states, i, j))


def check_invariance(P, pi, tol: float = 1e-12) -> CheckReport:
    """``max_j |sum_i pi_i P_ij - pi_j|`` with compensated summation."""
    P, pi, states = _unpack(P, pi)
    n = len(pi)
    out = np.array([math.fsum(pi * P[:, j]) for j in range(n)])
    dev = np.abs(out - pi)
    j = int(np.argmax(dev))
    return _report("invariance", dev[j], tol, None if states is None else states[j])


def _unpack(P, pi):
    if isinstance(P, TransitionMatrix):
        states = P.space.states
        if pi is None:
            pi = P.space.pi
        return P.P, np.asarray(pi, dtype=float), states
    return np.asarray(P, dtype=float), np.asarray(pi, dtype=float), None


def _witness(states, i, j):
    if states is None:
        return [int(i), int(j)]
    return [states[i], states[j]]


# ---------------------------------------------------------------------------
# Monte Carlo transition matrices
# ---------------------------------------------------------------------------


def monte_carlo_kernel(kernel: Kernel, space: EnumeratedSpace, rng, n_per_row: int = 10_000) -> TransitionMatrix:
    """Estimate a transition matrix by repeated single steps from each state."""
    n = len(space)
    P = np.zeros((n, n))
    for i, s in enumerate(space.states):
        for _ in range(n_per_row):
            P[i, space.locate(kernel.step(rng, s).state)] += 1.0
    P /= n_per_row
    se = np.sqrt(P * (1 - P) / n_per_row)
    return TransitionMatrix(space, P, provenance="monte_carlo", se=se)


# ---------------------------------------------------------------------------
# Statistical diagnostics
# ---------------------------------------------------------------------------


def chi2_stationarity(samples, pi: Sequence[float], states: Sequence | None = None) -> float:
    """Pearson chi-square p-value of discrete samples against ``pi``.

    ``samples`` are integer indices into ``pi`` unless ``states`` is given.
    """
    pi = np.asarray(pi, dtype=float)
    pi = pi / pi.sum()
    if states is not None:
        lookup = {state_key(s): i for i, s in enumerate(states)}
        idx = np.array([lookup[state_key(s)] for s in samples])
    else:
        idx = np.asarray(samples, dtype=int)
    counts = np.bincount(idx, minlength=len(pi)).astype(float)
    keep = pi > 0
    if np.any(counts[~keep] > 0):
        return 0.0
    res = stats.chisquare(counts[keep], pi[keep] * counts.sum())
    return float(res.pvalue)


def chi2_deciles(samples, cdf: Callable, bins: int = 10) -> float:
    """Chi-square p-value of continuous 1-d samples using target quantile bins.

    Samples are mapped through the target CDF and counted in ``bins``
    equiprobable cells, each with expected mass ``1 / bins``.
    """
    u = np.asarray(cdf(np.asarray(samples, dtype=float)), dtype=float)
    idx = np.clip((u * bins).astype(int), 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(float)
    res = stats.chisquare(counts, np.full(bins, counts.sum() / bins))
    return float(res.pvalue)


def autocorrelation(x) -> np.ndarray:
    """Normalised autocorrelation function via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    if acov[0] <= 0:
        return np.ones(n)
    return acov / acov[0]


def ess_autocorr(x) -> dict:
    """Effective sample size with initial-positive-sequence truncation.

    Sums autocorrelations in adjacent pairs and stops at the first pair
    with a non-positive sum.

    Returns:
        Dict with ``ess``, ``tau`` (integrated autocorrelation time),
        ``acf`` and ``degenerate``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 4 or np.allclose(x, x[0]):
        logger.warning("degenerate sample: ESS undefined")
        return {"ess": float("nan"), "tau": float("nan"), "acf": np.ones(min(n, 1)), "degenerate": True}
    rho = autocorrelation(x)
    tau = -1.0
    m = 0
    while 2 * m + 1 < n:
        pair = rho[2 * m] + rho[2 * m + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
        m += 1
    tau = max(tau, 1.0 / n)
    return {"ess": float(n / tau), "tau": float(tau), "acf": rho[: 2 * m + 2], "degenerate": False}


def moment_check(samples, mean=0.0, var=1.0, k: float = 4.0) -> dict:
    """Compare per-coordinate mean and variance with targets within ``k`` SE.

    The SE of the mean uses the ESS of ``x``; the SE of the variance uses
    the ESS of ``(x - mean)^2`` and the sample variance of that series.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    d = x.shape[1]
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (d,))
    var = np.broadcast_to(np.asarray(var, dtype=float), (d,))
    rows = []
    ok = True
    for c in range(d):
        xc = x[:, c]
        ess_m = ess_autocorr(xc)["ess"]
        m_hat = xc.mean()
        se_m = xc.std(ddof=1) / math.sqrt(ess_m)
        sq = (xc - mean[c]) ** 2
        ess_v = ess_autocorr(sq)["ess"]
        v_hat = sq.mean()
        se_v = sq.std(ddof=1) / math.sqrt(ess_v)
        z_m = abs(m_hat - mean[c]) / se_m
        z_v = abs(v_hat - var[c]) / se_v
        passed = bool(z_m <= k and z_v <= k)
        ok &= passed
        rows.append({
            "coord": c, "mean": float(m_hat), "se_mean": float(se_m), "ess_mean": float(ess_m),
            "var": float(v_hat), "se_var": float(se_v), "ess_var": float(ess_v),
            "z_mean": float(z_m), "z_var": float(z_v), "pass": passed,
        })
    return {"pass": ok, "coords": rows, "k": k}

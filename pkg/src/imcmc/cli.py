"""Command-line harness: ``imcmc sample | verify | diagnose``.

Configs are TOML (``.toml``) or JSON documents with ``[target]`` and
``[kernel]`` tables plus run settings; command-line flags override the
file. Kernel parameters use the constructor argument names.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 unsupported operation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .chain_proposals import NUTSHMCKernel
from .core import (
    NEG_INF,
    CycleKernel,
    Kernel,
    KernelStepResult,
    MixtureKernel,
    NotEnumerableError,
    substream,
)
from .corpus import CORPUS, INVARIANCE, SKEW, run_instance
from .delayed_rejection import EventChainKernel, EventChainRefresh, Torus, feasible, radii_matrix
from .kernels_classic import MHKernel, RWMKernel, uniform_proposal
from .kernels_nonrev import grw_kernel, hmc_kernel, mala_kernel, velocity_flip, velocity_refresh, with_refresh
from .multi_try import MTMKernel
from .verify import (
    CheckReport,
    EnumeratedSpace,
    chi2_stationarity,
    check_detailed_balance,
    check_invariance,
    check_row_stochastic,
    check_skew_db,
    enumerate_kernel,
    ess_autocorr,
    moment_check,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_CONFIG = 2
EXIT_UNSUPPORTED = 3

TARGETS = ("gaussian", "discrete-vector", "grid", "hard-sphere")
KERNELS = ("rwm", "mala", "hmc", "grw", "nuts", "mh", "mtm", "event_chain", "mixture")
CONTINUOUS_ONLY = ("mala", "hmc", "nuts")
HEADER = ["chain", "iter", "accepted", "log_ratio"]


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


class UnsupportedOperation(RuntimeError):
    """Valid request the library cannot honour (exit code 3)."""


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Declarative run description.

    Attributes:
        target: ``{"name": ..., **params}``.
        kernel: ``{"name": ..., **params}``; a mixture has ``components``
            (kernel tables) and ``weights``.
        instances: Corpus instance names for ``verify``.
    """

    target: dict = field(default_factory=lambda: {"name": "gaussian", "dim": 1})
    kernel: dict = field(default_factory=lambda: {"name": "rwm"})
    chains: int = 1
    iters: int = 1000
    burn: int = 0
    thin: int = 1
    seed: int = 0
    out: str = "imcmc_out"
    trace: bool = False
    tol: float = 1e-12
    instances: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**{k: _plain(v) for k, v in d.items()})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name in ("chains", "iters", "thin"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.burn, int) or self.burn < 0:
            raise ConfigError(f"burn must be a nonnegative integer, got {self.burn!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if not (isinstance(self.tol, (int, float)) and self.tol >= 0):
            raise ConfigError(f"tol must be nonnegative, got {self.tol!r}")
        if not isinstance(self.target, dict) or self.target.get("name") not in TARGETS:
            raise ConfigError(f"unknown target {self.target.get('name')!r}; valid targets: {', '.join(TARGETS)}")
        _validate_kernel(self.kernel)
        unknown = [n for n in self.instances if n not in CORPUS]
        if unknown:
            raise ConfigError(f"unknown instances {unknown}; valid instances: {', '.join(CORPUS)}")


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _validate_kernel(spec) -> None:
    if not isinstance(spec, dict) or spec.get("name") not in KERNELS:
        name = spec.get("name") if isinstance(spec, dict) else spec
        raise ConfigError(f"unknown kernel {name!r}; valid kernels: {', '.join(KERNELS)}")
    if spec["name"] != "mixture":
        return
    comps = spec.get("components")
    weights = spec.get("weights")
    if not comps or weights is None or len(comps) != len(weights):
        raise ConfigError("mixture needs matching 'components' and 'weights'")
    w = [float(x) for x in weights]
    if any(x < 0 for x in w) or abs(math.fsum(w) - 1.0) > 1e-9:
        raise ConfigError(f"mixture weights must be nonnegative and sum to 1, got {w}")
    for c in comps:
        if isinstance(c, dict) and c.get("name") == "mixture":
            raise ConfigError("nested mixtures are not supported")
        if isinstance(c, str):
            continue
        _validate_kernel(c)


def load_config_file(path: str) -> dict:
    """Parse a TOML or JSON config file into a plain dict."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if path.endswith(".json"):
        try:
            return json.loads(raw.decode())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    try:
        return tomllib.loads(raw.decode())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None


def config_from_args(args) -> RunConfig:
    d = load_config_file(args.config) if getattr(args, "config", None) else {}
    for key in ("chains", "iters", "burn", "thin", "seed", "out", "tol"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    if getattr(args, "trace", False):
        d["trace"] = True
    if getattr(args, "kernel", None):
        d["kernel"] = {**({} if d.get("kernel", {}).get("name") != args.kernel else d["kernel"]),
                       "name": args.kernel}
    if getattr(args, "target", None):
        d["target"] = {**({} if d.get("target", {}).get("name") != args.target else d["target"]),
                       "name": args.target}
    if getattr(args, "dim", None) is not None:
        d.setdefault("target", {"name": "gaussian"})["dim"] = args.dim
    if getattr(args, "instance", None):
        d["instances"] = list(args.instance)
    return RunConfig.from_dict(d)


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


class Target:
    """Built target: log density, initial state and CSV coordinates."""

    continuous: bool = True
    states: list | None = None
    pi: np.ndarray | None = None

    def coords(self, state) -> list:
        raise NotImplementedError

    def coord_names(self) -> list[str]:
        raise NotImplementedError


class GaussianTarget(Target):
    def __init__(self, dim: int = 1, mean=0.0, sd=1.0):
        if int(dim) < 1:
            raise ConfigError("gaussian dim must be positive")
        self.dim = int(dim)
        self.mean = np.broadcast_to(np.asarray(mean, dtype=float), (self.dim,)).copy()
        self.sd = np.broadcast_to(np.asarray(sd, dtype=float), (self.dim,)).copy()
        if np.any(self.sd <= 0):
            raise ConfigError("gaussian sd must be positive")

    def log_pi(self, x) -> float:
        z = (np.asarray(x, dtype=float) - self.mean) / self.sd
        return -0.5 * float(z @ z)

    def grad(self, x):
        return -(np.asarray(x, dtype=float) - self.mean) / self.sd**2

    def init(self, rng):
        x = self.mean + 2.0 * self.sd * rng.standard_normal(self.dim)
        return (x, np.zeros(self.dim))

    def coords(self, state):
        return list(np.asarray(state[0], dtype=float))

    def coord_names(self):
        return [f"x{i}" for i in range(self.dim)]


class DiscreteTarget(Target):
    """Weights over ``range(n)``, optionally labelled by grid ``points``.

    Chain states are ``(x, v)`` with a direction ``v`` in ``{-1, +1}`` used
    only by the guided walk; ``pi(x, v) = w_x / 2``.
    """

    continuous = False

    def __init__(self, weights, points=None):
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or w.size < 2 or np.any(w < 0) or not np.any(w > 0):
            raise ConfigError("weights must be a list of at least 2 nonnegative numbers with positive mass")
        self.w = w / math.fsum(w)
        self.n = w.size
        if points is not None and len(points) != self.n:
            raise ConfigError("grid points and weights differ in length")
        self.points = None if points is None else [float(p) for p in points]
        self.states = [(x, v) for x in range(self.n) for v in (-1, 1)]
        self.pi = np.array([self.w[x] / 2 for x, v in self.states])

    def log_pi(self, x) -> float:
        return math.log(self.w[x]) if self.w[x] > 0 else NEG_INF

    def init(self, rng):
        support = np.flatnonzero(self.w > 0)
        return (int(support[int(rng.integers(support.size))]), 1)

    def coords(self, state):
        x = state[0]
        return [x if self.points is None else self.points[x]]

    def coord_names(self):
        return ["x0"]


class HardSphereTarget(Target):
    """Uniform law over feasible hard-sphere configurations on a lattice torus."""

    continuous = False

    def __init__(self, L: int = 6, d: int = 1, m: int = 3, delta: float = 1.0):
        self.L, self.d, self.m, self.delta = int(L), int(d), int(m), float(delta)
        if self.L < 2 or self.d < 1 or self.m < 1 or self.delta <= 0:
            raise ConfigError("hard-sphere needs L >= 2, d >= 1, m >= 1, delta > 0")
        self.geometry = Torus(self.L, self.d, True)
        self.D = radii_matrix(self.delta, self.m)
        self.velocities = []
        for c in range(self.d):
            for s in (1, -1):
                v = [0] * self.d
                v[c] = s
                self.velocities.append(tuple(v))

    def init(self, rng):
        for _ in range(10_000):
            x = tuple(tuple(int(c) for c in rng.integers(self.L, size=self.d)) for _ in range(self.m))
            if feasible(x, self.D, self.geometry):
                v = self.velocities[int(rng.integers(len(self.velocities)))]
                return (x, v, int(rng.integers(self.m)))
        raise ConfigError("could not place the spheres; the box is too crowded")

    def coords(self, state):
        x, v, i = state
        return [c for p in x for c in p] + [i]

    def coord_names(self):
        return [f"p{j}_{c}" for j in range(self.m) for c in range(self.d)] + ["active"]

    def enumerate_space(self) -> EnumeratedSpace:
        import itertools

        sites = list(itertools.product(range(self.L), repeat=self.d))
        states = [(x, v, i) for x in itertools.product(sites, repeat=self.m) if feasible(x, self.D, self.geometry)
                  for v in self.velocities for i in range(self.m)]
        return EnumeratedSpace(states, np.ones(len(states)))


def build_target(spec: dict) -> Target:
    params = {k: v for k, v in spec.items() if k != "name"}
    name = spec["name"]
    try:
        if name == "gaussian":
            return GaussianTarget(**params)
        if name == "discrete-vector":
            return DiscreteTarget(params.pop("weights", [1, 2, 3, 4]), **params)
        if name == "grid":
            pts = params.pop("points", None)
            w = params.pop("weights", None)
            if pts is None or w is None:
                raise ConfigError("grid target needs 'points' and 'weights'")
            return DiscreteTarget(w, pts, **params)
        if name == "hard-sphere":
            return HardSphereTarget(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for target {name!r}: {exc}") from None
    raise ConfigError(f"unknown target {name!r}; valid targets: {', '.join(TARGETS)}")


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


class LiftedKernel(Kernel):
    """Run a kernel on ``x`` inside the ``(x, v)`` state, leaving ``v`` alone."""

    def __init__(self, inner: Kernel):
        self.inner = inner
        self.name = getattr(inner, "name", "lifted")

    def step(self, rng, state):
        x, v = state
        res = self.inner.step(rng, x)
        return KernelStepResult((res.state, v), res.accepted, res.log_ratio, res.proposal, res.flipped, res.info)

    def transitions(self, state):
        x, v = state
        return [((t, v), p) for t, p in self.inner.transitions(x)]


class RefreshedNUTS(Kernel):
    """NUTS on ``(x, v)``; the velocity is redrawn inside each step."""

    name = "nuts"

    def __init__(self, inner: NUTSHMCKernel):
        self.inner = inner

    def step(self, rng, state):
        return self.inner.step(rng, state)


def _params(spec: dict, allowed: Sequence[str]) -> dict:
    p = {k: v for k, v in spec.items() if k != "name"}
    bad = set(p) - set(allowed)
    if bad:
        raise ConfigError(f"unknown parameters for kernel {spec['name']!r}: {sorted(bad)}; "
                          f"allowed: {', '.join(allowed)}")
    return p


def build_kernel(spec: dict | str, target: Target, trace: bool = False) -> Kernel:
    """Build the kernel named in ``spec`` for ``target``.

    Raises:
        ConfigError: Unknown names or parameters.
        UnsupportedOperation: The kernel does not apply to the target.
    """
    if isinstance(spec, str):
        spec = {"name": spec}
    name = spec["name"]
    if name == "mixture":
        p = _params(spec, ("components", "weights"))
        comps = [build_kernel(c, target, trace) for c in p["components"]]
        w = np.asarray(p["weights"], dtype=float)
        return MixtureKernel(comps, w / math.fsum(w))
    if isinstance(target, HardSphereTarget):
        if name != "event_chain":
            raise UnsupportedOperation(f"kernel {name!r} does not apply to the hard-sphere target; use event_chain")
        p = _params(spec, ("refresh_active",))
        ek = EventChainKernel(target.delta, target.m, target.geometry)
        ref = EventChainRefresh(target.m, target.velocities, refresh_active=p.get("refresh_active", True))
        return CycleKernel([ref, ek])
    if name == "event_chain":
        raise UnsupportedOperation("event_chain needs the hard-sphere target")
    if isinstance(target, DiscreteTarget):
        return _discrete_kernel(name, spec, target)
    return _continuous_kernel(name, spec, target, trace)


def _discrete_kernel(name, spec, target: DiscreteTarget) -> Kernel:
    n = target.n
    ring = lambda x, v: (x + v) % n
    if name in CONTINUOUS_ONLY:
        raise UnsupportedOperation(f"kernel {name!r} needs a continuous target")
    if name == "rwm":
        _params(spec, ())
        return LiftedKernel(RWMKernel(target.log_pi, noise_enumerate=[(1, 0.5), (-1, 0.5)], move=ring))
    if name == "mh":
        _params(spec, ())
        return LiftedKernel(MHKernel(target.log_pi, uniform_proposal(range(n))))
    if name == "mtm":
        p = _params(spec, ("n",))
        return LiftedKernel(MTMKernel(target.log_pi, uniform_proposal(range(n)), int(p.get("n", 2))))
    if name == "grw":
        p = _params(spec, ("refresh",))
        ref = velocity_refresh(lambda rng, x: int(rng.choice((-1, 1))), [(-1, 0.5), (1, 0.5)])
        return with_refresh(grw_kernel(target.log_pi, move=ring), ref, float(p.get("refresh", 0.1)))
    raise UnsupportedOperation(f"kernel {name!r} is not available for discrete targets")


def _continuous_kernel(name, spec, target: GaussianTarget, trace: bool) -> Kernel:
    d = target.dim
    if name == "rwm":
        p = _params(spec, ("scale",))
        return LiftedKernel(RWMKernel(target.log_pi, scale=float(p.get("scale", 2.4 / math.sqrt(d)))))
    if name == "mala":
        p = _params(spec, ("eps",))
        return mala_kernel(target.log_pi, target.grad, float(p.get("eps", 1.0)))
    if name == "hmc":
        p = _params(spec, ("eps", "k", "refresh"))
        return hmc_kernel(target.log_pi, target.grad, float(p.get("eps", 0.3)), int(p.get("k", 5)),
                          float(p.get("refresh", 1.0)))
    if name == "grw":
        p = _params(spec, ("scale", "refresh"))
        scale = float(p.get("scale", 1.0))
        ref = velocity_refresh(lambda rng, x: scale * rng.standard_normal(np.shape(x)))
        return with_refresh(grw_kernel(target.log_pi), ref, float(p.get("refresh", 0.5)))
    if name == "nuts":
        p = _params(spec, ("eps", "n_max", "delta_max"))
        return RefreshedNUTS(NUTSHMCKernel(target.log_pi, target.grad, float(p.get("eps", 0.5)),
                                           int(p.get("n_max", 10)), float(p.get("delta_max", 1e3)), trace=trace))
    raise UnsupportedOperation(f"kernel {name!r} is not available for continuous targets")


def _uses_flip(spec) -> bool:
    if isinstance(spec, str):
        return spec in ("grw", "event_chain")
    if spec["name"] == "mixture":
        return any(_uses_flip(c) for c in spec["components"])
    return spec["name"] in ("grw", "event_chain")


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def fmt(x) -> str:
    """17 significant digits, enough to round-trip a double."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def run_chain(cfg_dict: dict, chain: int) -> dict:
    """Run one chain; return its CSV rows (as text), summary pieces and trace records."""
    cfg = RunConfig.from_dict(cfg_dict)
    target = build_target(cfg.target)
    kernel = build_kernel(cfg.kernel, target, cfg.trace)
    rng = substream(cfg.seed, chain)
    state = target.init(rng)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    coords = []
    n_acc = 0
    trace = []
    total = cfg.burn + cfg.iters * cfg.thin
    kept = 0
    for t in range(total):
        res = kernel.step(rng, state)
        state = res.state
        if t < cfg.burn:
            continue
        n_acc += bool(res.accepted)
        if cfg.trace and isinstance(kernel, RefreshedNUTS):
            rec = kernel.inner.records[-1]
            trace.append({"chain": chain, "iter": kept if (t - cfg.burn) % cfg.thin == cfg.thin - 1 else None,
                          "step": t, **rec})
        if (t - cfg.burn) % cfg.thin != cfg.thin - 1:
            continue
        c = target.coords(state)
        coords.append(c)
        w.writerow([chain, kept, fmt(bool(res.accepted)), fmt(res.log_ratio)] + [fmt(v) for v in c])
        kept += 1
    if cfg.trace and isinstance(kernel, RefreshedNUTS):
        kernel.inner.records.clear()
    return {"chain": chain, "csv": buf.getvalue(), "coords": coords,
            "acceptance_rate": n_acc / max(cfg.iters * cfg.thin, 1), "trace": trace}


def _workers(n_chains: int) -> int:
    env = os.environ.get("IMCMC_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise ConfigError(f"IMCMC_THREADS must be an integer, got {env!r}") from None
    return max(1, min(n_chains, cap))


def run_chains(cfg: RunConfig) -> list[dict]:
    d = cfg.to_dict()
    workers = _workers(cfg.chains)
    if workers == 1:
        return [run_chain(d, c) for c in range(cfg.chains)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_chain, [d] * cfg.chains, range(cfg.chains)))


def summarize(cfg: RunConfig, target: Target, results: list[dict]) -> dict:
    names = target.coord_names()
    per_chain = [np.asarray(r["coords"], dtype=float) for r in results]
    pooled = np.concatenate(per_chain, axis=0)
    coords = {}
    for j, nm in enumerate(names):
        ess = 0.0
        degenerate = False
        for x in per_chain:
            e = ess_autocorr(x[:, j])
            degenerate |= e["degenerate"]
            ess += 0.0 if e["degenerate"] else e["ess"]
        col = pooled[:, j]
        coords[nm] = {"mean": float(col.mean()), "var": float(col.var(ddof=1)) if col.size > 1 else 0.0,
                      "ess": None if degenerate else ess,
                      "se_mean": None if degenerate or ess <= 0 else float(col.std(ddof=1) / math.sqrt(ess)),
                      "degenerate": bool(degenerate)}
    out = {"config": cfg.to_dict(), "acceptance_rate": [r["acceptance_rate"] for r in results],
           "n_samples": int(pooled.shape[0]), "coords": coords}
    if isinstance(target, GaussianTarget):
        mc = [moment_check(x, target.mean, target.sd**2) for x in per_chain]
        out["moment_check"] = mc
    if isinstance(target, DiscreteTarget):
        xs = pooled[:, 0]
        states = list(range(target.n)) if target.points is None else target.points
        out["chi2_pvalue"] = chi2_stationarity(xs, target.w, states)
    out["metadata"] = {"version": __version__, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
    return out


def cmd_sample(cfg: RunConfig) -> dict:
    """Run the chains and write ``samples.csv``, ``summary.json`` and (with trace) ``trace.jsonl``."""
    target = build_target(cfg.target)
    build_kernel(cfg.kernel, target, cfg.trace)
    if cfg.trace and cfg.kernel["name"] != "nuts":
        logger.warning("--trace only records NUTS trajectories; ignoring it for %s", cfg.kernel["name"])
    try:
        os.makedirs(cfg.out, exist_ok=True)
        probe = tempfile.NamedTemporaryFile(dir=cfg.out, delete=True)
        probe.close()
    except OSError as exc:
        raise ConfigError(f"output path {cfg.out!r} is not writable: {exc}") from None
    results = run_chains(cfg)
    with open(os.path.join(cfg.out, "samples.csv"), "w", newline="") as fh:
        fh.write(",".join(HEADER + target.coord_names()) + "\n")
        for r in results:
            fh.write(r["csv"])
    summary = summarize(cfg, target, results)
    with open(os.path.join(cfg.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, default=_json_default)
    if cfg.trace and cfg.kernel["name"] == "nuts":
        with open(os.path.join(cfg.out, "trace.jsonl"), "w") as fh:
            for r in results:
                for rec in r["trace"]:
                    fh.write(json.dumps(rec, default=_json_default) + "\n")
    return summary


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(cfg: RunConfig, explicit_kernel: bool = False) -> tuple[list[dict], bool]:
    """Run exact checks on corpus instances or on the configured kernel.

    Returns:
        Per-instance results and the overall pass flag.

    Raises:
        UnsupportedOperation: The configured kernel is not enumerable.
    """
    results = []
    if explicit_kernel:
        results.append(_verify_config_kernel(cfg))
    else:
        for name in cfg.instances or list(CORPUS):
            reports, n = run_instance(name, cfg.tol)
            results.append({"instance": name, "module": CORPUS[name].module, "states": n,
                            "reports": [r.to_dict() for r in reports], "pass": all(r.passed for r in reports),
                            "lines": [r.line() for r in reports]})
    return results, all(r["pass"] for r in results)


def _verify_config_kernel(cfg: RunConfig) -> dict:
    target = build_target(cfg.target)
    if target.continuous:
        raise UnsupportedOperation(
            f"kernel {cfg.kernel['name']!r} on target {cfg.target['name']!r} has a continuous state space "
            "and cannot be enumerated; use a discrete target or a corpus instance")
    kernel = build_kernel(cfg.kernel, target)
    space = target.enumerate_space() if isinstance(target, HardSphereTarget) else EnumeratedSpace(target.states, target.pi)
    try:
        tm = enumerate_kernel(kernel, space)
    except NotEnumerableError as exc:
        raise UnsupportedOperation(f"kernel {cfg.kernel['name']!r} is not enumerable: {exc}") from None
    reports: list[CheckReport] = [check_row_stochastic(tm, cfg.tol)]
    if isinstance(target, HardSphereTarget):
        # skew balance is a property of the event-chain move, not of the refresh cycle
        move = enumerate_kernel(kernel.kernels[1], space)
        sigma = lambda s: (s[0], tuple(-c for c in s[1]), s[2])
        reports.append(check_skew_db(move, None, sigma, cfg.tol))
    elif not _uses_flip(cfg.kernel):
        reports.append(check_detailed_balance(tm, None, cfg.tol))
    reports.append(check_invariance(tm, None, cfg.tol))
    return {"instance": f"{cfg.kernel['name']}@{cfg.target['name']}", "module": "cli", "states": len(space),
            "reports": [r.to_dict() for r in reports], "pass": all(r.passed for r in reports),
            "lines": [r.line() for r in reports]}


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------


def read_samples(path: str) -> tuple[list[str], np.ndarray]:
    """Read a samples CSV, checking the header schema."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:4] != HEADER or len(header) < 5:
                raise ConfigError(f"{path}: header must start with {','.join(HEADER)} and name at least one coordinate")
            rows = [[float(x) for x in row] for row in reader if row]
    except OSError as exc:
        raise ConfigError(f"cannot read samples {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric entry: {exc}") from None
    data = np.asarray(rows, dtype=float).reshape(-1, len(header))
    return header, data


def cmd_diagnose(samples_path: str, target_spec: dict | None = None, max_lag: int = 200) -> dict:
    """ESS, autocorrelation curves and moment or chi-square checks per coordinate."""
    header, data = read_samples(samples_path)
    names = header[4:]
    chains = sorted(set(int(c) for c in data[:, 0]))
    out: dict[str, Any] = {"n_samples": int(data.shape[0]), "chains": len(chains), "coords": {}}
    target = build_target(target_spec) if target_spec else None
    for j, nm in enumerate(names):
        col = 4 + j
        per = []
        for c in chains:
            x = data[data[:, 0] == c, col]
            e = ess_autocorr(x)
            acf = np.asarray(e["acf"])[:max_lag + 1] if not e["degenerate"] else np.ones(1)
            per.append({"chain": c, "n": int(x.size), "ess": None if e["degenerate"] else e["ess"],
                        "tau": None if e["degenerate"] else e["tau"], "degenerate": e["degenerate"],
                        "acf": {"lag": list(range(len(acf))), "value": [float(a) for a in acf]}})
        allx = data[:, col]
        entry = {"mean": float(allx.mean()), "var": float(allx.var(ddof=1)) if allx.size > 1 else 0.0,
                 "chains": per, "degenerate": any(p["degenerate"] for p in per)}
        if entry["degenerate"]:
            entry["warning"] = "degenerate (constant) series: ESS undefined"
            logger.warning("%s: degenerate series, ESS undefined", nm)
        else:
            entry["ess"] = float(sum(p["ess"] for p in per))
        out["coords"][nm] = entry
    if isinstance(target, GaussianTarget):
        xs = data[:, 4:4 + target.dim]
        out["moment_check"] = [moment_check(xs[data[:, 0] == c], target.mean, target.sd**2) for c in chains]
    elif isinstance(target, DiscreteTarget):
        states = list(range(target.n)) if target.points is None else target.points
        out["chi2_pvalue"] = chi2_stationarity(data[:, 4], target.w, states)
    return out


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imcmc", description="Involutive MCMC kernels: sample, verify, diagnose.")
    p.add_argument("--version", action="version", version=f"imcmc {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="TOML or JSON run config")
        sp.add_argument("--seed", type=int, metavar="U64")
        sp.add_argument("--out", metavar="PATH")

    s = sub.add_parser("sample", help="run chains and write samples.csv and summary.json")
    common(s)
    s.add_argument("--chains", type=int, metavar="N")
    s.add_argument("--iters", type=int, metavar="N")
    s.add_argument("--burn", type=int, metavar="N")
    s.add_argument("--thin", type=int, metavar="N")
    s.add_argument("--kernel", help=f"one of: {', '.join(KERNELS)}")
    s.add_argument("--target", help=f"one of: {', '.join(TARGETS)}")
    s.add_argument("--dim", type=int, help="gaussian dimension")
    s.add_argument("--trace", action="store_true", help="write NUTS trajectory records to trace.jsonl")

    v = sub.add_parser("verify", help="exact enumeration checks")
    common(v)
    v.add_argument("--tol", type=float, metavar="FLOAT")
    v.add_argument("--instance", action="append", help="corpus instance (repeatable); default: all")
    v.add_argument("--kernel", help="verify this kernel on the configured discrete target instead")
    v.add_argument("--target", help="target for --kernel")
    v.add_argument("--list", action="store_true", help="list corpus instances and exit")

    d = sub.add_parser("diagnose", help="ESS, autocorrelation and stationarity diagnostics for a samples CSV")
    d.add_argument("samples", metavar="CSV")
    d.add_argument("--config", metavar="PATH", help="config naming the target")
    d.add_argument("--target", help="target name (default parameters)")
    d.add_argument("--out", metavar="PATH", help="write JSON here instead of stdout")
    d.add_argument("--max-lag", type=int, default=200)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "sample":
            cfg = config_from_args(args)
            summary = cmd_sample(cfg)
            print(json.dumps({"out": cfg.out, "n_samples": summary["n_samples"],
                              "acceptance_rate": summary["acceptance_rate"]}))
            return EXIT_OK
        if args.cmd == "verify":
            if args.list:
                for name, inst in CORPUS.items():
                    print(f"{name:22s} {inst.module:18s} {','.join(inst.checks):20s} {inst.note}")
                return EXIT_OK
            cfg = config_from_args(args)
            explicit = bool(args.kernel) or (bool(args.config) and not cfg.instances
                                             and "kernel" in load_config_file(args.config))
            results, ok = cmd_verify(cfg, explicit)
            for r in results:
                for line in r["lines"]:
                    print(f"{r['instance']:22s} {line}")
            if args.out:
                with open(args.out, "w") as fh:
                    json.dump({"pass": ok, "tol": cfg.tol, "results": results}, fh, indent=2, default=_json_default)
            print("ALL PASS" if ok else "FAILURES")
            return EXIT_OK if ok else EXIT_CHECK
        if args.cmd == "diagnose":
            spec = None
            if args.config:
                spec = RunConfig.from_dict(load_config_file(args.config)).target
            elif args.target:
                spec = {"name": args.target}
                if args.target not in TARGETS:
                    raise ConfigError(f"unknown target {args.target!r}; valid targets: {', '.join(TARGETS)}")
            res = cmd_diagnose(args.samples, spec, args.max_lag)
            text = json.dumps(res, indent=2, default=_json_default)
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write(text)
            else:
                print(text)
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnsupportedOperation as exc:
        print(f"unsupported: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

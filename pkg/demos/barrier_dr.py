"""Deterministic delayed rejection across a zero-probability site.

On a 3-cycle whose middle site has no mass, the standard two-stage ladder
never leaves its starting site. A third stage that jumps two sites crosses
the barrier.
"""

from __future__ import annotations

import math

from imcmc.core import make_rng
from imcmc.delayed_rejection import DeterministicDRKernel

W = {0: 1.0, 1: 0.0, 2: 2.0}


def log_pi(s):
    return math.log(W[s[0]]) if W[s[0]] > 0 else -math.inf


def psi(s):
    return ((s[0] + s[1]) % 3, s[1])


def sigma(s):
    return (s[0], -s[1])


def visits(kernel, n=10_000, seed=0):
    rng = make_rng(seed)
    state = (0, 1)
    counts = {0: 0, 2: 0}
    for _ in range(n):
        state = kernel.step(rng, state).state
        counts[state[0]] += 1
    return {k: v / n for k, v in counts.items()}


def main():
    one = lambda s: sigma(psi(s))
    two = lambda s: sigma(psi(psi(s)))
    ident = lambda s: s
    print("n=2 ladder:", visits(DeterministicDRKernel([one, ident], log_pi)))
    print("n=3 ladder:", visits(DeterministicDRKernel([one, two, ident], log_pi)))
    print("target:    ", {0: 1 / 3, 2: 2 / 3})


if __name__ == "__main__":
    main()

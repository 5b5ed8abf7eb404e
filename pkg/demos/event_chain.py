"""Discrete-time event chain for hard disks on a periodic box.

Alternates velocity/active-particle refreshment with the event-chain move
and writes one JSON snapshot per saved configuration.
"""

from __future__ import annotations

import sys

import numpy as np

from imcmc.core import CycleKernel, make_rng
from imcmc.delayed_rejection import (
    EventChainKernel,
    EventChainRefresh,
    ParticleConfig,
    Torus,
    feasible,
    radii_matrix,
)


def main(steps: int = 2000, every: int = 200, seed: int = 3):
    geom = Torus(6.0, 2)
    m, delta, speed = 9, 1.0, 0.3
    x = tuple(geom.wrap((2.0 * (k % 3) + 0.5, 2.0 * (k // 3) + 0.5)) for k in range(m))
    D = radii_matrix(delta, m)
    assert feasible(x, D, geom)
    vels = [(speed, 0.0), (-speed, 0.0), (0.0, speed), (0.0, -speed)]
    kernel = CycleKernel([EventChainRefresh(m, vels), EventChainKernel(delta, m, geom)])
    rng = make_rng(seed)
    state = (x, vels[0], 0)
    moved = 0
    for t in range(1, steps + 1):
        res = kernel.step(rng, state)
        moved += res.state[0] != state[0]
        state = res.state
        if t % every == 0:
            cfg = ParticleConfig(state[0], state[1], state[2], D, geom)
            sys.stdout.write(cfg.snapshot(t) + "\n")
    assert feasible(state[0], D, geom)
    print(f"# translation moves: {moved}/{steps}", file=sys.stderr)


if __name__ == "__main__":
    main()

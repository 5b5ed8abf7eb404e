"""Compare several kernels on a correlated 2-d Gaussian.

Runs RWM, MALA, HMC, the guided random walk and NUTS from the same seed
and prints acceptance rates, means and effective sample sizes.
"""

from __future__ import annotations

import numpy as np

from imcmc.chain_proposals import NUTSHMCKernel
from imcmc.core import make_rng
from imcmc.kernels_classic import RWMKernel
from imcmc.kernels_nonrev import grw_kernel, hmc_kernel, mala_kernel, velocity_refresh, with_refresh
from imcmc.verify import ess_autocorr

COV = np.array([[1.0, 0.8], [0.8, 1.0]])
PREC = np.linalg.inv(COV)


def log_pi(x):
    x = np.asarray(x, dtype=float)
    return -0.5 * float(x @ PREC @ x)


def grad(x):
    return -PREC @ np.asarray(x, dtype=float)


def run(kernel, state, n, rng, lifted=True):
    xs, acc = [], 0
    for _ in range(n):
        res = kernel.step(rng, state)
        state = res.state
        acc += res.accepted
        xs.append(np.asarray(state[0] if lifted else state, dtype=float))
    return np.array(xs), acc / n


def main(n: int = 5000, seed: int = 1):
    x0 = np.zeros(2)
    v0 = np.zeros(2)
    refresh = velocity_refresh(lambda rng, x: 0.5 * rng.standard_normal(2))
    kernels = {
        "rwm": (RWMKernel(log_pi, scale=1.2), x0, False),
        "mala": (mala_kernel(log_pi, grad, 0.8), (x0, v0), True),
        "hmc": (hmc_kernel(log_pi, grad, 0.25, k=8), (x0, v0), True),
        "grw": (with_refresh(grw_kernel(log_pi), refresh, 0.1), (x0, v0), True),
        "nuts": (NUTSHMCKernel(log_pi, grad, 0.3), (x0, v0), True),
    }
    print(f"{'kernel':6s} {'accept':>7s} {'mean x0':>8s} {'mean x1':>8s} {'ESS x0':>8s} {'ESS x1':>8s}")
    for name, (kern, s0, lifted) in kernels.items():
        xs, acc = run(kern, s0, n, make_rng(seed), lifted)
        ess = [ess_autocorr(xs[:, j])["ess"] for j in range(2)]
        m = xs.mean(axis=0)
        print(f"{name:6s} {acc:7.3f} {m[0]:8.3f} {m[1]:8.3f} {ess[0]:8.0f} {ess[1]:8.0f}")


if __name__ == "__main__":
    main()

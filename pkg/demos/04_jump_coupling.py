"""The jump refinement X~ = x + gamma~/sqrt(N) and its variance against the covariance ODE."""
import warnings

import numpy as np

from supermarket import ModelParams, rounded_scales
from supermarket.couplings import simulate_jump_coupling
from supermarket.ctmc import RngStream
from supermarket.diffusion import covariance_solve
from supermarket.fluid import fluid_solve

warnings.simplefilter("ignore", RuntimeWarning)

p = ModelParams(lam=0.7, d=2, n_servers=10**4, t0=1.0, threshold=5.0)
c0 = rounded_scales(p)
fl = fluid_solve(p, c0 / p.n_servers)
V = covariance_solve(fl, p).V[-1]
paths = [simulate_jump_coupling(p, fl, c0, rng=RngStream(i, 0)) for i in range(300)]
g1 = np.array([q.gamma[-1, 0] for q in paths])
dev = np.array([q.sup_dev_tilde[: p.m - 1].max() for q in paths])
print(f"Var(gamma~^1_t0) = {g1.var(ddof=1):.4f}   V_11(t0) = {V[0, 0]:.4f}")
print(f"median sup |X - X~| over levels < m: {np.median(dev):.2e}")
kinds = np.sum([q.kinds for q in paths], axis=0)
print(f"accepted atoms (joint, X only, W only): {kinds.tolist()}")

"""sqrt(N)(X - x) against the Gaussian field from Euler-Maruyama."""
import math
import warnings

import numpy as np

from supermarket import ModelParams, rounded_scales
from supermarket.ctmc import RngStream, simulate_tail
from supermarket.diffusion import covariance_solve, simulate_gamma
from supermarket.fluid import fluid_solve
from supermarket.stats import ks_two_sample

warnings.simplefilter("ignore", RuntimeWarning)

p = ModelParams(lam=0.7, d=2, n_servers=10**4, t0=1.0, threshold=5.0)
c0 = rounded_scales(p)
fl = fluid_solve(p, c0 / p.n_servers)
cov = covariance_solve(fl, p)
g = simulate_gamma(fl, p, rng=RngStream(0, 1), n_replicas=1000, obs_times=[1.0]).gamma[0, :, 0]
X = np.array([simulate_tail(p, c0, rng=RngStream(i, 0)).fractions[-1, 0] for i in range(1000)])
z = math.sqrt(p.n_servers) * (X - fl.at(1.0)[0])
print(f"variance: chain {z.var(ddof=1):.4f}, Gaussian {g.var(ddof=1):.4f}, "
      f"ODE {cov.V[-1, 0, 0]:.4f}")
print("KS statistic %.4f, p-value %.3f" % ks_two_sample(z, g))

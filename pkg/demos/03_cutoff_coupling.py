"""Level m behaves like an M/M/inf queue fed at rate N lam (x^{m-1})^d."""
import warnings

import numpy as np

from supermarket import ModelParams, rounded_scales
from supermarket.couplings import mminf_poisson_mean, simulate_cutoff_coupling
from supermarket.ctmc import RngStream
from supermarket.fluid import fluid_solve

warnings.simplefilter("ignore", RuntimeWarning)

p = ModelParams(lam=0.5, d=2, n_servers=10**5, t0=1.0, threshold=5.0)
c0 = rounded_scales(p, truncate_at=p.m - 1)
fl = fluid_solve(p, c0 / p.n_servers)
paths = [simulate_cutoff_coupling(p, fl, c0, rng=RngStream(i, 0)) for i in range(200)]
hats = np.array([c.hat_counts[-1] for c in paths])
mu = mminf_poisson_mean(fl, p.m, p.n_servers, p.t0)
print(f"cutoff level m = {p.m}")
print(f"P(level m+1 ever occupied) ~ {np.mean([np.isfinite(c.t1) for c in paths]):.3f}")
print(f"P(chain and M/M/inf disagree by t0) ~ {np.mean([np.isfinite(c.t2) for c in paths]):.3f}")
print(f"M/M/inf count at t0: mean {hats.mean():.3f}, var {hats.var(ddof=1):.3f}, "
      f"Poisson mean {mu:.3f}")

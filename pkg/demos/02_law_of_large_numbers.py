"""Chain versus fluid: sup deviations shrink like N^(-1/2) and stay O(1) in a-units."""
import math
import warnings

import numpy as np

from supermarket import ModelParams, rounded_scales
from supermarket.ctmc import RngStream, path_statistics, simulate_tail
from supermarket.fluid import fluid_solve

warnings.simplefilter("ignore", RuntimeWarning)

for N in (10**3, 10**4, 10**5):
    p = ModelParams(lam=0.7, d=2, n_servers=N, t0=1.0, threshold=5.0)
    c0 = rounded_scales(p)
    fl = fluid_solve(p, c0 / N)
    reps = [path_statistics(simulate_tail(p, c0, rng=RngStream(i, 0), fluid=fl), fl, p.a, p.m)
            for i in range(50)]
    level1 = np.median([r.sup_dev[0] for r in reps])
    scaled = np.median([r.max_scaled for r in reps])
    print(f"N={N:>6}  m={p.m}  median sup|X^1-x^1| = {level1:.4f} "
          f"(x sqrt(N) = {level1 * math.sqrt(N):.2f})  median scaled sup = {scaled:.2f}")

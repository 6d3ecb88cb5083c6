"""Fluid limit: the fixed point a and attraction of the empty system to it."""
import warnings

import numpy as np

from supermarket import ModelParams
from supermarket.fluid import fluid_solve
from supermarket.model import drift, scaled_norm

warnings.simplefilter("ignore", RuntimeWarning)

p = ModelParams(lam=0.7, d=2, n_servers=10**4, t0=40.0, k_max=8)
print("scales a_k:", np.array2string(p.a[:5], precision=4))
print("drift at a, scaled:", scaled_norm(drift(p.a, p.lam, p.d), p.a))

path = fluid_solve(p, np.zeros(p.k_max))
for t in (1, 5, 10, 20, 40):
    x = path.at(float(t))
    print(f"t={t:>2}  x^1..x^3 = {np.array2string(x[:3], precision=5)}  "
          f"scaled distance to a = {scaled_norm(x - p.a, p.a):.3e}")

"""Closed-form flow quantities on a Gaussian mixture, checked by Monte Carlo.

The conditional velocity eps - x0 scatters around the marginal velocity
u_t(x) with covariance Sigma_t(x).  This script prints the oracle value of
E[tr Sigma_t]/D next to its Monte Carlo estimate, then shows that for two
point masses Sigma_t at the midpoint grows like 1/t^2 as t -> 0.
"""

import numpy as np

from snapflow.numerics import make_rng
from snapflow.oracle import (
    MixtureSpec,
    conditional_covariance,
    marginal_velocity,
    verify_theorem1,
)

mix = MixtureSpec([0.5, 0.5], [[-1.5, 0.0], [1.5, 0.0]], [0.5, 0.5])
grid = [0.1, 0.3, 0.5, 0.7, 0.9]

rep = verify_theorem1(mix, grid, 100_000, make_rng(7, 10))
print("t     oracle   monte-carlo   stderr")
for t, a, m, se in zip(grid, rep.analytic, rep.mc, rep.mc_stderr):
    print(f"{t:.1f}  {a:8.4f}  {m:11.4f}  {se:8.4f}")
print("report:", rep.status)

# the velocity field at a few points, half way along the path
x = np.array([[-1.0, 0.0], [0.0, 0.0], [1.0, 0.5]])
print("\nu_0.5(x) =\n", marginal_velocity(mix, x, 0.5))

# two point masses: the posterior at x=0 stays split, so Var(x0|x_t)/t^2 = 1/t^2
pts = MixtureSpec([0.5, 0.5], [[-1.0], [1.0]], [0.0, 0.0])
print("\n t      Sigma_t(0)   t^2 * Sigma_t(0)")
for t in (0.4, 0.2, 0.1, 0.05):
    s = conditional_covariance(pts, np.zeros(1), t)
    print(f"{t:5.2f}  {s:11.2f}   {t * t * s:.6f}")

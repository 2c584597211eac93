"""First-order convergence of the Euler sampler on an affine field.

For dx/dt = A x + b the exact solution from t=1 to t=0 is available through
the matrix exponential, so the global error of K Euler steps can be read off
directly.  Halving the step size halves the error.
"""

import numpy as np
from scipy.linalg import expm

from snapflow.flow import euler_sample
from snapflow.numerics import make_rng

rng = make_rng(0, 80)
A = rng.standard_normal((3, 3))
A *= 0.3 / np.max(np.abs(np.linalg.eigvals(A)))
b = rng.standard_normal(3)
x1 = rng.standard_normal((1, 1, 3))

E = expm(-A)
exact = E @ x1[0, 0] + (E - np.eye(3)) @ np.linalg.solve(A, b)

Ks = np.array([1, 2, 4, 8, 16, 32])
errs = np.array([
    np.linalg.norm(euler_sample(lambda x, s, t, c=None: x @ A.T + b, x1, int(K))[0, 0] - exact)
    for K in Ks
])
for K, e in zip(Ks, errs):
    print(f"K={K:3d}  error={e:.3e}")
print("log-log slope:", np.polyfit(np.log(Ks), np.log(errs), 1)[0])

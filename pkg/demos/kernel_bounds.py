"""Robin heat kernel: closed form vs quadrature, and where two printed bounds break.

    python3 demos/kernel_bounds.py
"""
import numpy as np

from halfspace_rg import heatkernel as hk

rng = np.random.default_rng(0)
lam = 10 ** rng.uniform(-3, 2, 400)
s = np.sqrt(lam)
z1, z2 = rng.uniform(0, 4, (2, 400)) * s
c = 10 ** rng.uniform(-2, 3, 400) / s
cf = hk.p_robin(lam, z1, z2, c)
q = np.array([hk.p_robin_quad(*a) for a in zip(lam, z1, z2, c)])
print(f"p_R closed form vs quad, 400 draws: max rel err {np.max(np.abs(cf / q - 1)):.2e}")

# c=0 gives the unhalved image sum, large c approaches Dirichlet
print("p_R(1; 0.5, 1.5, c) for c = 0, 1, 1e2, 1e4, inf:",
      [f"{float(hk.p_robin(1.0, 0.5, 1.5, cc)):.6f}" for cc in (0.0, 1.0, 1e2, 1e4, hk.DIRICHLET)])

# moment bound: with p_B(tau) on the right it fails once |z1-z2| >> sqrt(tau)
for d in (1.0, 3.0, 6.0):
    a = hk.moment_bound_as_printed(2, 1.0, 0.0, d)
    b = hk.moment_bound(2, 1.0, 0.0, d)
    print(f"|z1-z2|={d}: printed lhs/rhs={float(a[0] / a[1]):.3f}, with p_B(2 tau) {float(b[0] / b[1]):.3f}")

# interpolation lemma: stated constant vs the corrected one
args = (0.44, 0.6, 26.0, 27.0, 0.2, 0.14, 0.063, 0.0045)
for const in ("stated", "corrected"):
    lhs, rhs = hk.lemma37(*args, constant=const)
    print(f"lemma, {const} constant: lhs/rhs = {lhs / rhs:.4f}")

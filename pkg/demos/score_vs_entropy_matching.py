# When the data already sit in the stationary state, an entropy-matching
# network has nothing to learn, while the squared score that a score-matching
# network must output still integrates to a positive number.

import numpy as np

from entroflux.gaussmix import GaussianMixture
from entroflux.process import vp
from entroflux.thermo import default_grid, entropy_curve, sm_entropy_and_identity

spec = vp(2.0, 2.0)
stationary = GaussianMixture.gaussian([0.0], 1.0)
grid = default_grid(spec, 500)

em = entropy_curve("IdealTot", stationary, spec, grid=grid, n=10_000,
                   rng=np.random.default_rng(0))
sm = sm_entropy_and_identity(stationary, spec, n=10_000, rng=np.random.default_rng(1), grid=grid)

print(f"entropy-matching total     {em.final.value:.3e}")
print(f"score-matching entropy     {sm.s_sm.value:.4f} +- {sm.s_sm.std_err:.4f}")
print(f"Gibbs-entropy form         {sm.rhs.value:.4f} +- {sm.rhs.std_err:.4f}")
print(f"drift term (D/2) int beta  {sm.beta_term:.4f}")

# Langevin sampling from the latent prior exp(-E(z)) N(z; 0, I).
# With a zero head the target is exactly N(0, I), a good sanity check.
import numpy as np

from fineosr import ebm
from fineosr.numkit import MLPSpec, ParamStore, Rng

spec = MLPSpec((2, 8, 4))
head = ParamStore()
ebm.init_head(head, spec, Rng(0))
for name in head.names():
    head.set(name, np.zeros_like(head.value(name)))

z0 = 3.0 * Rng(1).normal((4096, 2))
for steps in (10, 50, 200, 500):
    z = ebm.sgld_sample(head, z0, ebm.SgldConfig(steps, 0.1), Rng(2), spec)
    print(f"{steps:>4} steps  mean {z.mean(0).round(3)}  var {z.var(0).round(3)}")

# a random head tilts the prior toward low-energy regions
head = ParamStore()
ebm.init_head(head, spec, Rng(3))
z = ebm.sgld_sample(head, Rng(4).normal((4096, 2)), ebm.SgldConfig(200, 0.1), Rng(5), spec)
e_prior = ebm.energy(head, z, spec).mean()
e_noise = ebm.energy(head, Rng(6).normal((4096, 2)), spec).mean()
print(f"mean energy: sampled {e_prior:.3f}, plain Gaussian {e_noise:.3f}")

# Streaming class densities and low-density virtual outliers.
import numpy as np

from fineosr import uvos
from fineosr.numkit import Rng

r = Rng(0)
d = 2
mu = 1.0 + 0.3 * r.normal((500, d))
sigma = np.exp(0.3 * r.normal((500, d))) * 0.5

dens = uvos.ClassDensity.empty(0, d)
for chunk in np.array_split(np.arange(500), 7):
    uvos.update_density(dens, mu[chunk], sigma[chunk])
print("mean", dens.mean.round(4), "precision", dens.precision.round(1))

P = sigma ** -2
print("one-shot mean", ((P * mu).sum(0) / P.sum(0)).round(4))

cfg = uvos.OutlierConfig(candidates=200, retained=20)
v, z, ll, keep = uvos.sample_virtual_outliers(dens, cfg, r.child("s"), return_raw=True)
drop = np.setdiff1d(np.arange(200), keep)
print(f"retained log-density max {ll[keep].max():.3f} <= discarded min {ll[drop].min():.3f}")
print("whitened outlier radii", np.sqrt((v ** 2).sum(1)).round(2))

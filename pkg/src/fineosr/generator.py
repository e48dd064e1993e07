"""Latent-to-feature decoder and the energy-based VAE objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ebm
from . import numkit as nk
from .encoder import Posterior, reparameterize
from .numkit import MLPSpec


def decode(params, z, spec: MLPSpec):
    return nk.mlp_forward(params, "beta", z, spec)


def recon_loss(x_hat, x):
    """``0.5 * |x_hat - x|^2`` per row (unit-variance Gaussian, constants dropped)."""
    x = np.asarray(x, dtype=float)
    if nk.value_of(x_hat).shape != x.shape:
        raise ValueError("recon_loss: shape mismatch")
    return nk.mul(nk.total(nk.square(nk.sub(x_hat, x)), axis=-1), 0.5)


def kl_to_standard_normal(post: Posterior):
    """Closed-form ``KL(N(mu, sigma^2) || N(0, I))`` per row."""
    t = nk.sub(nk.add(nk.square(post.mu), nk.square(post.sigma)), nk.add(nk.mul(post.log_sigma, 2.0), 1.0))
    return nk.mul(nk.total(t, axis=-1), 0.5)


@dataclass
class EvaeTerms:
    recon: object
    energy: object
    kl: object
    z: object

    @property
    def total(self):
        return nk.add(nk.add(self.recon, self.energy), self.kl)


def evae_loss(dec_params, head_params, post: Posterior, x, dec_spec: MLPSpec, head_spec: MLPSpec,
              rng=None, noise=None) -> EvaeTerms:
    """Single-sample estimate of recon + E_alpha(z~) + KL, batch-averaged.

    Pass the head as frozen arrays so only decoder and encoder receive
    gradients.
    """
    z = reparameterize(post, rng, noise)
    rec = nk.mean(recon_loss(decode(dec_params, z, dec_spec), x))
    en = nk.mean(ebm.energy(head_params, z, head_spec))
    kl = nk.mean(kl_to_standard_normal(post))
    return EvaeTerms(rec, en, kl, z)

"""Latent energy prior and open-set classifier head.

The head ``f_alpha`` maps a latent to K logits.  Its energy is
``E(z) = -logsumexp(f_alpha(z))`` and the prior density is
``p(z) ∝ exp(-E(z)) N(z; 0, I)``; the normalizer is never computed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import DivergenceError, MLPSpec, ParamStore, Rng

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class SgldConfig:
    steps: int = 100
    step_size: float = 0.4
    noise_on: bool = True

    def __post_init__(self):
        if self.steps < 1 or not self.step_size > 0:
            raise ValueError("SGLD needs steps >= 1 and step_size > 0")


def init_head(store: ParamStore, spec: MLPSpec, rng: Rng, prefix: str = "alpha") -> None:
    nk.init_mlp(store, prefix, spec, rng)


def logits(params, z, spec: MLPSpec, prefix: str = "alpha"):
    return nk.mlp_forward(params, prefix, z, spec)


def energy(params, z, spec: MLPSpec, prefix: str = "alpha"):
    """Per-row energy ``-logsumexp(logits)``."""
    return nk.mul(nk.lse(logits(params, z, spec, prefix), axis=-1), -1.0)


def prior_logdensity_unnorm(params, z, spec: MLPSpec, prefix: str = "alpha"):
    """``-E(z) - |z|^2 / 2`` (log prior up to its normalizing constant)."""
    zz = nk.value_of(z)
    return -nk.value_of(energy(params, zz, spec, prefix)) - 0.5 * np.sum(zz * zz, axis=-1)


def energy_grad_z(store: ParamStore, z: np.ndarray, spec: MLPSpec, prefix: str = "alpha") -> np.ndarray:
    """``dE/dz`` for a batch, by an explicit backward pass through the head."""
    lg = nk.value_of(logits(store, z, spec, prefix))
    return nk.mlp_input_grad(store, prefix, z, spec, -nk.softmax(lg, axis=-1))


def sgld_sample(store: ParamStore, z0: np.ndarray, cfg: SgldConfig, rng: Rng, spec: MLPSpec,
                prefix: str = "alpha") -> np.ndarray:
    """Langevin chains on ``U(z) = E(z) + |z|^2 / 2``.

    ``z <- z - (s^2 / 2) grad U(z) + s * eps``.  Returns the final iterate as
    a plain array (no gradient path back into the sampler).
    """
    z = np.array(z0, dtype=float, copy=True)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite SGLD initialization")
    s = cfg.step_size
    for t in range(cfg.steps):
        # overflow is reported below as a divergence, not a warning
        with np.errstate(over="ignore", invalid="ignore"):
            grad_u = energy_grad_z(store, z, spec, prefix) + z
            z = z - 0.5 * s * s * grad_u
            if cfg.noise_on:
                z = z + s * rng.normal(z.shape)
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"SGLD diverged at step {t}")
    return z


def ebm_loss(params, z_post, z_prior, spec: MLPSpec, prefix: str = "alpha"):
    """Contrast ``mean E(z_post) - mean E(z_prior)``; both batches are constants."""
    zp, ze = np.asarray(nk.value_of(z_post)), np.asarray(z_prior)
    if zp.shape[0] == 0 or ze.shape[0] == 0:
        raise ValueError("ebm_loss needs non-empty batches")
    return nk.sub(nk.mean(energy(params, zp, spec, prefix)), nk.mean(energy(params, ze, spec, prefix)))


def classify(params, z, spec: MLPSpec, prefix: str = "alpha"):
    """Softmax class probabilities."""
    return nk.exp(nk.log_softmax(logits(params, z, spec, prefix), axis=-1))


def _pick(probs, y):
    y = np.asarray(y, dtype=np.int64)
    K = nk.value_of(probs).shape[-1]
    if np.any((y < 0) | (y >= K)):
        raise ValueError(f"label out of range [0, {K})")
    if nk.value_of(probs).ndim == 1:
        return probs[int(y)]
    return probs[np.arange(len(y)), y]


def cls_loss(probs, y):
    """``-log probs[y]`` (per row for a batch)."""
    return nk.mul(nk.log(nk.clip(_pick(probs, y), PROB_CLAMP, np.inf)), -1.0)


def _class_entropy(p):
    return nk.mul(nk.mul(p, nk.log(nk.clip(p, PROB_CLAMP, np.inf))), -1.0)


def aib_term(probs, y):
    """Class-coupled mutual information estimate ``CI = CH_marg - CH_cond``.

    ``CH(p) = -p_y log p_y`` at the sample's own label; the marginal uses the
    batch-mean probability vector.  Larger is better; trainers subtract it.
    """
    pv = nk.value_of(probs)
    y = np.asarray(y, dtype=np.int64)
    if pv.ndim != 2 or pv.shape[0] != len(y):
        raise ValueError("aib_term: probs must be B x K with B labels")
    cond = nk.mean(_class_entropy(_pick(probs, y)))
    pbar = nk.mean(probs, axis=0)
    marg = nk.mean(_class_entropy(pbar[y]))
    return nk.sub(marg, cond)

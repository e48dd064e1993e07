"""Uncertainty-aware virtual outlier synthesis.

Each known class keeps two running d-vectors: the sum of posterior
precisions and the precision-weighted sum of posterior means.  The
class density is the diagonal Gaussian with mean ``sum(P mu) / sum(P)``
and precision ``sum(P)``.  Virtual outliers are the lowest-density draws
from that Gaussian, whitened by the class statistics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import MLPSpec, Rng, StateError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class ClassDensity:
    k: int
    accum_Pmu: np.ndarray
    accum_P: np.ndarray
    n_seen: int = 0

    @classmethod
    def empty(cls, k: int, d: int) -> "ClassDensity":
        return cls(k, np.zeros(d), np.zeros(d), 0)

    @property
    def mean(self) -> np.ndarray:
        if self.n_seen == 0:
            raise StateError(f"class {self.k} density has no data")
        return self.accum_Pmu / self.accum_P

    @property
    def precision(self) -> np.ndarray:
        if self.n_seen == 0:
            raise StateError(f"class {self.k} density has no data")
        return self.accum_P

    def reset(self) -> None:
        self.accum_Pmu[...] = 0.0
        self.accum_P[...] = 0.0
        self.n_seen = 0

    def copy(self) -> "ClassDensity":
        return ClassDensity(self.k, self.accum_Pmu.copy(), self.accum_P.copy(), self.n_seen)


@dataclass(frozen=True)
class OutlierConfig:
    candidates: int = 200  # S
    retained: int = 20  # H
    epsilon_mode: str = "quantile"
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.retained > self.candidates:
            raise ValueError("cannot retain more outliers than candidates")
        if self.epsilon_mode not in ("quantile", "absolute"):
            raise ValueError(f"unknown epsilon_mode {self.epsilon_mode!r}")
        if self.epsilon_mode == "absolute" and not self.epsilon > 0:
            raise ValueError("absolute mode needs epsilon > 0")


def update_density(density: ClassDensity, mu, sigma) -> ClassDensity:
    """Fold a batch of posteriors (rows of ``mu``, ``sigma``) into the running sums."""
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if mu.shape[0] == 0:
        return density
    if mu.shape != sigma.shape or np.any(sigma <= 0):
        raise ValueError("update_density needs matching shapes and sigma > 0")
    P = 1.0 / (sigma * sigma)
    density.accum_Pmu += np.sum(P * mu, axis=0)
    density.accum_P += np.sum(P, axis=0)
    density.n_seen += mu.shape[0]
    return density


def density_loglik(density: ClassDensity, z) -> np.ndarray:
    """Diagonal Gaussian log-density with mean/precision from ``density``."""
    P, m = density.precision, density.mean
    z = np.asarray(z, dtype=float)
    return 0.5 * np.sum(np.log(P) - LOG_2PI) - 0.5 * np.sum(P * (z - m) ** 2, axis=-1)


def sample_virtual_outliers(density: ClassDensity, cfg: OutlierConfig, rng: Rng, return_raw: bool = False):
    """Whitened low-density draws ``(z - mean) * sqrt(P)`` from one class.

    Quantile mode keeps the ``retained`` lowest-density of ``candidates``
    draws; absolute mode keeps draws with density below ``epsilon``.
    """
    P, m = density.precision, density.mean
    z = m + rng.normal((cfg.candidates, m.size)) / np.sqrt(P)
    ll = density_loglik(density, z)
    if cfg.epsilon_mode == "quantile":
        keep = np.argsort(ll, kind="stable")[: cfg.retained]
    else:
        keep = np.flatnonzero(ll < np.log(cfg.epsilon))
    v = (z[keep] - m) * np.sqrt(P)
    if return_raw:
        return v, z, ll, keep
    return v


def normalize_known(z, labels, densities: dict):
    """Whiten each row of ``z`` with the statistics of its own class.

    Tape-aware: gradients flow through ``z`` when it is a Var.
    """
    labels = np.asarray(labels, dtype=np.int64)
    for k in np.unique(labels):
        if int(k) not in densities or densities[int(k)].n_seen == 0:
            raise StateError(f"no fitted density for class {int(k)}")
    mu = np.stack([densities[int(k)].mean for k in labels])
    scale = np.sqrt(np.stack([densities[int(k)].precision for k in labels]))
    return nk.mul(nk.sub(z, mu), scale)


def uvos_loss(params, v_plus, v_minus, spec: MLPSpec, prefix: str = "theta"):
    """Binary cross-entropy of the outlier detector over both sets.

    Target index 1 ("unknown") for virtual outliers, 0 for whitened known
    data.  ``v_plus`` is used as a constant.
    """
    vp = np.asarray(nk.value_of(v_plus), dtype=float).reshape(-1, spec.n_in)
    n_minus = nk.value_of(v_minus).shape[0] if v_minus is not None else 0
    if vp.shape[0] == 0 and n_minus == 0:
        raise ValueError("uvos_loss needs at least one sample")
    parts = []
    if vp.shape[0]:
        lp = nk.log_softmax(nk.mlp_forward(params, prefix, vp, spec), axis=-1)
        parts.append(lp[:, 1])
    if n_minus:
        lm = nk.log_softmax(nk.mlp_forward(params, prefix, v_minus, spec), axis=-1)
        parts.append(lm[:, 0])
    return nk.mul(nk.mean(nk.concat(parts, axis=0)), -1.0)


def detector_probs(params, v, spec: MLPSpec, prefix: str = "theta") -> np.ndarray:
    return nk.softmax(nk.value_of(nk.mlp_forward(params, prefix, v, spec)), axis=-1)

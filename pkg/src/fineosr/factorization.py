"""Discrete sanity check of the attribute-conditioned factorization.

The generative model factorizes as

    p(x, z, a, y) = p(y | a, z) p(a | z) p(z) p(x | z)

so the joint splits into an attribute-conditioned latent EBM term
``p(y | a, z) p(z) p(x | z)`` and the attribute predictor ``p(a | z)``.
``check_factorization`` verifies the split on an explicit joint table by
computing every factor from the table itself (marginalizing), never from
the factors used to build it. A table whose y depends on x given (a, z)
breaks the identity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import Rng

AXES = ("x", "z", "a", "y")


@dataclass
class ToyJointTable:
    """Joint probability table indexed ``p[x, z, a, y]``."""

    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.ndim != 4:
            raise ValueError(f"joint table must be 4-D over (x, z, a, y), got shape {self.p.shape}")
        if not np.all(np.isfinite(self.p)) or np.any(self.p < 0):
            raise ValueError("joint table has negative or non-finite entries")
        total = float(self.p.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"joint table sums to {total!r}, not 1")

    @property
    def shape(self):
        return self.p.shape

    @classmethod
    def from_factors(cls, p_y_az, p_a_z, p_z, p_x_z) -> "ToyJointTable":
        """Assemble the joint from conditional tables.

        p_y_az[a, z, y], p_a_z[z, a], p_z[z], p_x_z[z, x]; each conditional
        sums to 1 over its last axis.
        """
        p = np.einsum("azy,za,z,zx->xzay", p_y_az, p_a_z, p_z, p_x_z)
        return cls(p)

    @classmethod
    def random_factored(cls, rng: Rng, nx=2, nz=2, na=2, ny=2) -> "ToyJointTable":
        def cond(*shape):
            w = 0.05 + 0.95 * rng.uniform(shape)
            return w / w.sum(axis=-1, keepdims=True)

        return cls.from_factors(cond(na, nz, ny), cond(nz, na), cond(nz), cond(nz, nx))

    @classmethod
    def uniform(cls, nx=2, nz=2, na=2, ny=2) -> "ToyJointTable":
        n = nx * nz * na * ny
        return cls(np.full((nx, nz, na, ny), 1.0 / n))

    @classmethod
    def negative_control(cls, nx=2, nz=2, na=2, ny=2) -> "ToyJointTable":
        """y copies x regardless of (a, z): violates y independent of x given (a, z)."""
        p = np.zeros((nx, nz, na, ny))
        for x in range(nx):
            p[x, :, :, x % ny] = 1.0
        return cls(p / p.sum())


@dataclass
class FactorizationReport:
    holds: bool
    max_abs_error: float
    ci_violation: float
    n_cells: int
    tol: float

    def __str__(self):
        return (f"factorization {'holds' if self.holds else 'FAILS'}: max |log-diff| {self.max_abs_error:.3e} "
                f"over {self.n_cells} cells (tol {self.tol:g}); y-x dependence {self.ci_violation:.3e}")


def _cond(num, den):
    out = np.zeros(np.broadcast_shapes(num.shape, den.shape))
    np.divide(num, den, out=out, where=den > 0)
    return out


def check_factorization(table: ToyJointTable, tol: float = 1e-12) -> FactorizationReport:
    """Check log p(x,z,a,y) = log[p(y|a,z) p(z) p(x|z)] + log p(a|z) on every nonzero cell."""
    if not isinstance(table, ToyJointTable):
        table = ToyJointTable(table)
    p = table.p
    p_xz = p.sum(axis=(2, 3), keepdims=True)
    p_z = p_xz.sum(axis=0, keepdims=True)
    p_x_z = _cond(p_xz, p_z)
    p_za = p.sum(axis=(0, 3), keepdims=True)
    p_a_z = _cond(p_za, p_z)
    p_zay = p.sum(axis=0, keepdims=True)
    p_y_az = _cond(p_zay, p_za)
    p_y_axz = _cond(p, p.sum(axis=3, keepdims=True))

    mask = p > 0
    # zero-probability cells give -inf terms; they are masked out below
    with np.errstate(divide="ignore", invalid="ignore"):
        svebm = np.log(p_y_az) + np.log(p_z) + np.log(p_x_z)
        rhs = svebm + np.log(p_a_z)
        diff = np.log(p) - rhs
    err = np.abs(np.broadcast_to(diff, p.shape)[mask])
    max_err = float(err.max()) if err.size else 0.0
    ci = np.abs(p_y_axz - p_y_az)[p.sum(axis=3, keepdims=True).repeat(p.shape[3], axis=3) > 0]
    return FactorizationReport(bool(max_err <= tol), max_err, float(ci.max()) if ci.size else 0.0,
                               int(mask.sum()), tol)

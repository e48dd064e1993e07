"""Variational encoder with residual attribute feature aggregation.

Pipeline for a batch ``x`` (B, D):

    z      = f_phi1(x)                              global feature (B, D_feat)
    F      = [h_1(z), ..., h_M(z)]                  attribute features (B, M, d)
    a_hat  = sigmoid(score(GCN(F, A_hat)))          attribute scores (B, M)
    mu, log_sigma = f_phi2(z + MLP(cat(a_hat * F))) posterior (B, d) each

Functions take ``params``: a ParamStore or a ``name -> Var/ndarray`` mapping.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import MLPSpec, ParamStore, Rng

LOG_SIGMA_MIN, LOG_SIGMA_MAX = -6.0, 2.0
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class ModelDims:
    D: int = 32  # data features
    D_feat: int = 32  # global feature width
    d: int = 8  # latent width (also attribute feature width)
    M: int = 16  # attributes
    K: int = 8  # known classes
    enc_hidden: int = 64
    post_hidden: int = 32
    dec_hidden: int = 64

    @property
    def enc(self):
        return MLPSpec((self.D, self.enc_hidden, self.D_feat))

    @property
    def agg(self):
        return MLPSpec((self.M * self.d, self.D_feat, self.D_feat))

    @property
    def post(self):
        return MLPSpec((self.D_feat, self.post_hidden, 2 * self.d))

    @property
    def head(self):
        return MLPSpec((self.d, 2 * self.d, self.K))

    @property
    def dec(self):
        return MLPSpec((self.d, self.dec_hidden, self.D))

    @property
    def det(self):
        return MLPSpec((self.d, 2 * self.d, 2))


@dataclass
class AttributeGraph:
    A: np.ndarray  # binarized, re-weighted correlation (M, M)
    A_hat: np.ndarray  # normalized propagation matrix (M, M)
    A_raw: np.ndarray | None = None  # conditional co-occurrence before thresholding


@dataclass
class Posterior:
    mu: object  # (B, d) Var or ndarray
    log_sigma: object
    sigma: object


# parameter prefixes, grouped by optimizer
PHI = ("phi1.enc", "phi2.agg", "phi2.post")
OMEGA = ("omega.heads", "omega.gcn")


def init_encoder(store: ParamStore, dims: ModelDims, rng: Rng) -> None:
    nk.init_mlp(store, "phi1.enc", dims.enc, rng.child("enc"))
    nk.init_mlp(store, "phi2.agg", dims.agg, rng.child("agg"))
    nk.init_mlp(store, "phi2.post", dims.post, rng.child("post"))
    r = rng.child("heads")
    M, Df, d = dims.M, dims.D_feat, dims.d
    store.add("omega.heads.W0", r.normal((M, Df, d)) / np.sqrt(Df))
    store.add("omega.heads.b0", np.zeros((M, d)))
    store.add("omega.heads.W1", r.normal((M, d, d)) / np.sqrt(d))
    store.add("omega.heads.b1", np.zeros((M, d)))
    g = rng.child("gcn")
    store.add("omega.gcn.W0", g.normal((d, d)) / np.sqrt(d))
    store.add("omega.gcn.W1", g.normal((d, d)) / np.sqrt(d))
    store.add("omega.gcn.w_out", g.normal(d) / np.sqrt(d))
    store.add("omega.gcn.b_out", np.zeros(1))


def _getter(params):
    return params.value if isinstance(params, ParamStore) else params.__getitem__


def _check_width(x, n, what):
    if nk.value_of(x).shape[-1] != n:
        raise ValueError(f"{what}: expected width {n}, got {nk.value_of(x).shape[-1]}")


def encode(params, x, dims: ModelDims):
    """Global feature ``z = f_phi1(x)``."""
    _check_width(x, dims.D, "encode")
    return nk.mlp_forward(params, "phi1.enc", x, dims.enc)


def decompose(params, z, dims: ModelDims):
    """Attribute features ``F[b, m] = h_m(z[b])`` with independent heads."""
    _check_width(z, dims.D_feat, "decompose")
    get = _getter(params)
    h = nk.tanh(nk.add(nk.einsum("bi,mij->bmj", z, get("omega.heads.W0")), get("omega.heads.b0")))
    return nk.add(nk.einsum("bmi,mij->bmj", h, get("omega.heads.W1")), get("omega.heads.b1"))


def build_adjacency(train_attrs, tau: float = 0.4, p: float = 0.2) -> AttributeGraph:
    """Attribute correlation graph from closed-set attribute labels.

    Conditional co-occurrence ``count(i and j) / count(i)``, binarized at
    ``tau``; off-diagonal row mass is rescaled to ``p`` and the diagonal set
    to ``1 - p``.  ``A_hat = D^-1/2 (A + I) D^-1/2``.
    """
    if not 0.0 < tau < 1.0 or not 0.0 < p < 1.0:
        raise ValueError("tau and p must lie in (0, 1)")
    a = np.asarray(train_attrs, dtype=float)
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError("train_attrs must be a non-empty N x M matrix")
    co = a.T @ a
    counts = np.diag(co).copy()
    raw = np.divide(co, counts[:, None], out=np.zeros_like(co), where=counts[:, None] > 0)
    M = raw.shape[0]
    off = (raw >= tau).astype(float)
    np.fill_diagonal(off, 0.0)
    rs = off.sum(axis=1, keepdims=True)
    A = np.divide(off * p, rs, out=np.zeros_like(off), where=rs > 0)
    A[np.diag_indices(M)] = 1.0 - p
    S = A + np.eye(M)
    deg = S.sum(axis=1)
    inv = 1.0 / np.sqrt(deg)
    A_hat = inv[:, None] * S * inv[None, :]
    return AttributeGraph(A, A_hat, raw)


def predict_attributes(params, F, graph: AttributeGraph):
    """Two graph-convolution layers, then a shared per-node score and sigmoid."""
    get = _getter(params)
    Fv = nk.value_of(F)
    M = graph.A_hat.shape[0]
    if Fv.shape[-2] != M or Fv.shape[-1] != nk.value_of(get("omega.gcn.W0")).shape[0]:
        raise ValueError(f"graph has {M} nodes but F has shape {Fv.shape}")
    h = nk.tanh(nk.matmul(nk.matmul(graph.A_hat, F), get("omega.gcn.W0")))
    h = nk.tanh(nk.matmul(nk.matmul(graph.A_hat, h), get("omega.gcn.W1")))
    score = nk.add(nk.matmul(h, get("omega.gcn.w_out")), get("omega.gcn.b_out"))
    return nk.sigmoid(score)


def aggregate(params, z, F, a_hat, dims: ModelDims, use_rafa: bool = True) -> Posterior:
    """Residual masked aggregation followed by the posterior head."""
    Fv = nk.value_of(F)
    if use_rafa:
        if Fv.shape[-2:] != (dims.M, dims.d) or nk.value_of(a_hat).shape[-1] != dims.M:
            raise ValueError("aggregate: F / a_hat shapes disagree with dims")
        a = nk.value_of(a_hat)
        masked = nk.mul(nk.reshape(a_hat, a.shape + (1,)), F)
        flat = nk.reshape(masked, Fv.shape[:-2] + (dims.M * dims.d,))
        h = nk.add(z, nk.mlp_forward(params, "phi2.agg", flat, dims.agg))
    else:
        h = z
    out = nk.mlp_forward(params, "phi2.post", h, dims.post)
    mu = out[..., : dims.d]
    log_sigma = nk.clip(out[..., dims.d:], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return Posterior(mu, log_sigma, nk.exp(log_sigma))


def reparameterize(post: Posterior, rng: Rng | None = None, noise=None):
    """``z_tilde = mu + n * sigma`` with ``n ~ N(0, I)``."""
    if noise is None:
        noise = rng.normal(nk.value_of(post.mu).shape)
    return nk.add(post.mu, nk.mul(noise, post.sigma))


def attr_loss(a_hat, a):
    """Mean binary cross-entropy over the last axis (per-sample values)."""
    a = np.asarray(a, dtype=float)
    if nk.value_of(a_hat).shape != a.shape:
        raise ValueError("attr_loss: a_hat and a differ in shape")
    p = nk.clip(a_hat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = nk.add(nk.mul(a, nk.log(p)), nk.mul(1.0 - a, nk.log(nk.sub(1.0, p))))
    return nk.mul(nk.mean(ll, axis=-1), -1.0)


@dataclass
class EncoderOutput:
    z: object
    F: object
    a_hat: object
    post: Posterior


def infer(params, x, graph: AttributeGraph, dims: ModelDims, use_rafa: bool = True) -> EncoderOutput:
    """Run the whole encoder: x -> (z, F, a_hat, posterior)."""
    z = encode(params, x, dims)
    F = decompose(params, z, dims)
    a_hat = predict_attributes(params, F, graph)
    return EncoderOutput(z, F, a_hat, aggregate(params, z, F, a_hat, dims, use_rafa))

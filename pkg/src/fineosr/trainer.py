"""Staged joint training of encoder, attribute graph head, energy prior,
outlier detector and decoder.

Four AdamW groups:

    0  phi   (encoder, aggregation, posterior head)   rate eta0
    1  alpha (energy/classifier head) and theta        rate eta1
    2  omega (attribute heads and GCN)                 rate eta2
    3  beta  (decoder)                                 rate eta3

The prior update in the generative phase uses ``eta0`` for alpha, as the
training recipe writes it.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ebm, encoder, generator, uvos
from . import numkit as nk
from .encoder import AttributeGraph, ModelDims
from .numkit import AdamW, DivergenceError, ParamStore, Rng, Tape

GROUPS = ("phi", "alpha_theta", "omega", "beta")
STREAMS = ("data", "sgld", "reparam", "uvos")


@dataclass
class TrainConfig:
    T: int = 60
    T_gen: int = 20
    T_uvos: int = 20
    eta0: float = 1e-3
    eta1: float = 1e-3
    eta2: float = 1e-3
    eta3: float = 1e-3
    lambda0: float = 1.0
    lambda1: float = 0.1
    lambda2: float = 1.0
    B: int = 64
    H: int = 20
    S: int = 200
    seed: int = 0
    sgld: dict = field(default_factory=lambda: {"steps": 100, "step_size": 0.4, "noise_on": True})
    warmup_epochs: int = 2
    restart_epochs: list = field(default_factory=lambda: [20, 40])
    weight_decay: float = 1e-4
    d: int = 8
    D_feat: int = 32
    tau: float = 0.4
    p: float = 0.2
    use_rafa: bool = True
    use_uvos: bool = True

    def __post_init__(self):
        if min(self.T, self.T_uvos, self.T_gen) < 0:
            raise ValueError("T, T_uvos and T_gen must be non-negative")
        if self.B < 1 or min(self.eta0, self.eta1, self.eta2, self.eta3) < 0:
            raise ValueError("batch size must be positive and rates non-negative")
        if len(self.restart_epochs) != 2 or not self.restart_epochs[0] < self.restart_epochs[1]:
            raise ValueError("restart_epochs must be two increasing epochs")
        self.restart_epochs = list(self.restart_epochs)
        self.sgld = dict(self.sgld)
        self.sgld_config()

    def sgld_config(self) -> ebm.SgldConfig:
        return ebm.SgldConfig(**self.sgld)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        if "sgld" in d:
            extra = set(d["sgld"]) - {"steps", "step_size", "noise_on"}
            if extra:
                raise ValueError(f"unknown sgld keys: {', '.join(sorted(extra))}")
            d = {**d, "sgld": {**cls().sgld, **d["sgld"]}}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def lr_at(epoch: int, base_rate: float, cfg: TrainConfig) -> float:
    """Linear warmup, then cosine decay to 1% of base inside each restart segment."""
    r1, r2 = cfg.restart_epochs
    if not r1 < r2:
        raise ValueError("restart epochs must increase")
    w = cfg.warmup_epochs
    if epoch < w:
        return base_rate * (epoch + 1) / w
    if epoch < r1:
        start, end = w, r1
    elif epoch < r2:
        start, end = r1, r2
    else:
        start, end = r2, max(cfg.T, r2 + 1)
    span = end - 1 - start
    if span <= 0:
        return base_rate
    lo = 0.01 * base_rate
    return lo + (base_rate - lo) * 0.5 * (1.0 + math.cos(math.pi * (epoch - start) / span))


# ---------------------------------------------------------------------------
# model container


@dataclass
class Model:
    dims: ModelDims
    store: ParamStore
    graph: AttributeGraph
    use_rafa: bool = True

    def names(self, *prefixes) -> list[str]:
        return [n for n in self.store.names() if n.startswith(prefixes)]

    def group_names(self, group: str) -> list[str]:
        return {
            "phi": self.names("phi1.", "phi2."),
            "alpha_theta": self.names("alpha.", "theta."),
            "omega": self.names("omega."),
            "beta": self.names("beta."),
        }[group]

    def posterior(self, x: np.ndarray) -> encoder.Posterior:
        return encoder.infer(self.store, x, self.graph, self.dims, self.use_rafa).post

    def logits(self, x: np.ndarray) -> np.ndarray:
        mu = self.posterior(x).mu
        return np.asarray(ebm.logits(self.store, mu, self.dims.head))


def init_model(dims: ModelDims, graph: AttributeGraph, seed: int, use_rafa: bool = True) -> Model:
    rng = Rng(seed).child("init")
    store = ParamStore()
    encoder.init_encoder(store, dims, rng.child("encoder"))
    ebm.init_head(store, dims.head, rng.child("alpha"))
    nk.init_mlp(store, "beta", dims.dec, rng.child("beta"))
    nk.init_mlp(store, "theta", dims.det, rng.child("theta"))
    return Model(dims, store, graph, use_rafa)


@dataclass
class TrainData:
    x: np.ndarray
    y: np.ndarray  # 0..K-1
    a: np.ndarray

    @property
    def K(self):
        return int(self.y.max()) + 1


# ---------------------------------------------------------------------------
# checkpoint


CKPT_MAGIC = b"FOSRCKPT"
CKPT_VERSION = 1


class CheckpointError(IOError):
    pass


@dataclass
class Checkpoint:
    model: Model
    densities: dict
    epoch: int
    config: dict
    rng_states: dict
    optim: dict
    meta: dict = field(default_factory=dict)

    def arrays(self) -> dict:
        out = {f"param/{n}": v for n, v in self.model.store.items()}
        out["graph/A"] = self.model.graph.A
        out["graph/A_hat"] = self.model.graph.A_hat
        for k, dens in sorted(self.densities.items()):
            out[f"density/{k}/Pmu"] = dens.accum_Pmu
            out[f"density/{k}/P"] = dens.accum_P
        for g, opt in self.optim.items():
            for n in opt.names:
                if n in opt.m:
                    out[f"optim/{g}/m/{n}"] = opt.m[n]
                    out[f"optim/{g}/v/{n}"] = opt.v[n]
        return out

    def param_hash(self, prefixes=("",)) -> str:
        h = hashlib.sha256()
        for n in self.model.store.names():
            if n.startswith(tuple(prefixes)):
                h.update(n.encode())
                h.update(self.model.store.value(n).tobytes())
        return h.hexdigest()

    def density_hash(self) -> str:
        h = hashlib.sha256()
        for k, dens in sorted(self.densities.items()):
            h.update(struct.pack("<qq", k, dens.n_seen))
            h.update(dens.accum_Pmu.tobytes())
            h.update(dens.accum_P.tobytes())
        return h.hexdigest()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    arrays = ckpt.arrays()
    manifest, chunks, off = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(a.shape), "offset": off})
        b = a.tobytes()
        chunks.append(b)
        off += len(b)
    payload = b"".join(chunks)
    header = {
        "version": CKPT_VERSION,
        "arrays": manifest,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "rng_states": ckpt.rng_states,
        "optim_t": {g: opt.t for g, opt in ckpt.optim.items()},
        "optim_names": {g: opt.names for g, opt in ckpt.optim.items()},
        "density_n_seen": {str(k): d.n_seen for k, d in sorted(ckpt.densities.items())},
        "dims": dataclasses.asdict(ckpt.model.dims),
        "use_rafa": ckpt.model.use_rafa,
        "meta": ckpt.meta,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hb)) + hb + payload


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(str(exc)) from exc
    return checkpoint_from_bytes(raw)


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    n0 = len(CKPT_MAGIC) + 12
    if len(raw) < n0 or raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[len(CKPT_MAGIC): n0])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(raw) < n0 + hlen:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(raw[n0: n0 + hlen])
    except ValueError as exc:
        raise CheckpointError("corrupt header") from exc
    payload = raw[n0 + hlen:]
    if len(payload) != header["payload_bytes"] or zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError("truncated or corrupt payload")
    arrays = {}
    for ent in header["arrays"]:
        n = int(np.prod(ent["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype="<f8", count=n, offset=ent["offset"])
        arrays[ent["name"]] = a.reshape(ent["shape"]).astype(np.float64)
    store = ParamStore()
    for name in sorted(k for k in arrays if k.startswith("param/")):
        store.add(name[len("param/"):], arrays[name])
    graph = AttributeGraph(arrays["graph/A"], arrays["graph/A_hat"])
    dims = ModelDims(**header["dims"])
    model = Model(dims, store, graph, header["use_rafa"])
    densities = {}
    for k, n_seen in header["density_n_seen"].items():
        densities[int(k)] = uvos.ClassDensity(int(k), arrays[f"density/{k}/Pmu"], arrays[f"density/{k}/P"], n_seen)
    optim = {}
    for g, names in header["optim_names"].items():
        opt = AdamW(list(names), weight_decay=header["config"]["weight_decay"], t=header["optim_t"][g])
        for n in names:
            if f"optim/{g}/m/{n}" in arrays:
                opt.m[n] = arrays[f"optim/{g}/m/{n}"]
                opt.v[n] = arrays[f"optim/{g}/v/{n}"]
        optim[g] = opt
    return Checkpoint(model, densities, header["epoch"], header["config"], header["rng_states"], optim,
                      header["meta"])


# ---------------------------------------------------------------------------
# training steps


LOG_TERMS = ("cls", "attr", "uvos", "ebm", "recon", "kl", "energy", "ci")


@dataclass
class TrainState:
    model: Model
    cfg: TrainConfig
    optim: dict
    densities: dict
    rngs: dict
    epoch: int = 0


def _check_finite(value, what, epoch, step):
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {what} at epoch {epoch}, step {step}")


def discriminative_step(state: TrainState, xb, yb, ab, epoch: int, lrs, step: int = 0) -> dict:
    """Classification on the posterior mean + attribute BCE (+ outlier BCE)."""
    cfg, model = state.cfg, state.model
    m = model
    uvos_on = cfg.use_uvos and epoch > cfg.T_uvos and cfg.lambda1 > 0
    m.store.zero_grad()
    tape = Tape()
    names = m.group_names("phi") + m.names("alpha.") + m.group_names("omega")
    if uvos_on:
        names += m.names("theta.")
    P = nk.bind(tape, m.store, names)
    out = encoder.infer(P, xb, m.graph, m.dims, m.use_rafa)

    if cfg.use_uvos and epoch <= cfg.T_uvos:
        mu_v, sig_v = nk.value_of(out.post.mu), nk.value_of(out.post.sigma)
        for k in np.unique(yb):
            uvos.update_density(state.densities[int(k)], mu_v[yb == k], sig_v[yb == k])

    probs = ebm.classify(P, out.post.mu, m.dims.head)
    l_cls = nk.mean(ebm.cls_loss(probs, yb))
    l_attr = nk.mean(encoder.attr_loss(out.a_hat, ab))
    loss = nk.add(l_cls, nk.mul(l_attr, cfg.lambda0))
    terms = {"cls": float(nk.value_of(l_cls)), "attr": float(nk.value_of(l_attr))}
    if uvos_on:
        ocfg = uvos.OutlierConfig(candidates=cfg.S, retained=cfg.H)
        classes = np.unique(yb)
        v_plus = np.concatenate([uvos.sample_virtual_outliers(state.densities[int(k)], ocfg, state.rngs["uvos"])
                                 for k in classes])
        v_minus = uvos.normalize_known(out.post.mu, yb, state.densities)
        l_uvos = uvos.uvos_loss(P, v_plus, v_minus, m.dims.det)
        loss = nk.add(loss, nk.mul(l_uvos, cfg.lambda1))
        terms["uvos"] = float(nk.value_of(l_uvos))
    _check_finite(float(nk.value_of(loss)), "discriminative loss", epoch, step)
    tape.backward(loss)
    state.optim["phi"].step(m.store, lrs[0])
    state.optim["alpha_theta"].step(m.store, lrs[1], names=[n for n in names if n.startswith(("alpha.", "theta."))])
    state.optim["omega"].step(m.store, lrs[2])
    terms["total"] = float(nk.value_of(loss))
    return terms


def generative_step(state: TrainState, xb, yb, epoch: int, lrs, step: int = 0) -> dict:
    """Prior sampling, prior update and E-VAE update for one batch."""
    cfg, m = state.cfg, state.model
    B = len(yb)
    z0 = state.rngs["sgld"].normal((B, m.dims.d))
    z_e = ebm.sgld_sample(m.store, z0, cfg.sgld_config(), state.rngs["sgld"], m.dims.head)

    m.store.zero_grad()
    tape = Tape()
    P = nk.bind(tape, m.store, m.group_names("phi") + m.group_names("omega") + m.group_names("beta"))
    alpha_names = m.names("alpha.")
    PA = nk.bind(tape, m.store, alpha_names)
    PA_frozen = nk.bind(tape, m.store, alpha_names, frozen=True)

    out = encoder.infer(P, xb, m.graph, m.dims, m.use_rafa)
    noise = state.rngs["reparam"].normal((B, m.dims.d))
    terms = generator.evae_loss(P, PA_frozen, out.post, xb, m.dims.dec, m.dims.head, noise=noise)
    z_g = terms.z
    z_g_const = nk.detach(z_g)

    l_ebm = ebm.ebm_loss(PA, z_g_const, z_e, m.dims.head)
    ci_alpha = ebm.aib_term(ebm.classify(PA, z_g_const, m.dims.head), yb)
    loss_alpha = nk.sub(l_ebm, nk.mul(ci_alpha, cfg.lambda2))

    ci_g = ebm.aib_term(ebm.classify(PA_frozen, z_g, m.dims.head), yb)
    loss_g = nk.sub(terms.total, nk.mul(ci_g, cfg.lambda2))

    total = nk.add(loss_alpha, loss_g)
    _check_finite(float(nk.value_of(total)), "generative loss", epoch, step)
    tape.backward(total)
    state.optim["alpha_theta"].step(m.store, lrs[0], names=alpha_names)
    state.optim["phi"].step(m.store, lrs[0])
    state.optim["omega"].step(m.store, lrs[2])
    state.optim["beta"].step(m.store, lrs[3])
    return {
        "ebm": float(nk.value_of(l_ebm)),
        "recon": float(nk.value_of(terms.recon)),
        "kl": float(nk.value_of(terms.kl)),
        "energy": float(nk.value_of(terms.energy)),
        "ci": float(nk.value_of(ci_g)),
        "loss_alpha": float(nk.value_of(loss_alpha)),
        "loss_g": float(nk.value_of(loss_g)),
    }


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    COLUMNS = ("epoch", "lr0", "lr1", "lr2", "lr3") + LOG_TERMS + ("wall_ms",)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r.get(c, "") for c in self.COLUMNS])

    def column(self, name) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.records], dtype=float)


def _new_state(cfg: TrainConfig, data: TrainData) -> TrainState:
    graph = encoder.build_adjacency(data.a, cfg.tau, cfg.p)
    dims = ModelDims(D=data.x.shape[1], D_feat=cfg.D_feat, d=cfg.d, M=data.a.shape[1], K=data.K)
    model = init_model(dims, graph, cfg.seed, cfg.use_rafa)
    optim = {g: AdamW(model.group_names(g), weight_decay=cfg.weight_decay) for g in GROUPS}
    densities = {k: uvos.ClassDensity.empty(k, dims.d) for k in range(dims.K)} if cfg.use_uvos else {}
    root = Rng(cfg.seed)
    rngs = {s: root.child(s) for s in STREAMS}
    return TrainState(model, cfg, optim, densities, rngs, 0)


def _state_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> TrainState:
    root = Rng(cfg.seed)
    rngs = {s: root.child(s) for s in STREAMS}
    for s in STREAMS:
        rngs[s].state = ckpt.rng_states[s]
    return TrainState(ckpt.model, cfg, ckpt.optim, ckpt.densities, rngs, ckpt.epoch)


def snapshot(state: TrainState, meta=None) -> Checkpoint:
    """Deep copy of the training state as a checkpoint."""
    return checkpoint_from_bytes(checkpoint_bytes(Checkpoint(
        state.model, state.densities, state.epoch, state.cfg.to_dict(),
        {s: r.state for s, r in state.rngs.items()}, state.optim, meta or {})))


def train(cfg: TrainConfig, data: TrainData, resume: Checkpoint | None = None, stop_after: int | None = None,
          callback=None) -> tuple[Checkpoint, TrainLog]:
    """Run epochs ``[start, T)``; ``stop_after`` ends early (for resume tests).

    On divergence the raised DivergenceError carries ``.checkpoint``, a
    snapshot of the state at the failing step.
    """
    if resume is not None:
        if resume.config != cfg.to_dict():
            raise ValueError("resume checkpoint was produced with a different config")
        state = _state_from_checkpoint(resume, cfg)
    else:
        state = _new_state(cfg, data)
    log = TrainLog()
    N = len(data.y)
    end = cfg.T if stop_after is None else min(cfg.T, stop_after)
    bases = (cfg.eta0, cfg.eta1, cfg.eta2, cfg.eta3)
    while state.epoch < end:
        epoch = state.epoch
        t0 = time.perf_counter()
        lrs = [lr_at(epoch, b, cfg) for b in bases]
        if cfg.use_uvos and epoch <= cfg.T_uvos:
            for dens in state.densities.values():
                dens.reset()
        sums: dict = {}
        counts: dict = {}
        perm = state.rngs["data"].permutation(N)
        try:
            for step, start in enumerate(range(0, N, cfg.B)):
                idx = perm[start: start + cfg.B]
                xb, yb, ab = data.x[idx], data.y[idx], data.a[idx]
                parts = discriminative_step(state, xb, yb, ab, epoch, lrs, step)
                if epoch >= cfg.T_gen:
                    parts.update(generative_step(state, xb, yb, epoch, lrs, step))
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                    counts[k] = counts.get(k, 0) + 1
        except DivergenceError as exc:
            exc.checkpoint = snapshot(state)
            raise
        state.epoch += 1
        rec = {"epoch": epoch, **{f"lr{i}": lr for i, lr in enumerate(lrs)}}
        rec.update({k: sums[k] / counts[k] for k in sums})
        rec["wall_ms"] = round(1000.0 * (time.perf_counter() - t0), 3)
        log.records.append(rec)
        if callback is not None:
            callback(state, rec)
    return snapshot(state), log

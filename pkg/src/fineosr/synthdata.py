"""Synthetic fine-grained datasets with binary attributes and open-set splits.

Classes live in coarse groups; each class perturbs its group's attribute
prototype by a few bit flips, so classes in one group are "fine-grained"
neighbours.  Features are a fixed orthonormal embedding of the attribute
vector plus isotropic noise.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import Rng


class ParseError(ValueError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


@dataclass
class AttributeBank:
    attrs: np.ndarray  # (K_total, M) of 0/1
    coarse_group: np.ndarray  # (K_total,)
    seed: int = 0

    @property
    def K_total(self):
        return self.attrs.shape[0]

    @property
    def M(self):
        return self.attrs.shape[1]


@dataclass
class LabeledSamples:
    """Column-stacked samples: features ``x``, class ids ``y``, attributes ``a``."""

    x: np.ndarray
    y: np.ndarray
    a: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, mask) -> "LabeledSamples":
        return LabeledSamples(self.x[mask], self.y[mask], self.a[mask])


@dataclass
class OpenSplit:
    known: list[int]
    easy: list[int]
    medium: list[int]
    hard: list[int]
    similarity: dict = field(default_factory=dict)  # class -> max cosine to known

    def tag_of(self, c: int) -> str:
        for tag in ("known", "easy", "medium", "hard"):
            if c in getattr(self, tag):
                return tag
        raise KeyError(c)


def make_attribute_bank(K_total: int, M: int, groups: int, seed: int, flip_frac: float = 0.125,
                        background: float = 0.25) -> AttributeBank:
    if M < 8:
        raise ValueError("need M >= 8 attributes")
    if groups < 1 or K_total < 2 * groups:
        raise ValueError("need K_total >= 2 * groups")
    if K_total > 2**M:
        raise ValueError(f"cannot draw {K_total} distinct rows over {M} bits")
    rng = Rng(seed).child("bank")
    n_flip = max(1, int(round(flip_frac * M)))
    # each group owns a block of attributes, plus sparse random background bits
    protos = (rng.uniform((groups, M)) < background).astype(np.int64)
    block = M // groups
    if block >= 1:
        for g in range(groups):
            protos[g, g * block:(g + 1) * block] = 1
    group = np.arange(K_total) % groups
    rows: list[np.ndarray] = []
    seen = set()
    for c in range(K_total):
        for _ in range(10_000):
            row = protos[group[c]].copy()
            flip = rng.permutation(M)[:n_flip]
            row[flip] ^= 1
            if row.any() and row.tobytes() not in seen:
                break
        else:
            raise ValueError("could not draw distinct attribute rows")
        seen.add(row.tobytes())
        rows.append(row)
    return AttributeBank(np.array(rows, dtype=np.int64), group, seed)


def class_prototypes(bank: AttributeBank, D: int, seed: int, scale: float = 1.0) -> np.ndarray:
    """Rows ``scale * E a_c`` with ``E`` a D x M matrix of orthonormal columns."""
    if D < bank.M:
        raise ValueError("feature dimension D must be >= M")
    g = Rng(seed).child("embedding").normal((D, bank.M))
    q, _ = np.linalg.qr(g)
    return scale * bank.attrs.astype(float) @ q.T


def generate_dataset(bank: AttributeBank, n_per_class: int, D: int, noise_scale: float, seed: int,
                     classes=None, proto_seed: int | None = None, scale: float = 1.0) -> LabeledSamples:
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    protos = class_prototypes(bank, D, seed if proto_seed is None else proto_seed, scale)
    classes = range(bank.K_total) if classes is None else classes
    root = Rng(seed).child("samples")
    xs, ys = [], []
    for c in classes:
        noise = root.child(f"class{c}").normal((n_per_class, D))
        xs.append(protos[c] + noise_scale * noise)
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    y = np.concatenate(ys)
    return LabeledSamples(np.concatenate(xs), y, bank.attrs[y].copy())


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.astype(float)
    b = b.astype(float)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    return (a @ b.T) / np.maximum(na * nb.T, 1e-300)


def _pick_known(bank: AttributeBank, n_known: int, rng: Rng) -> list[int]:
    groups = np.unique(bank.coarse_group)
    order = groups[rng.permutation(len(groups))]
    n_out = len(groups) // 4 if len(groups) >= 4 else min(1, len(groups) - 1)
    pool = np.flatnonzero(np.isin(bank.coarse_group, order[n_out:]))
    if len(pool) < n_known:
        pool = np.arange(bank.K_total)
    return sorted(pool[rng.permutation(len(pool))[:n_known]].tolist())


def split_openset(bank: AttributeBank, n_known: int, seed: int, known=None) -> OpenSplit:
    """Pick known classes, then rank the rest by max cosine similarity to them.

    Known classes are drawn from a random subset of coarse groups (all but
    a quarter of them, at least one group held out when there are two or
    more), so some unknown classes share no group with any known class.
    Top third of the ranking is Hard, bottom third Easy; ties keep class-id
    order.  ``known`` overrides the random choice.
    """
    if n_known < 1 or bank.K_total < 2 * n_known:
        raise ValueError("bank needs at least 2 * n_known classes")
    if known is None:
        known = _pick_known(bank, n_known, Rng(seed).child("split"))
    known = sorted(int(c) for c in known)
    unknown = [c for c in range(bank.K_total) if c not in known]
    sim = _cosine(bank.attrs[unknown], bank.attrs[known]).max(axis=1)
    order = sorted(range(len(unknown)), key=lambda i: (-sim[i], unknown[i]))
    hard, medium, easy = np.array_split(np.array([unknown[i] for i in order]), 3)
    return OpenSplit(known, sorted(easy.tolist()), sorted(medium.tolist()), sorted(hard.tolist()),
                     {unknown[i]: float(sim[i]) for i in range(len(unknown))})


# ---------------------------------------------------------------------------
# CSV


def write_csv(samples: LabeledSamples, path) -> None:
    D, M = samples.x.shape[1], samples.a.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(D)] + ["label"] + [f"a{j}" for j in range(M)])
        for x, y, a in zip(samples.x, samples.y, samples.a):
            w.writerow([repr(float(v)) for v in x] + [int(y)] + [int(v) for v in a])


def load_csv(path) -> LabeledSamples:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(path, 1, "missing header")
    header = rows[0]
    if "label" not in header:
        raise ParseError(path, 1, "header has no 'label' column")
    li = header.index("label")
    D, M = li, len(header) - li - 1
    if header[:D] != [f"f{i}" for i in range(D)] or header[li + 1:] != [f"a{j}" for j in range(M)]:
        raise ParseError(path, 1, "unexpected header layout")
    xs = np.empty((len(rows) - 1, D))
    ys = np.empty(len(rows) - 1, dtype=np.int64)
    As = np.empty((len(rows) - 1, M), dtype=np.int64)
    for k, row in enumerate(rows[1:]):
        line = k + 2
        if len(row) != len(header):
            raise ParseError(path, line, f"expected {len(header)} columns, got {len(row)}")
        try:
            xs[k] = [float(v) for v in row[:D]]
            ys[k] = int(row[li])
            As[k] = [int(v) for v in row[li + 1:]]
        except ValueError as exc:
            raise ParseError(path, line, str(exc)) from None
        if not np.all(np.isfinite(xs[k])) or not np.isin(As[k], (0, 1)).all():
            raise ParseError(path, line, "non-finite feature or non-binary attribute")
    return LabeledSamples(xs, ys, As)


def write_features_csv(x: np.ndarray, path) -> None:
    """Feature-only CSV (generated samples): header ``f0..f{D-1}``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(x.shape[1])])
        for row in x:
            w.writerow([repr(float(v)) for v in row])


def load_features_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(path, 1, "missing header")
    n = len(rows[0])
    li = rows[0].index("label") if "label" in rows[0] else n
    out = []
    for k, row in enumerate(rows[1:]):
        if len(row) != n:
            raise ParseError(path, k + 2, f"expected {n} columns, got {len(row)}")
        try:
            out.append([float(v) for v in row[:li]])
        except ValueError as exc:
            raise ParseError(path, k + 2, str(exc)) from None
    return np.array(out, dtype=float).reshape(-1, li)


# ---------------------------------------------------------------------------
# full open-set benchmark


@dataclass
class DataConfig:
    K_total: int = 16
    n_known: int = 8
    M: int = 16
    D: int = 32
    n_per_class: int = 128
    n_test_per_class: int = 32
    noise_scale: float = 0.3
    groups: int = 4
    proto_scale: float = 1.0
    seed: int = 0


@dataclass
class OpenSetData:
    cfg: DataConfig
    bank: AttributeBank
    split: OpenSplit
    train: LabeledSamples
    known_test: LabeledSamples
    unknown: dict  # tag -> LabeledSamples

    def known_index(self, y: np.ndarray) -> np.ndarray:
        """Map global class ids of known classes to logit indices 0..K-1."""
        lut = {c: i for i, c in enumerate(self.split.known)}
        return np.array([lut[int(c)] for c in y], dtype=np.int64)


SPLIT_FILES = ("train", "known_test", "easy", "medium", "hard")


def make_openset_data(cfg: DataConfig) -> OpenSetData:
    bank = make_attribute_bank(cfg.K_total, cfg.M, cfg.groups, cfg.seed)
    split = split_openset(bank, cfg.n_known, cfg.seed)
    root = Rng(cfg.seed)
    train = generate_dataset(bank, cfg.n_per_class, cfg.D, cfg.noise_scale, int(root.child("train").integers(2**62)),
                             classes=split.known, proto_seed=cfg.seed, scale=cfg.proto_scale)
    test_seed = int(root.child("test").integers(2**62))
    known_test = generate_dataset(bank, cfg.n_test_per_class, cfg.D, cfg.noise_scale, test_seed,
                                  classes=split.known, proto_seed=cfg.seed, scale=cfg.proto_scale)
    unknown = {tag: generate_dataset(bank, cfg.n_test_per_class, cfg.D, cfg.noise_scale, test_seed,
                                     classes=getattr(split, tag), proto_seed=cfg.seed, scale=cfg.proto_scale)
               for tag in ("easy", "medium", "hard")}
    return OpenSetData(cfg, bank, split, train, known_test, unknown)


def save_openset_data(data: OpenSetData, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    parts = {"train": data.train, "known_test": data.known_test, **data.unknown}
    for name in SPLIT_FILES:
        p = out_dir / f"{name}.csv"
        write_csv(parts[name], p)
        files.append(p)
    manifest = {
        "K": data.cfg.n_known, "K_total": data.cfg.K_total, "M": data.cfg.M, "D": data.cfg.D,
        "seed": data.cfg.seed, "config": vars(data.cfg),
        "split": {"known": data.split.known, "easy": data.split.easy,
                  "medium": data.split.medium, "hard": data.split.hard},
        "attrs": data.bank.attrs.tolist(), "coarse_group": data.bank.coarse_group.tolist(),
        "files": [f.name for f in files],
    }
    mp = out_dir / "dataset.json"
    mp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    files.append(mp)
    return files


def load_openset_data(out_dir) -> OpenSetData:
    out_dir = Path(out_dir)
    man = json.loads((out_dir / "dataset.json").read_text())
    cfg = DataConfig(**man["config"])
    bank = AttributeBank(np.array(man["attrs"], dtype=np.int64), np.array(man["coarse_group"]), cfg.seed)
    sp = man["split"]
    split = OpenSplit(sp["known"], sp["easy"], sp["medium"], sp["hard"])
    parts = {}
    for name in SPLIT_FILES:
        p = out_dir / f"{name}.csv"
        if not p.exists():
            raise FileNotFoundError(p)
        parts[name] = load_csv(p)
    return OpenSetData(cfg, bank, split, parts["train"], parts["known_test"],
                       {t: parts[t] for t in ("easy", "medium", "hard")})

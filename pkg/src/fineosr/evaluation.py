"""Open-set scores, metrics, feature-space Fréchet distance and latent sampling."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import ebm, encoder, generator
from . import numkit as nk
from .numkit import Rng

SCORE_KINDS = ("free_energy", "max_joint_energy", "msp")
SPLITS = ("easy", "medium", "hard")


def ood_score(logits, kind: str) -> np.ndarray:
    """Unknown-ness score per row; higher means more likely unknown."""
    lg = np.asarray(logits, dtype=float)
    if lg.shape[-1] < 2:
        raise ValueError("need at least two classes")
    if kind == "free_energy":
        return -nk.logsumexp(lg, axis=-1)
    if kind == "max_joint_energy":
        return -np.max(lg, axis=-1)
    if kind == "msp":
        return 1.0 - np.max(nk.softmax(lg, axis=-1), axis=-1)
    raise ValueError(f"unknown score kind {kind!r}")


@dataclass
class ScoreReport:
    logits: np.ndarray  # (N, K)
    label: np.ndarray  # known index, or -1 for unknown rows
    split: np.ndarray  # "known_test" | "easy" | "medium" | "hard"
    scores: dict = field(default_factory=dict)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        self.label = np.asarray(self.label, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=object)
        if not self.scores:
            self.scores = {k: ood_score(self.logits, k) for k in SCORE_KINDS}

    @property
    def pred(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)

    def rows(self, split: str) -> np.ndarray:
        return self.split == split

    def write_csv(self, path) -> None:
        K = self.logits.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"logit_{k}" for k in range(K)] + ["label", "split", "pred", "free_energy", "max_joint", "msp"])
            for i in range(len(self.label)):
                w.writerow([repr(float(v)) for v in self.logits[i]]
                           + [int(self.label[i]), self.split[i], int(self.pred[i])]
                           + [repr(float(self.scores[k][i])) for k in SCORE_KINDS])

    @classmethod
    def read_csv(cls, path) -> "ScoreReport":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        K = sum(h.startswith("logit_") for h in rows[0])
        body = rows[1:]
        return cls(np.array([[float(v) for v in r[:K]] for r in body]).reshape(-1, K),
                   np.array([int(r[K]) for r in body]), np.array([r[K + 1] for r in body], dtype=object))


def accuracy(report: ScoreReport) -> float:
    known = report.rows("known_test")
    if not known.any():
        raise ValueError("report has no known_test rows")
    return float(np.mean(report.pred[known] == report.label[known]))


def _sides(known_scores, unknown_scores):
    k = np.asarray(known_scores, dtype=float).ravel()
    u = np.asarray(unknown_scores, dtype=float).ravel()
    if k.size == 0 or u.size == 0:
        raise ValueError("both score sets must be non-empty")
    return k, u


def auroc(known_scores, unknown_scores) -> float:
    """``P(unknown > known) + P(tie) / 2`` via the Mann-Whitney rank sum."""
    k, u = _sides(known_scores, unknown_scores)
    r = rankdata(np.concatenate([k, u]))
    U = r[k.size:].sum() - u.size * (u.size + 1) / 2.0
    return float(U / (k.size * u.size))


def aupr(known_scores, unknown_scores) -> float:
    """Average precision with unknown as the positive class (step rule)."""
    k, u = _sides(known_scores, unknown_scores)
    thr = np.unique(np.concatenate([k, u]))[::-1]
    ks, us = np.sort(k), np.sort(u)
    tp = us.size - np.searchsorted(us, thr, side="left")
    fp = ks.size - np.searchsorted(ks, thr, side="left")
    precision = tp / (tp + fp)
    recall = tp / us.size
    return float(np.sum(np.diff(np.concatenate([[0.0], recall])) * precision))


def oscr(report: ScoreReport, score_kind: str, split: str | None = None) -> float:
    """Area under correct-classification rate vs false-positive rate.

    A sample is accepted as known when its score is ``<= tau``.  ``split``
    selects the unknown rows; ``None`` uses every non-known row.
    """
    known = report.rows("known_test")
    unknown = ~known if split is None else report.rows(split)
    if not known.any() or not unknown.any():
        raise ValueError("oscr needs known_test and unknown rows")
    s = report.scores[score_kind]
    return oscr_from_scores(s[known], report.pred[known] == report.label[known], s[unknown])


def oscr_from_scores(known_scores, known_correct, unknown_scores) -> float:
    k, u = _sides(known_scores, unknown_scores)
    correct = np.sort(k[np.asarray(known_correct, dtype=bool)])
    us = np.sort(u)
    thr = np.unique(np.concatenate([k, u]))
    ccr = np.concatenate([[0.0], np.searchsorted(correct, thr, side="right") / k.size])
    fpr = np.concatenate([[0.0], np.searchsorted(us, thr, side="right") / u.size])
    return float(np.sum(np.diff(fpr) * (ccr[1:] + ccr[:-1]) / 2.0))


def _sqrtm_trace(a: np.ndarray, b: np.ndarray) -> float:
    """``Tr((a b)^{1/2})`` for symmetric PSD ``a``, ``b``."""
    w, v = np.linalg.eigh(a)
    ra = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    m = ra @ b @ ra
    wm = np.linalg.eigvalsh((m + m.T) / 2.0)
    return float(np.sum(np.sqrt(np.clip(wm, 0.0, None))))


def frechet_feature_distance(real_x, fake_x) -> float:
    """Fréchet distance between Gaussian fits of two feature sets."""
    r = np.asarray(real_x, dtype=float)
    f = np.asarray(fake_x, dtype=float)
    d = r.shape[1]
    if r.shape[0] < d + 1 or f.shape[0] < d + 1:
        raise ValueError(f"need at least d + 1 = {d + 1} samples per set")
    mr, mf = r.mean(axis=0), f.mean(axis=0)
    cr, cf = np.cov(r, rowvar=False), np.cov(f, rowvar=False)
    tr = np.trace(cr) + np.trace(cf) - 2.0 * _sqrtm_trace(cr, cf)
    return float(max(np.sum((mr - mf) ** 2) + tr, 0.0))


# ---------------------------------------------------------------------------
# model-level helpers


def score_report(model, known_x, known_y, unknown: dict) -> ScoreReport:
    """Logits from the posterior mean for known test rows and each unknown split."""
    parts, labels, tags = [model.logits(known_x)], [np.asarray(known_y)], [["known_test"] * len(known_y)]
    for tag in SPLITS:
        if tag in unknown:
            x = unknown[tag]
            parts.append(model.logits(x))
            labels.append(np.full(len(x), -1))
            tags.append([tag] * len(x))
    return ScoreReport(np.concatenate(parts), np.concatenate(labels), np.concatenate(tags))


def metrics_bundle(report: ScoreReport) -> dict:
    out = {"acc": accuracy(report), "splits": {}}
    known = report.rows("known_test")
    for tag in SPLITS:
        rows = report.rows(tag)
        if not rows.any():
            continue
        out["splits"][tag] = {
            kind: {
                "auroc": auroc(report.scores[kind][known], report.scores[kind][rows]),
                "aupr": aupr(report.scores[kind][known], report.scores[kind][rows]),
                "oscr": oscr(report, kind, tag),
            }
            for kind in SCORE_KINDS
        }
    return out


def metrics_text(bundle: dict) -> str:
    lines = [f"ACC {bundle['acc']:.4f}", "", f"{'split':<8}{'score':<18}{'AUROC':>8}{'AUPR':>8}{'OSCR':>8}"]
    for tag, kinds in bundle["splits"].items():
        for kind, m in kinds.items():
            lines.append(f"{tag:<8}{kind:<18}{m['auroc']:>8.4f}{m['aupr']:>8.4f}{m['oscr']:>8.4f}")
    if "ffd" in bundle:
        lines += ["", f"FFD {bundle['ffd']:.4f}"]
    return "\n".join(lines) + "\n"


def write_metrics(bundle: dict, json_path, text_path=None) -> None:
    with open(json_path, "w") as fh:
        json.dump(bundle, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if text_path is not None:
        with open(text_path, "w") as fh:
            fh.write(metrics_text(bundle))


def sample_latents(model, mode: str, n: int, rng: Rng, x_opt=None, sgld: ebm.SgldConfig | None = None) -> np.ndarray:
    """Latents from ``random`` N(0, I), the ``posterior`` given ``x_opt``, or the ``prior`` via SGLD."""
    d = model.dims.d
    if mode == "random":
        return rng.normal((n, d))
    if mode == "posterior":
        if x_opt is None:
            raise ValueError("posterior sampling needs input features")
        x = np.asarray(x_opt, dtype=float)
        idx = np.arange(n) % len(x)
        post = model.posterior(x[idx])
        return np.asarray(encoder.reparameterize(post, rng))
    if mode == "prior":
        z0 = rng.normal((n, d))
        return ebm.sgld_sample(model.store, z0, sgld or ebm.SgldConfig(), rng, model.dims.head)
    raise ValueError(f"unknown sampling mode {mode!r}")


def generate(model, mode: str, n: int, rng: Rng, x_opt=None, sgld=None) -> np.ndarray:
    z = sample_latents(model, mode, n, rng, x_opt, sgld)
    return np.asarray(generator.decode(model.store, z, model.dims.dec))


# ---------------------------------------------------------------------------
# SVG histogram


def score_histogram_svg(report: ScoreReport, kind: str = "max_joint_energy", bins: int = 30,
                        width: int = 640, height: int = 360) -> str:
    """Overlaid normalized histograms of one score for known vs each unknown split."""
    s = report.scores[kind]
    lo, hi = float(np.min(s)), float(np.max(s))
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    colors = {"known_test": "#1f77b4", "easy": "#2ca02c", "medium": "#ff7f0e", "hard": "#d62728"}
    hists = {}
    for tag in colors:
        rows = report.rows(tag)
        if rows.any():
            h, _ = np.histogram(s[rows], bins=edges)
            hists[tag] = h / rows.sum()
    top = max(float(h.max()) for h in hists.values()) or 1.0
    ml, mr, mt, mb = 50, 20, 30, 40
    pw, ph = width - ml - mr, height - mt - mb

    def fx(v):
        return ml + pw * (v - lo) / (hi - lo)

    def fy(v):
        return mt + ph * (1.0 - v / top)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{ml}" y="18" font-size="13" font-family="sans-serif">{kind} distribution</text>',
           f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for v in (lo, (lo + hi) / 2, hi):
        out.append(f'<text x="{fx(v):.2f}" y="{mt + ph + 16}" font-size="10" text-anchor="middle" '
                   f'font-family="sans-serif">{v:.3g}</text>')
    for i, (tag, h) in enumerate(hists.items()):
        pts = [f"{fx(edges[0]):.2f},{fy(0):.2f}"]
        for j in range(bins):
            pts += [f"{fx(edges[j]):.2f},{fy(h[j]):.2f}", f"{fx(edges[j + 1]):.2f},{fy(h[j]):.2f}"]
        pts.append(f"{fx(edges[-1]):.2f},{fy(0):.2f}")
        out.append(f'<polyline fill="{colors[tag]}" fill-opacity="0.25" stroke="{colors[tag]}" '
                   f'points="{" ".join(pts)}"/>')
        out.append(f'<text x="{ml + pw - 90}" y="{mt + 14 + 14 * i}" font-size="11" fill="{colors[tag]}" '
                   f'font-family="sans-serif">{tag}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

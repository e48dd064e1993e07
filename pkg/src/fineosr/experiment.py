"""End-to-end runs on synthetic data: train, score, ablate."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass

import numpy as np

from . import evaluation, synthdata, trainer

VARIANTS = ("full", "no_rafa", "no_aib", "no_uvos")
METRICS = ("auroc", "aupr", "oscr")


def train_data(data: synthdata.OpenSetData) -> trainer.TrainData:
    return trainer.TrainData(data.train.x, data.known_index(data.train.y), data.train.a)


def variant_config(base: trainer.TrainConfig, variant: str) -> trainer.TrainConfig:
    if variant == "full":
        return dataclasses.replace(base)
    if variant == "no_rafa":
        return dataclasses.replace(base, use_rafa=False)
    if variant == "no_aib":
        return dataclasses.replace(base, lambda2=0.0)
    if variant == "no_uvos":
        return dataclasses.replace(base, lambda1=0.0, use_uvos=False)
    raise ValueError(f"unknown ablation variant {variant!r}")


def report_for(model, data: synthdata.OpenSetData) -> evaluation.ScoreReport:
    return evaluation.score_report(model, data.known_test.x, data.known_index(data.known_test.y),
                                   {t: data.unknown[t].x for t in evaluation.SPLITS})


@dataclass
class RunResult:
    checkpoint: trainer.Checkpoint
    log: trainer.TrainLog
    report: evaluation.ScoreReport
    metrics: dict


def run(cfg: trainer.TrainConfig, data: synthdata.OpenSetData) -> RunResult:
    ckpt, log = trainer.train(cfg, train_data(data))
    report = report_for(ckpt.model, data)
    return RunResult(ckpt, log, report, evaluation.metrics_bundle(report))


def ablation(base: trainer.TrainConfig, seeds, data_cfg: synthdata.DataConfig | None = None,
             variants=VARIANTS, score_kind: str = "max_joint_energy", progress=None) -> dict:
    """Train every variant on every seed; dataset seed follows the run seed.

    Returns ``{variant: {split: {metric: [values per seed]}}}``.
    """
    data_cfg = data_cfg or synthdata.DataConfig()
    table = {v: {s: {m: [] for m in METRICS} for s in evaluation.SPLITS} for v in variants}
    for seed in seeds:
        data = synthdata.make_openset_data(dataclasses.replace(data_cfg, seed=seed))
        for v in variants:
            res = run(dataclasses.replace(variant_config(base, v), seed=seed), data)
            for s in evaluation.SPLITS:
                for m in METRICS:
                    table[v][s][m].append(res.metrics["splits"][s][score_kind][m])
            if progress is not None:
                progress(seed, v, res)
    return table


def summarize(table: dict) -> list[dict]:
    rows = []
    for v, splits in table.items():
        for s, ms in splits.items():
            row = {"variant": v, "split": s}
            for m, vals in ms.items():
                row[f"{m}_mean"] = float(np.mean(vals))
                row[f"{m}_sd"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            rows.append(row)
    return rows


def write_ablation(rows: list[dict], csv_path, text_path=None) -> None:
    cols = ["variant", "split"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "sd")]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], str) else repr(r[c]) for c in cols])
    if text_path is not None:
        lines = [f"{'variant':<10}{'split':<8}" + "".join(f"{m.upper():>18}" for m in METRICS)]
        for r in rows:
            lines.append(f"{r['variant']:<10}{r['split']:<8}" + "".join(
                f"{100 * r[m + '_mean']:>10.2f} ± {100 * r[m + '_sd']:<5.2f}" for m in METRICS))
        with open(text_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

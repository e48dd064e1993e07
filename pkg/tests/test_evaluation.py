import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fineosr import evaluation as ev
from fineosr import trainer
from fineosr.evaluation import ScoreReport
from fineosr.numkit import Rng

from oracles import aupr_sweep, auroc_pairs, oscr_sweep


def test_ood_score_example():
    lg = np.array([[2.0, 1.0, 0.0]])
    assert ev.ood_score(lg, "max_joint_energy")[0] == -2.0
    free = ev.ood_score(lg, "free_energy")[0]
    assert free == pytest.approx(-(2 + math.log(1 + math.exp(-1) + math.exp(-2))), rel=1e-14)
    assert free == pytest.approx(-2.4076, abs=1e-4)
    e = math.e
    assert ev.ood_score(lg, "msp")[0] == pytest.approx(1 - e * e / (e * e + e + 1), rel=1e-12)
    assert ev.ood_score(lg, "msp")[0] == pytest.approx(0.3348, abs=1e-4)


def test_ood_score_uniform():
    lg = np.full((1, 4), 1.7)
    assert ev.ood_score(lg, "free_energy")[0] == pytest.approx(-(1.7 + math.log(4)))
    assert ev.ood_score(lg, "max_joint_energy")[0] == -1.7
    assert ev.ood_score(lg, "msp")[0] == pytest.approx(0.75)
    with pytest.raises(ValueError):
        ev.ood_score(lg, "nope")


@settings(max_examples=50)
@given(arrays(np.float64, (8, 5), elements=st.floats(-80, 80)))
def test_free_le_max_joint(lg):
    assert np.all(ev.ood_score(lg, "free_energy") <= ev.ood_score(lg, "max_joint_energy"))


def _report(pred_correct, known_s, unknown_s, split="easy"):
    n, m = len(known_s), len(unknown_s)
    y = np.zeros(n, dtype=int)
    lg = np.zeros((n + m, 2))
    for i, ok in enumerate(pred_correct):
        lg[i] = [1.0, 0.0] if ok else [0.0, 1.0]
    rep = ScoreReport(lg, np.concatenate([y, -np.ones(m, int)]), ["known_test"] * n + [split] * m)
    rep.scores["max_joint_energy"] = np.concatenate([known_s, unknown_s]).astype(float)
    return rep


def test_accuracy_counts():
    assert ev.accuracy(_report([1] * 4, [0] * 4, [1])) == 1.0
    assert ev.accuracy(_report([1, 0, 1, 0], [0] * 4, [1])) == 0.5
    assert ev.accuracy(_report([1] * 7 + [0] * 3, [0] * 10, [1])) == 0.7
    with pytest.raises(ValueError):
        ev.accuracy(ScoreReport(np.zeros((1, 2)), [-1], ["easy"]))


def test_auroc_examples():
    assert ev.auroc([0, 1], [2, 3]) == 1.0
    assert ev.auroc([1, 1, 1], [1, 1]) == 0.5
    # no ties: an unknown outscores a known in 4 of the 6 pairs
    assert ev.auroc([0.1, 0.4, 0.35], [0.3, 0.8]) == 4 / 6
    assert ev.auroc([0.1, 0.4, 0.3], [0.3, 0.8]) == 0.75
    with pytest.raises(ValueError):
        ev.auroc([], [1.0])


def test_aupr_examples():
    assert ev.aupr([0, 1], [2, 3]) == 1.0
    # single unknown ranked last among n knowns
    n = 5
    assert ev.aupr(list(range(1, n + 1)), [0]) == pytest.approx(1 / (n + 1))
    assert ev.aupr([1, 1, 1], [1, 1]) == pytest.approx(2 / 5)


def test_oscr_examples():
    assert ev.oscr(_report([1, 1, 1], [0, 0, 0], [5, 6]), "max_joint_energy") == 1.0
    assert ev.oscr(_report([0, 0, 0], [0, 0, 0], [5, 6]), "max_joint_energy") == 0.0
    rep = _report([1, 0], [0.2, 0.6], [0.4, 0.9])
    assert ev.oscr(rep, "max_joint_energy", "easy") == pytest.approx(oscr_sweep([0.2, 0.6], [1, 0], [0.4, 0.9]))
    with pytest.raises(ValueError):
        ev.oscr(rep, "max_joint_energy", "hard")


@settings(max_examples=200)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=5), st.lists(st.integers(0, 4), min_size=1, max_size=5),
       st.lists(st.booleans(), min_size=5, max_size=5))
def test_metrics_match_bruteforce(k, u, correct):
    k, u = [float(v) for v in k], [float(v) for v in u]
    assert ev.auroc(k, u) == auroc_pairs(k, u)
    assert ev.aupr(k, u) == pytest.approx(aupr_sweep(k, u), abs=1e-12)
    c = correct[: len(k)]
    assert ev.oscr_from_scores(k, c, u) == pytest.approx(oscr_sweep(k, c, u), abs=1e-12)


def test_ffd_identities():
    x = Rng(0).normal((500, 3))
    assert abs(ev.frechet_feature_distance(x, x)) < 1e-8
    with pytest.raises(ValueError):
        ev.frechet_feature_distance(x[:3], x)


def test_ffd_analytic():
    r = Rng(1)
    n = 10_000
    delta = np.array([1.0, -2.0, 0.5])
    a, b = r.normal((n, 3)), r.normal((n, 3)) + delta
    assert ev.frechet_feature_distance(a, b) == pytest.approx(float(delta @ delta), rel=0.05)
    c, d = r.normal((n, 2)), 2.0 * r.normal((n, 2))
    assert ev.frechet_feature_distance(c, d) == pytest.approx(2.0, rel=0.05)


def test_report_csv_roundtrip(tmp_path):
    r = Rng(2)
    rep = ScoreReport(r.normal((6, 3)), [0, 2, 1, -1, -1, -1], ["known_test"] * 3 + ["easy", "medium", "hard"])
    rep.write_csv(tmp_path / "s.csv")
    back = ScoreReport.read_csv(tmp_path / "s.csv")
    assert back.logits.tobytes() == rep.logits.tobytes()
    assert list(back.split) == list(rep.split) and np.array_equal(back.label, rep.label)
    header = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert header == "logit_0,logit_1,logit_2,label,split,pred,free_energy,max_joint,msp"


def test_bundle_schema_and_svg(tiny_cfg, tiny_train_data, tiny_data):
    ckpt, _ = trainer.train(tiny_cfg, tiny_train_data)
    from fineosr import experiment

    rep = experiment.report_for(ckpt.model, tiny_data)
    b = ev.metrics_bundle(rep)
    assert set(b["splits"]) == set(ev.SPLITS)
    assert all(set(b["splits"][s]) == set(ev.SCORE_KINDS) for s in ev.SPLITS)
    assert sum("auroc" in m for s in b["splits"].values() for m in s.values()) == 9
    svg = ev.score_histogram_svg(rep)
    assert svg.startswith("<svg") and svg == ev.score_histogram_svg(rep)
    assert "ACC" in ev.metrics_text(b)


def test_sample_latents_modes(tiny_cfg, tiny_train_data):
    ckpt, _ = trainer.train(tiny_cfg, tiny_train_data)
    m = ckpt.model
    z = ev.sample_latents(m, "random", 100_000, Rng(0))
    assert np.all(np.abs(z.mean(0)) < 0.02) and np.all(np.abs(z.var(0) - 1) < 0.02)
    with pytest.raises(ValueError):
        ev.sample_latents(m, "posterior", 5, Rng(0))
    with pytest.raises(ValueError):
        ev.sample_latents(m, "sideways", 5, Rng(0))
    # drive log-sigma to its floor: posterior samples collapse onto the mean
    d = m.dims.d
    b = m.store.value("phi2.post.b1").copy()
    b[d:] = -1e3
    m.store.set("phi2.post.b1", b)
    x = tiny_train_data.x[:7]
    zp = ev.sample_latents(m, "posterior", 7, Rng(1), x)
    np.testing.assert_allclose(zp, m.posterior(x).mu, atol=6 * math.exp(-6.0))
    assert ev.generate(m, "prior", 9, Rng(2), sgld=tiny_cfg.sgld_config()).shape == (9, m.dims.D)

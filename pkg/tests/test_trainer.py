import dataclasses
import json

import numpy as np
import pytest

from fineosr import encoder, experiment, trainer, uvos
from fineosr.numkit import DivergenceError
from fineosr.trainer import CheckpointError, TrainConfig


def _state(cfg, data):
    return trainer._new_state(cfg, data)


def _batch(data, n=16):
    return data.x[:n], data.y[:n], data.a[:n]


def _lrs(cfg):
    return [cfg.eta0, cfg.eta1, cfg.eta2, cfg.eta3]


# config and schedule

def test_config_roundtrip_and_unknown_keys(tmp_path):
    cfg = TrainConfig(T=7, lambda2=0.3)
    cfg.save(tmp_path / "c.json")
    assert TrainConfig.load(tmp_path / "c.json") == cfg
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"sgld": {"steps": 3, "oops": 1}})
    assert TrainConfig.from_dict({"sgld": {"steps": 3}}).sgld == {"steps": 3, "step_size": 0.4, "noise_on": True}


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(restart_epochs=[40, 20])
    with pytest.raises(ValueError):
        TrainConfig(B=0)
    with pytest.raises(ValueError):
        TrainConfig(T=-1)


def test_lr_schedule_points():
    cfg = TrainConfig()
    assert trainer.lr_at(0, 1.0, cfg) == pytest.approx(1.0 / cfg.warmup_epochs)
    assert trainer.lr_at(cfg.warmup_epochs - 1, 1.0, cfg) == pytest.approx(1.0)
    r1, r2 = cfg.restart_epochs
    assert trainer.lr_at(r1 - 1, 1.0, cfg) == pytest.approx(0.01)
    assert trainer.lr_at(r2 - 1, 1.0, cfg) == pytest.approx(0.01)
    assert trainer.lr_at(cfg.T - 1, 1.0, cfg) == pytest.approx(0.01)
    assert trainer.lr_at(r1, 1.0, cfg) == 1.0 and trainer.lr_at(r2, 2.0, cfg) == 2.0
    cfg.restart_epochs = [5, 5]
    with pytest.raises(ValueError):
        trainer.lr_at(3, 1.0, cfg)


def test_lr_schedule_monotone_within_segments():
    cfg = TrainConfig()
    lrs = np.array([trainer.lr_at(e, 1.0, cfg) for e in range(cfg.T)])
    for lo, hi in ((cfg.warmup_epochs, 20), (20, 40), (40, cfg.T)):
        assert np.all(np.diff(lrs[lo:hi]) < 0)
    assert np.all(lrs > 0)


# steps

def test_discriminative_reduces_to_ce(tiny_cfg, tiny_train_data):
    cfg = dataclasses.replace(tiny_cfg, lambda0=0.0, lambda1=0.0)
    st = _state(cfg, tiny_train_data)
    t = trainer.discriminative_step(st, *_batch(tiny_train_data), epoch=5, lrs=_lrs(cfg))
    assert "uvos" not in t and t["total"] == t["cls"]


def test_discriminative_step_decreases_loss(tiny_cfg, tiny_train_data):
    cfg = dataclasses.replace(tiny_cfg, lambda0=0.0, lambda1=0.0)
    st = _state(cfg, tiny_train_data)
    two = np.isin(tiny_train_data.y, [0, 1])
    xb, yb, ab = tiny_train_data.x[two], tiny_train_data.y[two], tiny_train_data.a[two]
    before = trainer.discriminative_step(st, xb, yb, ab, epoch=5, lrs=[1e-2] * 4)["total"]
    after = trainer.discriminative_step(st, xb, yb, ab, epoch=5, lrs=[0.0] * 4)["total"]
    assert after < before


def test_uvos_staging(tiny_cfg, tiny_train_data):
    st = _state(tiny_cfg, tiny_train_data)
    xb, yb, ab = tiny_train_data.x, tiny_train_data.y, tiny_train_data.a
    early = trainer.discriminative_step(st, xb, yb, ab, epoch=0, lrs=_lrs(tiny_cfg))
    assert "uvos" not in early
    late = trainer.discriminative_step(st, xb, yb, ab, epoch=tiny_cfg.T_uvos + 1, lrs=_lrs(tiny_cfg))
    assert "uvos" in late
    assert late["total"] == pytest.approx(late["cls"] + tiny_cfg.lambda0 * late["attr"]
                                          + tiny_cfg.lambda1 * late["uvos"], abs=1e-12)


def test_generative_step_decompositions(tiny_cfg, tiny_train_data):
    for lam2 in (0.0, 0.7):
        cfg = dataclasses.replace(tiny_cfg, lambda2=lam2)
        st = _state(cfg, tiny_train_data)
        g = trainer.generative_step(st, *_batch(tiny_train_data)[:2], epoch=2, lrs=_lrs(cfg))
        assert g["loss_g"] == pytest.approx(g["recon"] + g["energy"] + g["kl"] - lam2 * g["ci"], abs=1e-12)
        if lam2 == 0.0:
            assert g["loss_alpha"] == g["ebm"]


def test_generative_phase_groups_move(tiny_cfg, tiny_train_data):
    st = _state(tiny_cfg, tiny_train_data)
    before = st.model.store.copy()
    trainer.generative_step(st, *_batch(tiny_train_data)[:2], epoch=2, lrs=_lrs(tiny_cfg))
    for prefix in ("alpha.", "beta.", "phi1.", "phi2."):
        assert any(not np.array_equal(before.value(n), st.model.store.value(n))
                   for n in st.model.store.names(prefix)), prefix
    assert all(np.array_equal(before.value(n), st.model.store.value(n)) for n in st.model.store.names("theta."))


# train / checkpoint

def test_zero_epochs_is_initialization(tiny_cfg, tiny_train_data):
    cfg = dataclasses.replace(tiny_cfg, T=0)
    ckpt, log = trainer.train(cfg, tiny_train_data)
    assert log.records == [] and ckpt.epoch == 0
    graph = encoder.build_adjacency(tiny_train_data.a, cfg.tau, cfg.p)
    init = trainer.init_model(ckpt.model.dims, graph, cfg.seed)
    assert all(np.array_equal(init.store.value(n), v) for n, v in ckpt.model.store.items())


def test_train_deterministic_and_logged(tiny_cfg, tiny_train_data, tmp_path):
    a, la = trainer.train(tiny_cfg, tiny_train_data)
    b, _ = trainer.train(tiny_cfg, tiny_train_data)
    assert trainer.checkpoint_bytes(a) == trainer.checkpoint_bytes(b)
    assert len(la.records) == tiny_cfg.T
    assert np.all(np.isnan(la.column("recon")[:tiny_cfg.T_gen]))
    assert np.all(np.isfinite(la.column("recon")[tiny_cfg.T_gen:]))
    la.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].split(",") == list(trainer.TrainLog.COLUMNS) and len(lines) == tiny_cfg.T + 1


def test_checkpoint_roundtrip_and_corruption(tiny_cfg, tiny_train_data, tmp_path):
    ckpt, _ = trainer.train(tiny_cfg, tiny_train_data, stop_after=2)
    p = tmp_path / "c.bin"
    trainer.save_checkpoint(ckpt, p)
    raw = p.read_bytes()
    again = trainer.load_checkpoint(p)
    assert trainer.checkpoint_bytes(again) == raw
    x = tiny_train_data.x[:5]
    assert np.array_equal(again.model.logits(x), ckpt.model.logits(x))
    for bad in (raw[:-7], raw[:20], b"garbage" + raw, raw[:8] + b"\x02" + raw[9:]):
        with pytest.raises(CheckpointError):
            trainer.checkpoint_from_bytes(bad)
    flipped = bytearray(raw)
    flipped[-3] ^= 0xFF
    with pytest.raises(CheckpointError):
        trainer.checkpoint_from_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        trainer.load_checkpoint(tmp_path / "missing.bin")


def test_resume_matches_uninterrupted(tiny_cfg, tiny_train_data):
    full, _ = trainer.train(tiny_cfg, tiny_train_data)
    part, _ = trainer.train(tiny_cfg, tiny_train_data, stop_after=2)
    part = trainer.checkpoint_from_bytes(trainer.checkpoint_bytes(part))
    resumed, log = trainer.train(tiny_cfg, tiny_train_data, resume=part)
    assert [r["epoch"] for r in log.records] == [2, 3]
    assert trainer.checkpoint_bytes(resumed) == trainer.checkpoint_bytes(full)
    with pytest.raises(ValueError):
        trainer.train(dataclasses.replace(tiny_cfg, lambda2=0.5), tiny_train_data, resume=part)


def test_divergence_carries_checkpoint(tiny_cfg, tiny_train_data):
    cfg = dataclasses.replace(tiny_cfg, sgld={"steps": 200, "step_size": 30.0, "noise_on": True})
    with pytest.raises(DivergenceError) as ei:
        trainer.train(cfg, tiny_train_data)
    assert "step" in str(ei.value)
    ck = ei.value.checkpoint
    assert ck.epoch == cfg.T_gen and ck.config == cfg.to_dict()


def test_no_uvos_never_touches_densities(tiny_cfg, tiny_train_data, monkeypatch):
    cfg = experiment.variant_config(tiny_cfg, "no_uvos")

    def boom(*a, **k):
        raise AssertionError("density touched")

    monkeypatch.setattr(uvos, "update_density", boom)
    monkeypatch.setattr(uvos, "sample_virtual_outliers", boom)
    monkeypatch.setattr(uvos, "normalize_known", boom)
    ckpt, log = trainer.train(cfg, tiny_train_data)
    empty = trainer.Checkpoint(ckpt.model, {}, 0, {}, {}, {}).density_hash()
    assert ckpt.densities == {} and ckpt.density_hash() == empty
    assert np.all(np.isnan(log.column("uvos")))


def test_density_phase_resets_each_epoch(tiny_cfg, tiny_train_data):
    cfg = dataclasses.replace(tiny_cfg, T=1, T_uvos=5)
    ckpt, _ = trainer.train(cfg, tiny_train_data)
    counts = np.bincount(tiny_train_data.y)
    assert [ckpt.densities[k].n_seen for k in range(len(counts))] == counts.tolist()
    cfg = dataclasses.replace(tiny_cfg, T=3, T_uvos=5, T_gen=5)
    ckpt, _ = trainer.train(cfg, tiny_train_data)
    assert [ckpt.densities[k].n_seen for k in range(len(counts))] == counts.tolist()


def test_variants(tiny_cfg):
    assert experiment.variant_config(tiny_cfg, "no_rafa").use_rafa is False
    assert experiment.variant_config(tiny_cfg, "no_aib").lambda2 == 0.0
    nu = experiment.variant_config(tiny_cfg, "no_uvos")
    assert nu.lambda1 == 0.0 and nu.use_uvos is False
    with pytest.raises(ValueError):
        experiment.variant_config(tiny_cfg, "bogus")


def test_checkpoint_header_is_json(tiny_cfg, tiny_train_data):
    ckpt, _ = trainer.train(dataclasses.replace(tiny_cfg, T=1), tiny_train_data)
    raw = trainer.checkpoint_bytes(ckpt)
    n = int.from_bytes(raw[12:20], "little")
    header = json.loads(raw[20:20 + n])
    assert header["version"] == trainer.CKPT_VERSION and header["epoch"] == 1

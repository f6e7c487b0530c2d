import json
import math

import numpy as np
import pytest

from stssl import dataio, trainer
from stssl import diffcore as dc
from stssl.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from stssl.diffcore import Tensor
from stssl.encoder import ArchitectureError
from stssl.trainer import RunConfig


def small_cfg(**kw):
    base = dict(D=8, K=3, batch_size=16, max_epochs=2, seed=3)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def small_data():
    spec = dataio.SynthSpec(rows=3, cols=4, num_steps=500, interval_minutes=60)
    return dataio.synth_generate(spec, seed=11)


# ------------------------------------------------------------------ losses

def test_prediction_loss_cases():
    assert trainer.prediction_loss(np.array([[3.0, 6.0]]), np.array([[2.0, 4.0]]), 0.5).item() == 1.5
    x = np.random.default_rng(0).standard_normal((4, 2))
    assert trainer.prediction_loss(x, x, 0.3).item() == 0.0
    y = x.copy()
    y[:, 1] += 5.0
    assert trainer.prediction_loss(x, y, 1.0).item() == 0.0


def test_prediction_loss_batch_mean():
    rng = np.random.default_rng(1)
    p, t = rng.standard_normal((3, 5, 2)), rng.standard_normal((3, 5, 2))
    per = [trainer.prediction_loss(p[b], t[b], 0.25).item() for b in range(3)]
    assert trainer.prediction_loss(p, t, 0.25).item() == pytest.approx(np.mean(per))


def test_joint_loss_cases():
    one, two, three = Tensor(1.0), Tensor(2.0), Tensor(3.0)
    assert trainer.joint_loss(one, two, three).item() == 6.0
    assert trainer.joint_loss(one, two, three, False, False).item() == 1.0
    assert trainer.joint_loss(one, two, three, True, False).item() == 3.0


def test_joint_gradient_is_sum_of_components():
    w = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True)
    parts = [lambda: (w * w).sum(), lambda: dc.exp(w).sum(), lambda: dc.abs(w).sum()]
    separate = sum(dc.backward(f(), {"w": w})["w"] for f in parts)
    joint = dc.backward(trainer.joint_loss(*(f() for f in parts)), {"w": w})["w"]
    np.testing.assert_allclose(joint, separate, rtol=1e-12)


def test_mini_gradient_check_fixed_seed():
    assert trainer.mini_gradient_check(0) < 1e-4


# ------------------------------------------------------------------ metrics

def test_flow_metrics_hand_case():
    m = trainer.flow_metrics(np.array([[12.0, 16.0]]), np.array([[10.0, 20.0]]))
    assert (m["MAE_in"] + m["MAE_out"]) / 2 == 3.0
    assert (m["MAPE_in"] + m["MAPE_out"]) / 2 == pytest.approx(20.0)


def test_flow_metrics_identity_and_threshold():
    t = np.array([[[5.0, 0.5], [2.0, 0.0]]])
    m = trainer.flow_metrics(t, t)
    assert m["MAE_in"] == m["MAE_out"] == m["MAPE_in"] == 0.0
    assert m["MAPE_out"] is None and m["MAPE_out_excluded"] == 2
    assert m["MAPE_in_excluded"] == 0


def test_historical_average_cases():
    flat = np.full((48, 3, 2), 7.5)
    np.testing.assert_array_equal(trainer.historical_average_predict(flat, 5, 24), 7.5)
    two = np.zeros((4, 1, 2))
    two[0], two[2] = 2.0, 4.0
    np.testing.assert_array_equal(trainer.historical_average_predict(two, 0, 2), [[3.0, 3.0]])
    with pytest.raises(ValueError):
        trainer.historical_average_predict(np.zeros((2, 1, 2)), 3, 4)


def test_historical_average_matches_generator_without_noise():
    spec = dataio.SynthSpec(rows=2, cols=2, num_steps=480, noise=0.0, weekend_factor=1.0)
    ds = dataio.synth_generate(spec, seed=5)
    spd = spec.steps_per_day
    ha = trainer.HistoricalAverage(ds.flow[:300], spd)
    for step in (301, 333, 470):
        np.testing.assert_allclose(ha.predict(step), ds.flow[step], atol=1e-9)


def _ha_mae_oracle(flow, train_end, spd, targets):
    """Loop-by-loop per-slot means and mean absolute deviation."""
    sums, counts = {}, {}
    for t in range(train_end):
        for n in range(len(flow[t])):
            for c in range(2):
                key = (t % spd, n, c)
                sums[key] = sums.get(key, 0.0) + float(flow[t][n][c])
                counts[key] = counts.get(key, 0) + 1
    err = [0.0, 0.0]
    total = 0
    for t in targets:
        for n in range(len(flow[t])):
            for c in range(2):
                key = (t % spd, n, c)
                err[c] += abs(sums[key] / counts[key] - float(flow[t][n][c]))
        total += len(flow[t])
    return err[0] / total, err[1] / total


def test_historical_average_mae_against_oracle(small_data):
    cfg = small_cfg()
    data = trainer.prepare_data(cfg, small_data)
    m = trainer.historical_average_metrics(small_data, data, data.test)
    want = _ha_mae_oracle(small_data.flow.tolist(), data.train_end_step, data.steps_per_day,
                          [s.target_step_index for s in data.test])
    assert abs(m["MAE_in"] - want[0]) < 1e-9
    assert abs(m["MAE_out"] - want[1]) < 1e-9


# ------------------------------------------------------------------ config

def test_config_round_trip_and_errors():
    cfg = small_cfg(lam=0.25)
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(trainer.ConfigError, match="unknown"):
        RunConfig.from_dict({"depth": 3})
    with pytest.raises(trainer.ConfigError):
        RunConfig.from_dict({"D": 2.5})
    with pytest.raises(trainer.ConfigError):
        RunConfig.from_dict({"use_L_s": 1})
    for bad in (dict(lam=1.5), dict(K=1), dict(gamma=0.0), dict(neighborhood=6),
                dict(recent_steps=2, daily_steps=0)):
        with pytest.raises((trainer.ConfigError, ArchitectureError)):
            small_cfg(**bad).validate()


def test_empty_training_split_rejected():
    spec = dataio.SynthSpec(rows=2, cols=2, num_steps=60, interval_minutes=60)
    ds = dataio.synth_generate(spec, seed=0)
    with pytest.raises((trainer.ConfigError, ValueError)):
        trainer.train(small_cfg(), ds)


# ------------------------------------------------------------------ training

def test_zero_epochs_returns_initialization(small_data):
    cfg = small_cfg(max_epochs=0)
    res = trainer.train(cfg, small_data)
    init = trainer.init_params(cfg, trainer._rng_streams(cfg.seed)[0])
    assert res.history == []
    for k, v in init.items():
        assert res.checkpoint.params[k].tobytes() == v.data.tobytes()


def test_training_is_deterministic(small_data):
    a = trainer.train(small_cfg(), small_data)
    b = trainer.train(small_cfg(), small_data)
    assert a.history == b.history
    for k in a.checkpoint.params:
        assert a.checkpoint.params[k].tobytes() == b.checkpoint.params[k].tobytes()


def test_history_losses_nonnegative(small_data):
    res = trainer.train(small_cfg(max_epochs=3), small_data)
    for rec in res.history:
        assert min(rec.L_p, rec.L_s, rec.L_t) >= 0
        assert rec.L_joint == pytest.approx(rec.L_p + rec.L_s + rec.L_t)


def test_early_stopping_within_patience(small_data, monkeypatch):
    # validation MAE that only ever gets worse after epoch 1
    calls = iter(range(100))

    def rising(pred, true, threshold=1.0):
        v = float(next(calls))
        return {"MAE_in": v, "MAE_out": v}

    monkeypatch.setattr(trainer, "flow_metrics", rising)
    res = trainer.train(small_cfg(max_epochs=20, patience=3), small_data)
    assert res.stopped_early
    assert len(res.history) == 4
    assert res.checkpoint.best_epoch == 1


def test_toggles_zero_out_ssl_terms(small_data):
    res = trainer.train(small_cfg(max_epochs=1, use_L_s=False, use_L_t=False), small_data)
    rec = res.history[0]
    assert rec.L_s == rec.L_t == 0.0 and rec.L_joint == rec.L_p


def test_both_views_share_parameter_tensors(small_data, monkeypatch):
    cfg = small_cfg()
    data = trainer.prepare_data(cfg, small_data)
    params = trainer.init_params(cfg, np.random.default_rng(0))
    seen = []
    real = trainer.st_encode

    def spy(x, a_norm, p, enc):
        seen.append({k: id(v) for k, v in p.items()})
        return real(x, a_norm, p, enc)

    monkeypatch.setattr(trainer, "st_encode", spy)
    x, y = dataio.stack_samples(data.train[:4])
    terms = trainer.compute_losses(params, cfg, data.scaler.transform(x),
                                   data.scaler.transform(y), data.adj, data.a_norm,
                                   rng=np.random.default_rng(1))
    assert len(seen) == 2 and seen[0] == seen[1]
    # both SSL terms reach the encoder weights
    for name in ("L_s", "L_t"):
        g = dc.backward(getattr(terms, name), params)
        assert np.abs(g["tc0.kernel_p"]).sum() > 0


def test_augmented_view_differs(small_data):
    cfg = small_cfg(perturbation_ratio=0.3)
    data = trainer.prepare_data(cfg, small_data)
    params = trainer.init_params(cfg, np.random.default_rng(0))
    x, y = dataio.stack_samples(data.train[:4])
    terms = trainer.compute_losses(params, cfg, data.scaler.transform(x),
                                   data.scaler.transform(y), data.adj, data.a_norm,
                                   rng=np.random.default_rng(2))
    assert terms.aug.mask.any()
    assert not np.array_equal(terms.aug.adj[0], data.adj)
    np.testing.assert_allclose(terms.targets.sum(-1), 1.0, atol=1e-6)


def test_evaluate_perfect_predictions(small_data, monkeypatch):
    cfg = small_cfg(max_epochs=0)
    res = trainer.train(cfg, small_data)
    truth = dataio.stack_samples(res.data.test)[1]
    monkeypatch.setattr(trainer, "predict", lambda *a, **k: truth)
    m = trainer.evaluate(res.checkpoint, res.data.test)
    assert m["MAE_in"] == m["MAE_out"] == 0.0
    with pytest.raises(ValueError):
        trainer.evaluate(res.checkpoint, [])


def test_region_assignments_feasible(small_data):
    res = trainer.train(small_cfg(max_epochs=1), small_data)
    snaps = trainer.region_assignments(res.checkpoint, res.data.test, res.data.a_norm)
    assert snaps.shape == (len(res.data.test), 12, 3)
    np.testing.assert_allclose(snaps.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(snaps.sum(-2), 4.0, atol=1e-3)
    assert 0.5 <= trainer.snapshot_purity(snaps, small_data.labels) <= 1.0


# ------------------------------------------------------------------ artifacts

def test_checkpoint_round_trip_bitwise(small_data, tmp_path):
    res = trainer.train(small_cfg(), small_data)
    path = tmp_path / "ck.bin"
    save_checkpoint(res.checkpoint, path)
    back = load_checkpoint(path)
    assert back.config == res.checkpoint.config
    assert (back.rows, back.cols, back.best_epoch) == (3, 4, res.checkpoint.best_epoch)
    assert back.scaler.to_dict() == res.checkpoint.scaler.to_dict()
    assert list(back.params) == list(res.checkpoint.params)
    for k, v in res.checkpoint.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    save_checkpoint(back, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "x.bin"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "missing.bin")


def test_history_csv_format(tmp_path):
    recs = [trainer.EpochRecord(1, 0.1, 0.2, 0.3, 0.6, 1.5, 2.5)]
    trainer.write_history_csv(tmp_path / "h.csv", recs)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,L_p,L_s,L_t,L_joint,val_MAE_in,val_MAE_out"
    assert lines[1] == "1,0.1,0.2,0.3,0.6,1.5,2.5"
    assert math.isclose(float(lines[1].split(",")[4]), 0.6)

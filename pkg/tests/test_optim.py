import math

import numpy as np
import pytest

from texnet import engine, model, optim
from texnet.data import ArrayDataset
from texnet.engine import Param
from texnet.model import ParameterStore


def scalar_store(x0):
    return ParameterStore([{"w": Param.of(np.array([x0], dtype=np.float64))}], np.dtype(np.float64))


def reference_adadelta(x, grad_fn, steps, rho=0.95, eps=1e-6, lr=1.0):
    """Plain-float Adadelta, written independently of the package."""
    eg = ed = 0.0
    trajectory = []
    for _ in range(steps):
        g = grad_fn(x)
        eg = rho * eg + (1 - rho) * g * g
        dx = -lr * math.sqrt(ed + eps) / math.sqrt(eg + eps) * g
        ed = rho * ed + (1 - rho) * dx * dx
        x += dx
        trajectory.append(x)
    return trajectory


def test_first_step_value():
    store = scalar_store(0.0)
    store.layers[0]["w"].grad[...] = 1.0
    optim.adadelta_step(store, optim.AdadeltaState())
    step = store.layers[0]["w"].value[0]
    assert step == pytest.approx(-math.sqrt(1e-6) / math.sqrt(0.05 + 1e-6), rel=1e-14)
    assert step == pytest.approx(-4.4721e-3, abs=1e-7)
    assert store.layers[0]["w"].grad[0] == 0.0


def test_quadratic_trajectory_matches_reference():
    store = scalar_store(1.0)
    state = optim.AdadeltaState(rho=0.95, epsilon=1e-6, learning_rate=1.0)
    ours = []
    for _ in range(10):
        p = store.layers[0]["w"]
        p.grad[...] = 2 * p.value
        optim.adadelta_step(store, state)
        ours.append(float(p.value[0]))
    ref = reference_adadelta(1.0, lambda x: 2 * x, 10)
    np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-12)
    assert all(a > b for a, b in zip([1.0] + ours, ours))


def test_zero_gradient_leaves_parameters():
    store = scalar_store(0.3)
    state = optim.AdadeltaState()
    store.layers[0]["w"].grad[...] = 1.0
    optim.adadelta_step(store, state)
    before = store.layers[0]["w"].value.copy()
    eg = state.sq_grad[(0, "w")].copy()
    ed = state.sq_delta[(0, "w")].copy()
    optim.adadelta_step(store, state)
    np.testing.assert_array_equal(store.layers[0]["w"].value, before)
    np.testing.assert_allclose(state.sq_grad[(0, "w")], 0.95 * eg)
    np.testing.assert_allclose(state.sq_delta[(0, "w")], 0.95 * ed)


def test_non_finite_gradient_aborts():
    store = ParameterStore([{"a": Param.of(np.zeros(2)), "b": Param.of(np.zeros(2))}], np.dtype(np.float64))
    store.layers[0]["a"].grad[...] = 1.0
    store.layers[0]["b"].grad[0] = np.nan
    with pytest.raises(engine.NonFiniteError):
        optim.adadelta_step(store, optim.AdadeltaState())
    np.testing.assert_array_equal(store.layers[0]["a"].value, 0)


def test_running_statistics_are_not_optimised():
    spec = model.build_tcnn_inception((4, 4, 3))
    store = model.init_parameters(spec, 0, np.float64)
    for _, _, p in store.items():
        p.grad[...] = 1.0
    optim.adadelta_step(store, optim.AdadeltaState())
    bn = store.layers[13]
    np.testing.assert_array_equal(bn["running_mean"].value, 0)
    np.testing.assert_array_equal(bn["running_var"].value, 1)
    assert not np.all(bn["gamma"].value == 1)


@pytest.mark.parametrize("kw", [dict(max_epochs=0), dict(batch_size=0), dict(max_epochs=10, patience=10),
                                dict(patience=0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        optim.TrainConfig(**kw)


# -- early stopping -------------------------------------------------------------


def tiny_data(n=8, seed=0, prefix="p"):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 6, 6, 3)).astype(np.float32)
    y = np.arange(n) % 2
    return ArrayDataset(x, y, [f"{prefix}{i}" for i in range(n)])


def run_with_scripted_accuracy(monkeypatch, accs, **cfg):
    seq = iter(accs)
    monkeypatch.setattr(optim, "accuracy", lambda *a, **k: next(seq))
    spec = model.build_tcnn((6, 6, 3))
    store = model.init_parameters(spec, 0)
    config = optim.TrainConfig(**cfg)
    return optim.fit(spec, store, tiny_data(), tiny_data(4, 1, "v"), config)


def test_constant_accuracy_stops_after_patience(monkeypatch):
    rep = run_with_scripted_accuracy(monkeypatch, [0.5] * 120, max_epochs=120, patience=15)
    assert rep.stopped_epoch == 16
    assert rep.best_epoch == 1
    assert len(rep.val_accuracy) == 16


def test_infinite_min_delta_runs_patience_plus_one(monkeypatch):
    accs = list(np.linspace(0.1, 1.0, 50))
    rep = run_with_scripted_accuracy(monkeypatch, accs, max_epochs=50, patience=7, min_delta=math.inf)
    assert rep.stopped_epoch == 8


def test_improving_accuracy_runs_to_max_epochs(monkeypatch):
    accs = list(np.linspace(0.1, 1.0, 12))
    rep = run_with_scripted_accuracy(monkeypatch, accs, max_epochs=12, patience=11)
    assert rep.stopped_epoch == 12
    assert rep.best_epoch == 12


def test_small_improvements_do_not_reset_patience(monkeypatch):
    accs = [0.5, 0.50005, 0.50008, 0.50009, 0.9, 0.9, 0.9, 0.9]
    rep = run_with_scripted_accuracy(monkeypatch, accs, max_epochs=8, patience=3, min_delta=1e-4)
    # epochs 2-4 improve by < min_delta; epoch 5 is the next real improvement
    assert rep.best_epoch == 1
    assert rep.stopped_epoch == 4


def test_best_weights_restored(monkeypatch):
    seq = iter([0.9, 0.1, 0.1, 0.1])
    snapshots = []

    def fake_accuracy(spec, store, dataset, batch_size=32):
        snapshots.append(store.snapshot())
        return next(seq)

    monkeypatch.setattr(optim, "accuracy", fake_accuracy)
    spec = model.build_tcnn((6, 6, 3))
    store = model.init_parameters(spec, 0)
    optim.fit(spec, store, tiny_data(), tiny_data(4, 1, "v"), optim.TrainConfig(max_epochs=10, patience=3))
    for saved, entry in zip(snapshots[0], store.layers):
        for k, p in entry.items():
            np.testing.assert_array_equal(saved[k], p.value)


def test_fit_rejects_bad_sets():
    spec = model.build_tcnn((6, 6, 3))
    store = model.init_parameters(spec, 0)
    cfg = optim.TrainConfig(max_epochs=2, patience=1)
    with pytest.raises(ValueError):
        optim.fit(spec, store, tiny_data(), tiny_data(0, 1, "v"), cfg)
    with pytest.raises(ValueError):
        optim.fit(spec, store, tiny_data(), tiny_data(4, 1, "p"), cfg)


def test_fit_is_reproducible():
    reports = []
    for _ in range(2):
        spec = model.build_tcnn((6, 6, 3))
        store = model.init_parameters(spec, 3)
        rep = optim.fit(spec, store, tiny_data(), tiny_data(4, 1, "v"),
                        optim.TrainConfig(max_epochs=4, patience=3, batch_size=3, seed=9))
        rep.wall_time = 0.0
        reports.append((rep, store.snapshot()))
    assert reports[0][0] == reports[1][0]
    for a, b in zip(reports[0][1], reports[1][1]):
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])


def test_train_report_json_round_trip():
    import json

    rep = optim.TrainReport([0.7, 0.6], [0.5, 0.6], [0.5, 0.75], 2, 2, 1.5)
    assert optim.TrainReport.from_dict(json.loads(rep.to_json())) == rep


# -- evaluation ------------------------------------------------------------------

def test_prediction_rules():
    ds = ArrayDataset(np.zeros((3, 1, 1, 1)), [0, 1, 1], ["a", "b", "c"], ["i0", "i1", "i2"])
    probs = engine.softmax(np.array([[3.2, -1.0], [0.0, 0.0], [-2.0, 1.0]]))
    recs = optim.predictions_from_probs(probs, ds)
    assert [r.predicted_class for r in recs] == ["benign", "benign", "malignant"]
    assert recs[1].probability == 0.5
    assert [r.image_id for r in recs] == ["i0", "i1", "i2"]
    assert [r.true_class for r in recs] == ["benign", "malignant", "malignant"]


def test_evaluate_one_record_per_item():
    spec = model.build_tcnn((6, 6, 3))
    store = model.init_parameters(spec, 0)
    ds = tiny_data(7)
    recs = optim.evaluate(spec, store, ds, batch_size=3)
    assert len(recs) == 7
    assert [r.patient_id for r in recs] == list(ds.patient_ids)
    assert all(0.5 <= r.probability <= 1 for r in recs)

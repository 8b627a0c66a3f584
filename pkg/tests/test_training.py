import csv
import itertools

import numpy as np
import pytest

from radiomap.features import PRESETS, assemble_input_stack
from radiomap.model import ModelConfig, build_model, predict
from radiomap.propagation import SceneParams, generate_scene, sample_transmitters
from radiomap.raster_io import read_raw, write_raw
from radiomap.scaling import ScalingConfig, nmse_db, rmse
from radiomap.training import (Samples, TrainConfig, augment_batch, dihedral, eval_rmse, evaluate, metrics_report,
                               train)


@pytest.fixture(scope="module")
def tiny():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (6, 6, 16, 16)).astype(np.float32)
    y = rng.random((6, 1, 16, 16)).astype(np.float32)
    return Samples(x, y)


def _fit(data, **kw):
    m = build_model(ModelConfig(width=4, depth=1))
    cfg = TrainConfig(batch_size=3, lr=1e-2, max_epochs=4, **kw)
    return m, train(m, data.subset(range(4)), data.subset([4, 5]), cfg)


def test_same_seed_same_history(tiny):
    _, a = _fit(tiny)
    _, b = _fit(tiny)
    assert a.history == b.history
    _, c = _fit(tiny, seed=1)
    assert c.history != a.history


def test_best_epoch_weights_restored(tiny):
    m, res = _fit(tiny)
    assert res.best_val_rmse == min(h["val_rmse"] for h in res.history)
    assert eval_rmse(m, tiny.subset([4, 5])) == res.best_val_rmse
    assert m.trained


def test_lr_only_halves(tiny):
    _, res = _fit(tiny, patience_lr=1, patience_early=50)
    lrs = [h["lr"] for h in res.history]
    for a, b in zip(lrs, lrs[1:]):
        assert b == a or b == a * 0.5


def test_early_stop():
    # a frozen target the model cannot move towards: plateau right away
    x = np.zeros((4, 6, 8, 8), np.float32)
    y = np.stack([np.full((1, 8, 8), v, np.float32) for v in (0.0, 1.0, 0.0, 1.0)])
    m = build_model(ModelConfig(width=2, depth=1))
    res = train(m, Samples(x, y), Samples(x, y), TrainConfig(batch_size=4, lr=1e-3, max_epochs=200,
                                                             patience_lr=1, patience_early=2))
    assert res.stopped_early and len(res.history) < 200


def test_empty_and_bad_inputs():
    with pytest.raises(ValueError):
        train(build_model(ModelConfig(width=2, depth=1)),
              Samples(np.zeros((0, 6, 8, 8)), np.zeros((0, 1, 8, 8))), None, TrainConfig())
    with pytest.raises(ValueError):
        Samples(np.zeros((2, 6, 8, 8)), np.zeros((3, 1, 8, 8)))
    with pytest.raises(ValueError):
        TrainConfig(patience_lr=5, patience_early=2)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_non_finite_loss_aborts(tiny):
    bad = Samples(tiny.inputs[:2], np.full((2, 1, 16, 16), np.nan, np.float32))
    with pytest.raises(FloatingPointError, match="epoch 0"):
        train(build_model(ModelConfig(width=2, depth=1)), bad, None, TrainConfig(batch_size=2, max_epochs=2))


def test_history_csv(tiny, tmp_path):
    _, res = _fit(tiny)
    res.write_csv(tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["epoch", "train_rmse", "val_rmse", "lr"]
    assert len(rows) == len(res.history) + 1
    assert float(rows[1][2]) == res.history[0]["val_rmse"]


# ----------------------------------------------------------------- augmentation
def test_dihedral_group_has_eight_distinct_elements():
    x = np.arange(9.0).reshape(1, 3, 3)
    outs = {dihedral(x, c).tobytes() for c in range(8)}
    assert len(outs) == 8


def test_augmentation_is_joint_and_matches_rotated_scene():
    scene = generate_scene(2, SceneParams(size=32))
    tx = sample_transmitters(scene, 1, np.random.default_rng(0))[0]
    preset = PRESETS["image_ndsm"]
    x = assemble_input_stack(scene, tx, preset).channels
    y = np.random.default_rng(1).random((1, 32, 32))
    xa, ya = augment_batch(x[None], y[None], [1])
    rotated = assemble_input_stack(scene.rot90(1), tx.rot90(scene.shape, 1), preset).channels
    assert np.max(np.abs(xa[0] - rotated)) <= 1e-12
    assert np.array_equal(ya[0], np.rot90(y, 1, axes=(1, 2)))


def test_rotated_data_sees_the_same_augmented_samples():
    # every augmentation of a rotated sample is an augmentation of the original
    x = np.random.default_rng(3).random((2, 4, 4))
    originals = {dihedral(x, c).tobytes() for c in range(8)}
    for k, c in itertools.product(range(4), range(8)):
        assert dihedral(np.rot90(x, k, axes=(1, 2)), c).tobytes() in originals


# ----------------------------------------------------------------- evaluation
def test_perfect_prediction_report():
    t = np.random.default_rng(5).random((2, 1, 8, 8)) * 0.8 + 0.1
    rep = metrics_report(t, t, float(t.mean()))
    assert rep.rmse_gray == 0.0 and rep.rmse_db == 0.0 and rep.nmse_db == 0.0
    assert rep.baseline_rmse_gray == pytest.approx(float(np.sqrt(np.mean((t - t.mean()) ** 2))), abs=1e-15)


def test_predictions_are_clamped_before_metrics():
    t = np.full((1, 1, 4, 4), 0.5)
    rep = metrics_report(np.full_like(t, 7.0), t, 0.5)
    assert rep.rmse_gray == pytest.approx(0.5)


def test_evaluate_matches_metrics_on_exported_rasters(tiny, tmp_path):
    m = build_model(ModelConfig(width=4, depth=1))
    rep = evaluate(m, tiny)
    pred = np.clip(predict(m, tiny.inputs), 0, 1)
    for i, p in enumerate(pred):
        write_raw(tmp_path / f"p{i}.raw", p[0])
    back = np.stack([read_raw(tmp_path / f"p{i}.raw") for i in range(len(pred))])[:, None].astype(np.float64)
    cfg = ScalingConfig()
    # raw rasters are float32, predictions float64: compare at float32 resolution
    assert rep.rmse_gray == pytest.approx(rmse(back, tiny.targets), rel=1e-6)
    assert rep.nmse_db == pytest.approx(nmse_db(back, tiny.targets, cfg), rel=1e-5)
    assert rep.baseline_rmse_gray == pytest.approx(rmse(np.full_like(back, tiny.targets.mean()), tiny.targets),
                                                   rel=1e-6)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radiomap.scaling import ScalingConfig, compute_scaling, db_to_gray, gray_to_db, nmse, nmse_db, rmse


def test_default_constants():
    cfg = compute_scaling()
    assert cfg.noise_dbm == -104.0
    assert cfg.pl_thr_db == -127.0
    assert cfg.pl_trnc_db == -147.0
    assert cfg.gray_span_db == 97.0
    assert cfg.report_factor == 77.0


def test_noise_floor_tracks_bandwidth_and_figure():
    assert compute_scaling(bandwidth_hz=20e6).noise_dbm == pytest.approx(-174 + 10 * math.log10(20e6))
    assert compute_scaling(nf_db=7).noise_dbm == pytest.approx(-97.0)


def test_ordering_invariant():
    for p_tx in (10.0, 23.0, 40.0):
        cfg = compute_scaling(p_tx_dbm=p_tx)
        assert cfg.pl_trnc_db < cfg.pl_thr_db < cfg.pl_max_db
        assert cfg.pl_trnc_db == int(cfg.pl_trnc_db)


def test_gray_endpoints_and_midpoint():
    cfg = ScalingConfig()
    assert db_to_gray(-147.0, cfg) == 0.0
    assert db_to_gray(-50.0, cfg) == 1.0
    assert db_to_gray(-98.5, cfg) == 0.5
    assert db_to_gray(-200.0, cfg) == 0.0
    assert db_to_gray(-10.0, cfg) == 1.0


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        db_to_gray(np.array([0.0, np.nan]), ScalingConfig())
    with pytest.raises(ValueError):
        gray_to_db(np.inf, ScalingConfig())


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=-147.0, max_value=-50.0))
def test_gray_roundtrip(x):
    cfg = ScalingConfig()
    assert abs(gray_to_db(db_to_gray(x, cfg), cfg) - x) <= 1e-12


def test_rmse_report_factor():
    pred = np.zeros(100)
    target = np.full(100, 0.067)
    assert rmse(pred, target) == pytest.approx(0.067, abs=1e-15)
    assert rmse(pred, target, "db") == pytest.approx(5.159, abs=1e-12)
    assert round(rmse(pred, target, "db"), 1) == 5.2


def test_rmse_matches_loop_oracle():
    rng = np.random.default_rng(3)
    p, t = rng.random((17, 9)), rng.random((17, 9))
    acc = 0.0
    for a, b in zip(p.ravel(), t.ravel()):
        acc += (a - b) ** 2
    assert abs(rmse(p, t) - math.sqrt(acc / p.size)) <= 1e-12


def test_rmse_permutation_invariant():
    rng = np.random.default_rng(4)
    p, t = rng.random(50), rng.random(50)
    perm = rng.permutation(50)
    assert rmse(p[perm], t[perm]) == pytest.approx(rmse(p, t), abs=1e-15)


def test_rmse_shape_mismatch():
    with pytest.raises(ValueError):
        rmse(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        rmse(np.zeros(3), np.zeros(3), domain="watts")


def test_nmse_constant_offset():
    rng = np.random.default_rng(5)
    t = -60 - 80 * rng.random((8, 8))
    c = 3.0
    assert nmse(t + c, t) == pytest.approx(c * c * t.size / np.sum(t ** 2), rel=1e-12)
    assert nmse(t, t) == 0.0


def test_nmse_scales_with_target_energy():
    t = np.full(10, -80.0)
    e = 2.0
    assert nmse(2 * t + e, 2 * t) == pytest.approx(nmse(t + e, t) / 4, rel=1e-12)


def test_nmse_zero_energy():
    with pytest.raises(ValueError):
        nmse(np.ones(3), np.zeros(3))


def test_nmse_db_converts_gray():
    cfg = ScalingConfig()
    t = np.array([0.2, 0.5, 0.9])
    p = t + 0.1
    tdb = -147 + 97 * t
    assert nmse_db(p, t, cfg) == pytest.approx(np.sum((97 * 0.1) ** 2 * np.ones(3)) / np.sum(tdb ** 2), rel=1e-12)


def test_roundtrip_dict():
    cfg = ScalingConfig(p_tx_dbm=30.0)
    assert ScalingConfig.from_dict(cfg.to_dict()) == cfg

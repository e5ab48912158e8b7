"""Smoke tests for the python module: each core identity in one place."""

import math

import numpy as np
import pytest

import pgx


def test_schedule_hand_values():
    s = pgx.make_schedule(2, 0.1, 0.2)
    assert s["betas"] == pytest.approx([0.1, 0.2])
    assert s["alphas_cum"] == pytest.approx([0.9, 0.72])
    s100 = pgx.make_schedule(100, 0.006, 0.128)
    ac = s100["alphas_cum"]
    assert all(b < a for a, b in zip(ac, ac[1:]))
    with pytest.raises(pgx.PgxError):
        pgx.make_schedule(0, 0.1, 0.2)


def test_q_sample_and_ddim_round_trip():
    s = pgx.make_schedule(100, 0.006, 0.128)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, size=(8, 8)).astype(np.float32)
    eps = rng.standard_normal((8, 8)).astype(np.float32)
    x = pgx.q_sample(x0, 100, eps, s["betas"])
    for t in range(100, 0, -5):
        x = pgx.ddim_step(x, t, max(t - 5, 0), eps, s["betas"])
    assert np.max(np.abs(x - x0)) <= 1e-5


def test_weighted_loss_anchors():
    assert pgx.weighted_loss([0.0, 0.0], 0) == pytest.approx(0.5 * math.log(2), abs=1e-9)
    assert pgx.weighted_loss([40.0, 0.0], 0) < 1e-10


def test_auc_and_youden():
    assert pgx.auc([1, 1, 0, 0], [0.9, 0.4, 0.5, 0.1]) == pytest.approx(0.75)
    assert pgx.weighted_youden(0.68, 0.74, 0.6) == pytest.approx(0.704)
    m = pgx.confusion_metrics([1, 1, 0, 0], [0.8, 0.7, 0.6, 0.2])
    assert m["accuracy"] == pytest.approx(0.75)


def test_decomposition_identity():
    rng = np.random.default_rng(1)
    w1 = [rng.standard_normal((2, 6)).astype(np.float32) for _ in range(4)]
    w2 = rng.standard_normal((2, 8)).astype(np.float32)
    z = rng.standard_normal((4, 6)).astype(np.float32)
    s = pgx.extract_features(z, w1, w2)
    sv = pgx.score(s, w1, w2)
    for c in range(2):
        v = pgx.decision_vector(s, w1, w2, c)
        assert sum(v) == pytest.approx(sv["y"][c], abs=1e-12)


def test_manipulation_worked_example():
    w1 = [np.array([[3.0, 4.0]], dtype=np.float32), np.array([[1.0, 1.0]], dtype=np.float32)]
    w2 = np.array([[-2.0, 0.5], [1.0, -0.5]], dtype=np.float32)
    z = pgx.manipulate([0.0, 0.0], w1, w2, 0, 0, 0, "enhance", 1.0)
    assert z == pytest.approx([-0.6, -0.8])
    assert pgx.predicted_contribution_change(w1, w2, 0, 0, 0, 1.0) == pytest.approx(10.0)


def test_generate_and_measure():
    case = pgx.generate_case(123, 0, 1)
    assert case["label"] == 1
    assert case["slices"].shape == (4, 16, 16)
    # class-1 evidence is planted on slice 2
    f2 = case["factors"][2]
    assert (f2["opacity_level"] > 0.6 and f2["vessel_density"] > 0.5) or f2["lung_area_scale"] < 0.65
    m_hi = pgx.measure_factors(case["slices"][2])
    assert not m_hi["degenerate"]
    blank = np.full((16, 16), -1.0, dtype=np.float32)
    assert pgx.measure_factors(blank)["degenerate"]

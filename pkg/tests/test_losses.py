import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from carotid_ssl import losses as L

T = lambda *a: torch.tensor(a, dtype=torch.float64)


def brute_tversky(p, g, delta):
    """Hard masks: count TP/FN/FP with python loops."""
    tp = fn = fp = 0
    for pi, gi in zip(p.ravel().tolist(), g.ravel().tolist()):
        tp += pi and gi
        fn += (not pi) and gi
        fp += pi and (not gi)
    den = tp + delta * fn + (1 - delta) * fp
    return tp / den if den else 0.0


def dice(p, g):
    inter = np.logical_and(p, g).sum()
    return 2 * inter / (p.sum() + g.sum())


# ---------------------------------------------------------------- schedules

def test_rampup_examples():
    assert L.rampup_weight(60, 60, 10) == 10
    assert L.rampup_weight(1e6, 60, 10) == 10
    assert L.rampup_weight(0, 60, 10) == pytest.approx(10 * math.exp(-5), abs=1e-12)
    assert round(L.rampup_weight(0, 60, 10), 4) == 0.0674


def test_rampup_monotone_and_small_at_start():
    vals = [L.rampup_weight(t, 40, 20) for t in np.linspace(0, 80, 161)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    # well under 1 % of the plateau at t = 0
    assert vals[0] / 20 < 0.01


def test_rampup_rejects_bad_length():
    with pytest.raises(ValueError):
        L.rampup_weight(1, 0, 10)


def test_threshold_examples():
    assert L.uncertainty_threshold(40, 40, 20) == pytest.approx(math.log(2), abs=1e-12)
    assert round(L.uncertainty_threshold(0, 40, 20), 4) == 0.5210
    ts = np.linspace(0, 80, 81)
    vals = [L.uncertainty_threshold(t, 40, 20) for t in ts]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert min(vals) >= 0.75 * math.log(2) and max(vals) <= math.log(2) + 1e-15


# ---------------------------------------------------------------- Tversky / BCE

def test_tversky_hand_example():
    g, p = T(1, 0, 0, 0), T(1, 1, 0, 0)
    assert float(L.modified_tversky_index(p, g, 0.7)) == pytest.approx(1 / 1.3, abs=1e-12)
    assert round(float(L.modified_tversky_index(p, g, 0.7)), 4) == 0.7692


def test_tversky_perfect():
    g = T(1, 0, 1, 0)
    assert float(L.modified_tversky_index(g, g, 0.7)) == pytest.approx(1.0)


def test_tversky_matches_brute_force_and_dice():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = rng.integers(1, 30)
        g = rng.uniform(size=n) < 0.4
        p = rng.uniform(size=n) < 0.4
        g[rng.integers(n)] = True  # keep the denominator positive
        delta = rng.uniform()
        got = float(L.modified_tversky_index(torch.from_numpy(p.astype(float)), torch.from_numpy(g.astype(float)), delta, eps=1e-300))
        assert got == pytest.approx(brute_tversky(p, g, delta), abs=1e-9)
        d = float(L.modified_tversky_index(torch.from_numpy(p.astype(float)), torch.from_numpy(g.astype(float)), 0.5, eps=1e-300))
        assert d == pytest.approx(dice(p, g), abs=1e-9)


def test_bce_examples():
    assert round(float(L.bce(T(0.25), T(1.0))), 4) == 1.3863
    assert float(L.bce(T(0.5, 0.5), T(1.0, 0.0))) == pytest.approx(math.log(2))
    assert float(L.bce(T(1.0, 0.0), T(1.0, 0.0))) < 1e-6


def test_loc_loss_composition():
    g, p = T(1, 0, 0, 0), T(1, 1, 0, 0)
    cfg = L.LossConfig.localization()
    expected = 0.5 * (1 - 1 / 1.3) + 0.5 * float(L.bce(p, g))
    assert float(L.loc_supervised_loss(p, g, cfg)) == pytest.approx(expected, abs=1e-12)
    only_tv = L.LossConfig(lambda_loc=1.0)
    assert float(L.loc_supervised_loss(p, g, only_tv)) == pytest.approx(1 - 1 / 1.3, abs=1e-12)
    assert float(L.loc_supervised_loss(g, g, cfg)) < 1e-6


# ---------------------------------------------------------------- asymmetric losses

def test_asym_focal_single_background_pixel():
    p = T(0.5, 0.5).reshape(2, 1, 1)
    g = T(1.0, 0.0).reshape(2, 1, 1)
    got = float(L.asym_focal(p, g, 0.6, 0.25))
    assert got == pytest.approx(-0.4 * 0.5**0.25 * math.log(0.5), abs=1e-12)
    assert round(got, 4) == 0.2331


def test_asym_focal_vartheta_zero_is_weighted_ce():
    rng = np.random.default_rng(1)
    p = torch.softmax(torch.from_numpy(rng.normal(size=(3, 4, 4))), dim=0)
    lab = rng.integers(0, 3, size=(4, 4))
    g = torch.from_numpy(np.eye(3)[lab].transpose(2, 0, 1))
    M = 16
    ce_rare = -(g[1:] * torch.log(p[1:])).sum() * 0.6 / M
    ce_back = -(g[0] * torch.log(p[0])).sum() * 0.4 / M
    assert float(L.asym_focal(p, g, 0.6, 0.0)) == pytest.approx(float(ce_rare + ce_back), abs=1e-12)


def test_asym_focal_tversky_rare_term():
    # direct evaluation of (1 - 1/1.3)^0.75
    assert round((1 - 1 / 1.3) ** 0.75, 4) == 0.3330
    # background perfect, rare class with mTI = 1/1.3 under delta 0.7
    g = torch.zeros(2, 1, 4, dtype=torch.float64)
    g[1, 0, 0] = 1
    g[0, 0, 1:] = 1
    p = torch.zeros_like(g)
    p[1, 0, :2] = 1
    p[0, 0, 2:] = 1
    mti = L.per_class_tversky(p, g, 0.7)
    assert float(mti[1]) == pytest.approx(1 / 1.3)
    got = float(L.asym_focal_tversky(p, g, 0.7, 0.25))
    expected = (1 - float(mti[0])) + (1 - 1 / 1.3) ** 0.75
    assert got == pytest.approx(expected, abs=1e-12)


def test_asym_focal_tversky_vartheta_zero_sums_plain_losses():
    rng = np.random.default_rng(2)
    p = torch.softmax(torch.from_numpy(rng.normal(size=(2, 3, 5, 5))), dim=1)
    g = torch.from_numpy(np.eye(3)[rng.integers(0, 3, size=(2, 5, 5))].transpose(0, 3, 1, 2))
    mti = L.per_class_tversky(p, g, 0.6)
    assert float(L.asym_focal_tversky(p, g, 0.6, 0.0)) == pytest.approx(float((1 - mti).sum()), abs=1e-12)


def test_seg_loss_composition_and_endpoints():
    rng = np.random.default_rng(3)
    p = torch.softmax(torch.from_numpy(rng.normal(size=(2, 3, 4, 4))), dim=1)
    g = torch.from_numpy(np.eye(3)[rng.integers(0, 3, size=(2, 4, 4))].transpose(0, 3, 1, 2))
    cfg = L.LossConfig()
    f = L.asym_focal(p, g, 0.6, 0.25)
    t = L.asym_focal_tversky(p, g, 0.6, 0.25)
    assert float(L.seg_supervised_loss(p, g, cfg)) == pytest.approx(float(0.5 * f + 0.5 * t), abs=1e-9)
    assert float(L.seg_supervised_loss(p, g, L.LossConfig(lambda_seg=1.0))) == pytest.approx(float(f), abs=1e-12)
    assert float(L.seg_supervised_loss(p, g, L.LossConfig(lambda_seg=0.0))) == pytest.approx(float(t), abs=1e-12)


def test_seg_loss_perfect_prediction_is_near_zero():
    g = torch.from_numpy(np.eye(3)[np.array([[0, 1], [2, 0]])].transpose(2, 0, 1)).double()
    assert float(L.seg_supervised_loss(g, g, L.LossConfig())) < 1e-3


def test_asymmetric_losses_need_two_classes():
    with pytest.raises(ValueError):
        L.asym_focal(torch.ones(1, 2, 2), torch.ones(1, 2, 2), 0.6, 0.25)


def test_two_class_expansion():
    p = T(0.2, 0.9).reshape(1, 1, 2)
    out = L.two_class(p)
    assert out.shape == (2, 1, 2)
    assert torch.allclose(out.sum(0), torch.ones(1, 2, dtype=torch.float64))


def test_config_validation():
    with pytest.raises(ValueError):
        L.LossConfig(delta_seg=1.5)
    with pytest.raises(ValueError):
        L.LossConfig(eps=0)


# ---------------------------------------------------------------- consistency

def test_consistency_examples():
    rng = np.random.default_rng(4)
    ps = torch.from_numpy(rng.uniform(size=(2, 3, 4, 4)))
    pt = torch.from_numpy(rng.uniform(size=(2, 3, 4, 4)))
    ones = torch.ones_like(ps)
    assert float(L.consistency_mse(ps, ps, ones)) == 0
    assert float(L.consistency_mse(ps, pt, ones)) == pytest.approx(float(((ps - pt) ** 2).mean()), abs=1e-15)
    half = ones.clone()
    half[..., 2:] = 0
    expected = float(((ps - pt)[..., :2] ** 2).mean())
    assert float(L.consistency_mse(ps, pt, half)) == pytest.approx(expected, abs=1e-15)
    assert float(L.consistency_mse(ps, pt, torch.zeros_like(ps))) == 0


def test_consistency_shape_mismatch():
    with pytest.raises(ValueError):
        L.consistency_mse(torch.zeros(1, 2, 2), torch.zeros(1, 3, 2), torch.ones(1, 2, 2))


def test_predictive_entropy_examples():
    onehot = torch.tensor([[1.0, 0.0]]).reshape(1, 2, 1, 1).repeat(3, 1, 1, 1)
    assert float(L.predictive_entropy(onehot).max()) == 0
    a = torch.tensor([1.0, 0.0]).reshape(2, 1, 1)
    b = torch.tensor([0.0, 1.0]).reshape(2, 1, 1)
    assert float(L.predictive_entropy(torch.stack([a, b]))) == pytest.approx(math.log(2), abs=1e-7)
    assert float(L.predictive_entropy(torch.full((1, 2, 1, 1), 0.5))) == pytest.approx(math.log(2), abs=1e-7)
    with pytest.raises(ValueError):
        L.predictive_entropy(torch.zeros(0, 2, 1, 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 4), st.integers(0, 2**31 - 1))
def test_predictive_entropy_bounded_by_log_c(T_, C, seed):
    rng = np.random.default_rng(seed)
    p = torch.softmax(torch.from_numpy(rng.normal(size=(T_, C, 3, 3)) * 3), dim=1)
    ent = L.predictive_entropy(p)
    assert float(ent.min()) >= 0
    assert float(ent.max()) <= math.log(C) + 1e-9


def test_uncertainty_consistency_examples():
    rng = np.random.default_rng(5)
    ps = torch.from_numpy(rng.uniform(size=(2, 4, 4)))
    pt = torch.from_numpy(rng.uniform(size=(2, 4, 4)))
    v = torch.ones(2, 4, 4, dtype=torch.float64)
    zero_u = torch.zeros(4, 4, dtype=torch.float64)
    assert float(L.uncertainty_consistency(ps, pt, v, zero_u, 0.5)) == pytest.approx(float(L.consistency_mse(ps, pt, v)))
    assert float(L.uncertainty_consistency(ps, pt, v, torch.ones(4, 4, dtype=torch.float64), 0.5)) == 0
    u = torch.ones(4, 4, dtype=torch.float64)
    u[1, 2] = 0
    got = float(L.uncertainty_consistency(ps, pt, v, u, 0.5))
    assert got == pytest.approx(float(((ps - pt)[:, 1, 2] ** 2).mean()), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 100), st.integers(0, 2**31 - 1))
def test_uncertainty_gate_monotone(t, seed):
    """The plateau threshold keeps every pixel an earlier threshold keeps."""
    rng = np.random.default_rng(seed)
    u = torch.from_numpy(rng.uniform(0, math.log(2), size=(8, 8)))
    early = u < L.uncertainty_threshold(t, 40, 20)
    plateau = u < math.log(2)
    assert bool((plateau | ~early).all())


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("name", ["loc_supervised", "seg_supervised", "consistency_mse", "uncertainty_consistency", "prior_symmetry"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(name, seed):
    from gradient_cases import cases, relative_error

    fn, x = cases(seed)[name]
    assert float(fn(x)) != 0
    assert relative_error(fn, x) < 1e-4

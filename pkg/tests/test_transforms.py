import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from carotid_ssl.transforms import (
    GeometricParams,
    PerturbationParams,
    PerturbationPolicy,
    PhotometricParams,
    adjust_sharpness,
    apply_geometric,
    apply_photometric,
    augment_labeled,
    forward_matrix,
    perturb_input,
    sample_perturbation,
    transform_probabilities,
    validity_mask,
)

IDENTITY = GeometricParams()


def one_hot(labels, C):
    return torch.from_numpy(np.eye(C, dtype=np.float32)[labels]).permute(2, 0, 1).contiguous()


# ---------------------------------------------------------------- sampling

def test_degenerate_ranges_give_fixed_params():
    pol = PerturbationPolicy(
        flip=False, rotation_deg=(10, 10), weak_scale=(1.2, 1.2), strong_scale=(1.2, 1.2), crop_px=(3, 3),
        perspective=False, noise_std=(0.05, 0.05), sharpness_factor=(1.5, 1.5), intensity_gamma=(0.8, 0.8),
    )
    a = sample_perturbation(pol, np.random.default_rng(0))
    b = sample_perturbation(pol, np.random.default_rng(1))
    assert a.gamma == b.gamma
    assert (a.phi.noise_std, a.phi.sharpness_factor, a.phi.intensity_gamma) == (0.05, 1.5, 0.8)
    assert a.gamma.rotation_deg == 10 and a.gamma.scale == 1.2 and a.gamma.crop_offset == (3.0, 3.0)


def test_rotation_sampling_audit():
    rng = np.random.default_rng(0)
    pol = PerturbationPolicy()
    rots = np.array([sample_perturbation(pol, rng).gamma.rotation_deg for _ in range(10_000)])
    assert rots.min() >= -25 and rots.max() <= 25
    assert rots.min() < -24 and rots.max() > 24


def test_sampling_determinism_and_serialization():
    a = sample_perturbation(PerturbationPolicy(), np.random.default_rng(5))
    b = sample_perturbation(PerturbationPolicy(), np.random.default_rng(5))
    assert a == b
    assert PerturbationParams.from_dict(a.to_dict()) == a


def test_policy_validation():
    with pytest.raises(ValueError):
        PerturbationPolicy(rotation_deg=(5, -5))
    with pytest.raises(ValueError):
        PerturbationPolicy(perspective_max=-0.1)


def test_disabled_policy_samples_identity():
    p = sample_perturbation(PerturbationPolicy.disabled(), np.random.default_rng(0))
    assert p.gamma.is_identity()
    x = torch.rand(5, 8, 8)
    assert torch.equal(perturb_input(x, p), x)


def test_photometric_only_policy_has_identity_geometry():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert sample_perturbation(PerturbationPolicy.photometric_only(), rng).gamma.is_identity()


# ---------------------------------------------------------------- geometry

def test_identity_gamma():
    x = torch.rand(3, 7, 9)
    assert torch.equal(apply_geometric(x, IDENTITY), x)
    assert torch.equal(validity_mask(IDENTITY, 7, 9, 3), torch.ones(3, 7, 9))


def test_rot90_is_exact_permutation():
    x = torch.rand(2, 8, 8)
    for k, deg in ((1, 90), (2, 180), (3, 270)):
        g = GeometricParams(rotation_deg=deg)
        out = apply_geometric(x, g)
        # counter-clockwise on screen axes with rows pointing down equals torch.rot90 with k negative
        matches = [torch.equal(out, torch.rot90(x, s * k, dims=(-2, -1))) for s in (1, -1)]
        assert any(matches)
        assert torch.equal(validity_mask(g, 8, 8), torch.ones(1, 8, 8))


def test_flip_is_exact():
    x = torch.rand(2, 6, 6)
    g = GeometricParams(flip_h=True)
    assert torch.equal(apply_geometric(x, g), torch.flip(x, dims=(-1,)))
    assert validity_mask(g, 6, 6).sum() == 36


def test_rotation_45_validity():
    v = validity_mask(GeometricParams(rotation_deg=45), 32, 32)[0]
    assert v[0, 0] == 0 and v[0, -1] == 0 and v[-1, 0] == 0 and v[-1, -1] == 0
    assert bool(v[10:22, 10:22].all())
    assert set(v.unique().tolist()) <= {0.0, 1.0}


def test_nearest_keeps_one_hot():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=(16, 16))
    mask = one_hot(labels, 3)
    for _ in range(25):
        g = sample_perturbation(PerturbationPolicy(), rng).gamma
        out = apply_geometric(mask, g, "nearest")
        v = validity_mask(g, 16, 16)[0].bool()
        assert set(out.unique().tolist()) <= {0.0, 1.0}
        assert torch.equal(out.sum(0)[v], torch.ones(int(v.sum())))


def test_bad_interpolation():
    with pytest.raises(ValueError):
        apply_geometric(torch.zeros(1, 4, 4), GeometricParams(rotation_deg=3), "cubic")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_validity_sum_bound_and_channel_commutation(seed):
    rng = np.random.default_rng(seed)
    g = sample_perturbation(PerturbationPolicy(), rng).gamma
    v = validity_mask(g, 12, 12, 2)
    assert float(v.sum()) <= 12 * 12 * 2
    x = torch.from_numpy(rng.uniform(size=(3, 12, 12)))
    perm = [2, 0, 1]
    assert torch.equal(apply_geometric(x, g)[perm], apply_geometric(x[perm], g))


@pytest.mark.parametrize("g", [GeometricParams(flip_h=True), GeometricParams(rotation_deg=90), GeometricParams(rotation_deg=180, flip_h=True)])
def test_support_preserving_full_validity(g):
    assert float(validity_mask(g, 10, 10).sum()) == 100


def test_shrinking_loses_validity():
    assert float(validity_mask(GeometricParams(scale=0.8), 10, 10).sum()) < 100


def test_forward_matrix_identity():
    assert np.allclose(forward_matrix(IDENTITY, 5, 7), np.eye(3))


def test_transform_probabilities_renormalizes():
    rng = np.random.default_rng(1)
    p = torch.softmax(torch.from_numpy(rng.normal(size=(3, 16, 16))), dim=0)
    g = GeometricParams(rotation_deg=17, scale=1.1)
    out = transform_probabilities(p, g)
    v = validity_mask(g, 16, 16)[0].bool()
    assert torch.allclose(out.sum(0)[v], torch.ones(int(v.sum()), dtype=out.dtype), atol=1e-12)
    single = torch.rand(1, 16, 16)
    assert torch.equal(transform_probabilities(single, g), apply_geometric(single, g))


# ---------------------------------------------------------------- photometry

def test_photometric_identity():
    x = torch.rand(5, 8, 8)
    assert torch.equal(apply_photometric(x, PhotometricParams()), x)


def test_intensity_gamma_fixed_point():
    x = torch.ones(1, 8, 8)
    assert torch.equal(apply_photometric(x, PhotometricParams(intensity_gamma=0.6)), x)


def test_noise_std_statistic():
    x = torch.full((1, 256, 256), 0.5, dtype=torch.float64)
    out = apply_photometric(x, PhotometricParams(noise_std=0.1, noise_seed=3))
    assert float((out - x).std()) == pytest.approx(0.1, rel=0.02)


def test_noise_replay_is_bit_identical():
    x = torch.rand(5, 16, 16)
    p = sample_perturbation(PerturbationPolicy(), np.random.default_rng(9))
    assert torch.equal(perturb_input(x, p), perturb_input(x, PerturbationParams.from_dict(p.to_dict())))


def test_sharpness_identity_and_constant():
    x = torch.rand(2, 8, 8)
    assert torch.equal(adjust_sharpness(x, 1.0), x)
    c = torch.full((1, 8, 8), 0.3)
    assert torch.allclose(adjust_sharpness(c, 1.8), c)


# ---------------------------------------------------------------- labeled augmentation

def test_augment_labeled_keeps_one_hot_and_background_fill():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(5, 16, 16)).astype(np.float32)
    mask = one_hot(rng.integers(0, 3, size=(16, 16)), 3).numpy()
    for _ in range(10):
        i2, m2 = augment_labeled(img, mask, rng, 15)
        assert i2.shape == img.shape
        assert np.array_equal(m2.sum(0), np.ones((16, 16)))


def test_augment_labeled_single_channel_target_pads_with_zero():
    rng = np.random.default_rng(0)
    img = np.zeros((5, 16, 16), np.float32)
    target = np.zeros((1, 16, 16), np.float32)
    for _ in range(10):
        _, t = augment_labeled(img, target, rng, 15)
        assert t.sum() == 0

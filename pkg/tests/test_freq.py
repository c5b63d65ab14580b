import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ornet import freq
from ornet.data import synthesize_degradation, upsample_lr
from ornet.errors import DimensionError


def test_two_by_two_closed_form():
    a, b, c, d = 1.0, 2.0, 3.0, 5.0
    p = freq.haar_dwt2(np.array([[a, b], [c, d]]), 1)
    assert p.ll[0, 0] == (a + b + c + d) / 2
    lh, hl, hh = (x[0, 0] for x in p.details[0])
    assert (lh, hl, hh) == ((a + b - c - d) / 2, (a - b + c - d) / 2, (a - b - c + d) / 2)


def test_constant_image_is_pure_dc():
    p = freq.haar_dwt2(np.full((16, 16), 0.4), 3)
    for lh, hl, hh in p.details:
        assert not lh.any() and not hl.any() and not hh.any()
    assert p.ll.shape == (2, 2)
    prof = freq.image_profile(np.full((3, 16, 16), 0.4), 3)
    assert prof.share(3, "LL") == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_reconstruction_and_energy(seed):
    x = np.random.default_rng(seed).normal(size=(32, 32))
    p = freq.haar_dwt2(x, 4)
    assert np.max(np.abs(freq.haar_idwt2(p) - x)) < 1e-10
    energy = sum(float(np.sum(c * c)) for _, _, c in p.bands())
    assert abs(energy - float(np.sum(x * x))) < 1e-10 * max(1.0, float(np.sum(x * x)))


def test_indivisible_and_bad_shapes():
    with pytest.raises(ValueError):
        freq.haar_dwt2(np.zeros((12, 16)), 3)
    with pytest.raises(DimensionError):
        freq.haar_dwt2(np.zeros((2, 8, 8)), 1)
    with pytest.raises(DimensionError):
        freq.degradation_profile(np.zeros((3, 8, 8)), np.zeros((3, 16, 16)), 2)


def test_white_noise_level_one_share():
    for s in range(20):
        noise = np.random.default_rng(s).normal(size=(1, 64, 64))
        share = freq.feature_band_profile(noise, 4, reduce="mean").fine_share()
        assert abs(share - 0.75) < 0.075


def test_magnitude_reduction_keeps_dc():
    noise = np.random.default_rng(0).normal(size=(1, 64, 64))
    p = freq.feature_band_profile(noise, 4)
    assert p.fine_share() < 0.5 and p.share(4, "LL") > 0.5
    with pytest.raises(ValueError):
        freq.feature_band_profile(noise, 4, reduce="max")


def test_zero_feature_sets_flag():
    p = freq.feature_band_profile(np.zeros((4, 16, 16)), 2)
    assert p.zero_total and p.total == 0.0
    np.testing.assert_allclose(p.energy, 1.0 / 7)
    hr = np.random.default_rng(0).uniform(size=(3, 16, 16))
    q = freq.degradation_profile(hr, hr, 2)
    assert q.zero_total


def test_profile_bookkeeping():
    p = freq.image_profile(np.random.default_rng(1).uniform(size=(3, 32, 32)), 3)
    assert len(p.bands) == 10 and p.bands[-1] == (3, "LL")
    assert (p.energy >= 0).all() and abs(p.energy.sum() - 1) < 1e-9
    ls = p.level_shares()
    assert ls.shape == (4,) and abs(p.fine_share() + p.coarse_share() - 1) < 1e-12
    assert 1.0 <= p.mean_level() <= 4.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_scaling_invariance_and_sign_symmetry(seed, k):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(3, 16, 16)), rng.uniform(size=(3, 16, 16))
    base = freq.degradation_profile(a, b, 3)
    np.testing.assert_allclose(freq.degradation_profile(k * a, k * b, 3).energy, base.energy, atol=1e-12)
    np.testing.assert_allclose(freq.degradation_profile(b, a, 3).energy, base.energy, atol=1e-15)


def test_region_profile():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(3, 32, 32)), rng.uniform(size=(3, 32, 32))
    full = freq.degradation_profile(a[:, 8:24, 0:16], b[:, 8:24, 0:16], 2)
    region = freq.degradation_profile(a, b, 2, region=(8, 0, 16, 16))
    np.testing.assert_array_equal(full.energy, region.energy)
    with pytest.raises(ValueError):
        freq.degradation_profile(a, b, 2, region=(20, 0, 16, 16))


def test_degradation_directions_on_synthetic_scene():
    from ornet.data import synthetic_image
    hr = synthetic_image(np.random.default_rng(0), 64)
    bic = synthesize_degradation(hr, "bicubic", 2, np.random.default_rng(1))
    bn = synthesize_degradation(hr, "blur_noise", 2, np.random.default_rng(1))
    pb = freq.degradation_profile(upsample_lr(bic), hr, 4)
    pn = freq.degradation_profile(upsample_lr(bn), hr, 4)
    assert pb.fine_share() > pb.coarse_share()
    assert pn.coarse_share() > pb.coarse_share()


def test_csv_writer(tmp_path):
    p = freq.image_profile(np.random.default_rng(3).uniform(size=(3, 8, 8)), 2, source="img")
    path = tmp_path / "p.csv"
    freq.write_profiles_csv([p], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "tag,level,band,energy_share" and len(lines) == 8
    assert lines[-1].startswith("img,2,LL,")

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gabortex import autodiff as ad
from gabortex.autodiff import Tape, Tensor
from gabortex.gabor import (Band, ConstrainedParam, FilterBank, GaborFilterSpec, apply_bank, constrain,
                            default_kernel_size, frequency_response, gaussian_energy, sigma_x_lower,
                            synthesize, valid_ranges)
from gabortex.oracle import dft2, gradcheck


# valid ranges ---------------------------------------------------------------

def test_ranges_at_112():
    vr = valid_ranges(112)
    assert vr.w_full[1] == pytest.approx((2 * math.pi * 112 - 25) / (4 * math.pi * 112), abs=1e-12)
    assert vr.w_full[1] == pytest.approx(0.482237, abs=5e-7)
    assert vr.sigma_y[0] == pytest.approx(0.795775, abs=5e-7)
    assert vr.sigma_y[1] == pytest.approx(22.4, abs=1e-12)
    assert vr.theta == (0.0, math.pi)


@pytest.mark.parametrize("S", [16, 32, 64, 112, 224])
def test_ranges_are_consistent(S):
    vr = valid_ranges(S)
    assert vr.w_low[0] == vr.w_full[0] and vr.w_high[1] == vr.w_full[1]
    assert vr.w_low[1] == vr.w_high[0] == pytest.approx(vr.w_full[1] / 2)
    # the sigma_x interval stays open all the way up to the top frequency
    below_top = np.nextafter(vr.w_full[1], 0.0)
    assert sigma_x_lower(below_top) <= vr.sigma_x_upper
    assert sigma_x_lower(vr.w_full[1]) == pytest.approx(vr.sigma_x_upper)
    assert vr.sigma_y[0] < vr.sigma_y[1]


def test_small_region_rejected():
    with pytest.raises(ValueError):
        valid_ranges(15)


def test_gaussian_energy_constant():
    assert 100 * gaussian_energy(2.5) == pytest.approx(98.76, abs=0.01)


def test_kernel_size_rule():
    assert default_kernel_size(32) == 17
    assert default_kernel_size(16) == 9
    assert default_kernel_size(112) == 33
    assert all(default_kernel_size(s) % 2 == 1 for s in range(16, 200))


# constrain --------------------------------------------------------------------

def test_constrain_examples():
    assert constrain(Tensor(0.0), 0.0, math.pi).item() == pytest.approx(math.pi / 2)
    assert constrain(Tensor(math.log(3.0)), 0.0, 1.0).item() == pytest.approx(0.75, abs=1e-15)
    assert 2.0 - constrain(Tensor(40.0), -1.0, 2.0).item() < 1e-6
    assert ConstrainedParam(0.0, 1.0, 3.0).value == 2.0


def test_constrain_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        constrain(Tensor(0.0), 1.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30), st.floats(-30, 30), st.floats(-5, 5), st.floats(0.01, 5))
def test_constrain_monotone_and_inside(r1, r2, lo, width):
    hi = lo + width
    a = constrain(Tensor(r1), lo, hi).item()
    b = constrain(Tensor(r2), lo, hi).item()
    assert lo < a < hi and lo < b < hi
    if r1 < r2:
        assert a <= b


def test_constrain_derivative_at_zero():
    raw = Tensor(0.0, requires_grad=True)
    with Tape() as tape:
        y = constrain(raw, 0.0, 1.0)
    tape.backward(y)
    assert raw.grad[0] == 0.25


# synthesis ----------------------------------------------------------------------

def test_origin_value():
    spec = GaborFilterSpec(2.0, 3.0, 0.7, 0.2, kernel_size=9)
    k = synthesize(spec)
    assert k[0, 4, 4] == pytest.approx(1.0 / (2 * math.pi * 2.0 * 3.0), rel=1e-14)
    assert k[1, 4, 4] == 0.0


def test_theta_zero_symmetry():
    k = synthesize(GaborFilterSpec(2.5, 1.5, 0.0, 0.3, kernel_size=11))
    np.testing.assert_allclose(k[0], k[0][::-1, :], atol=1e-15)


def test_dft_peak_of_64px_kernel():
    k = synthesize(GaborFilterSpec(4.0, 4.0, 0.0, 0.25, kernel_size=64 + 1))[:, :64, :64]
    _, (fx, fy) = dft2(k[0])
    assert abs(fx - 0.25) <= 1 / 64 and abs(fy) <= 1 / 64


def test_frequency_response():
    spec = GaborFilterSpec(3.0, 2.0, 0.0, 0.2)
    assert frequency_response(spec, 0.2, 0.0) == 1.0
    assert frequency_response(spec, 0.2, 50.0) == 0.0
    du = 2.5 / (2 * math.pi * 3.0)
    assert frequency_response(spec, 0.2 + du, 0.0) == pytest.approx(math.exp(-0.5 * 2.5 ** 2))
    rot = GaborFilterSpec(3.0, 2.0, math.pi / 3, 0.2)
    assert frequency_response(rot, 0.2 * math.cos(math.pi / 3), 0.2 * math.sin(math.pi / 3)) == pytest.approx(1.0)


# bank ----------------------------------------------------------------------------

def _in_ranges(bank: FilterBank) -> bool:
    vr = bank.ranges
    for s in bank.specs():
        wlo, whi = vr.w_band(s.band)
        if not (wlo < s.w < whi and vr.sigma_y[0] < s.sigma_y < vr.sigma_y[1]
                and vr.theta[0] < s.theta < vr.theta[1]
                and sigma_x_lower(s.w) < s.sigma_x < vr.sigma_x_upper):
            return False
    return True


def test_bank_split_and_ranges():
    bank = FilterBank(8, 32, np.random.default_rng(0))
    bands = [s.band for s in bank.specs()]
    assert bands.count(Band.LOW) == bands.count(Band.HIGH) == 4
    assert _in_ranges(bank)


def test_bank_rejects_odd_count():
    with pytest.raises(ValueError):
        FilterBank(3, 32, np.random.default_rng(0))


def test_saturated_raw_stays_strictly_inside():
    for raw in (-800.0, -40.0, 40.0, 800.0):
        v = constrain(Tensor(raw), 0.0, math.pi).item()
        assert 0.0 < v < math.pi


def test_bank_stays_in_range_under_random_updates():
    rng = np.random.default_rng(1)
    bank = FilterBank(6, 32, rng)
    for _ in range(1000):
        for t in bank.raw.values():
            t.data += rng.normal(0.0, 2.0, t.shape)
        assert _in_ranges(bank)


def test_zero_image_gives_sqrt_eps_maps():
    bank = FilterBank(4, 16, np.random.default_rng(2))
    maps = apply_bank(bank, np.zeros((16, 16))).data
    assert maps.shape == (4, 16, 16)
    np.testing.assert_allclose(maps, 1e-6)


def test_maps_nonnegative_and_finite():
    bank = FilterBank(4, 16, np.random.default_rng(3))
    maps = apply_bank(bank, np.random.default_rng(4).uniform(size=(3, 16, 16))).data
    assert maps.shape == (3, 4, 16, 16)
    assert np.all(maps >= 0) and np.all(np.isfinite(maps))


def test_region_size_mismatch():
    bank = FilterBank(2, 16, np.random.default_rng(0))
    with pytest.raises(ValueError):
        apply_bank(bank, np.zeros((20, 20)))


def test_tuned_filter_responds_more():
    S, w0 = 32, 0.1
    xs = np.arange(S)[None, :].repeat(S, axis=0)
    grating = 0.5 + 0.5 * np.cos(2 * math.pi * w0 * xs)
    bank = FilterBank(2, S, np.random.default_rng(0), constrained=False)
    bank.raw["sigma_x"].data[:] = 4.0
    bank.raw["sigma_y"].data[:] = 4.0
    bank.raw["theta"].data[:] = 0.0
    bank.raw["w"].data[:] = [w0, 2 * w0]
    # remove the DC term so only the carrier matters
    maps = apply_bank(bank, grating - grating.mean()).data
    assert maps[0, 8:24, 8:24].mean() > maps[1, 8:24, 8:24].mean()


def test_bank_gradients():
    rng = np.random.default_rng(5)
    bank = FilterBank(2, 16, rng)
    region = rng.uniform(size=(16, 16))
    W = rng.normal(size=(2, 16, 16))
    reports = gradcheck(lambda: ad.sum(ad.mul(apply_bank(bank, region), W)), bank.parameters())
    assert all(r.passed for r in reports), [str(r) for r in reports]
    assert all(np.any(p.grad != 0) for p in bank.parameters().values())

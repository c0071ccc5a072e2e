import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marsdust.metrics import (
    MS_SSIM_WEIGHTS,
    SsimParams,
    evaluate_denoiser,
    mae,
    ms_ssim,
    ms_ssim_details,
    ms_ssim_scales,
    psnr,
    ssim,
)
from oracles import halve, ssim_loop


def test_window_sums_to_one():
    g = SsimParams().window()
    assert np.outer(g, g).sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("kwargs", [{"k1": 0}, {"k2": -1}, {"data_range": 0}])
def test_params_validate(kwargs):
    with pytest.raises(ValueError):
        SsimParams(**kwargs)


def test_mae_basics():
    x = np.random.default_rng(0).random((16, 16))
    assert mae(x, x) == 0.0
    assert mae(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(0.1, abs=1e-15)
    with pytest.raises(ValueError):
        mae(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_constant_offset_is_20db():
    a = np.full((32, 32), 0.3)
    assert psnr(a, a + 0.1, 1.0) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a) == math.inf


def test_ssim_identity_and_errors():
    x = np.random.default_rng(1).random((40, 40))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("side", [16, 23, 32])
def test_ssim_matches_loop_oracle(seed, side):
    rng = np.random.default_rng(seed)
    a = rng.random((side, side))
    b = np.clip(a + 0.2 * rng.standard_normal((side, side)), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_loop(a, b), abs=1e-6)


def test_ssim_data_range_255():
    rng = np.random.default_rng(3)
    a = rng.integers(0, 256, (20, 20)).astype(float)
    b = rng.integers(0, 256, (20, 20)).astype(float)
    assert ssim(a, b, SsimParams(data_range=255)) == pytest.approx(ssim_loop(a, b, data_range=255), abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(11, 30))
def test_ssim_symmetric_and_bounded(seed, side):
    rng = np.random.default_rng(seed)
    a, b = rng.random((side, side)), rng.random((side, side))
    s = ssim(a, b)
    assert s == ssim(b, a)
    assert -1.0 <= s <= 1.0
    assert mae(a, b) == mae(b, a)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mae_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.random((3, 12, 12))
    assert mae(a, c) <= mae(a, b) + mae(b, c) + 1e-12


def test_psnr_decreases_with_noise_amplitude():
    rng = np.random.default_rng(4)
    img = rng.random((64, 64))
    noise = rng.standard_normal((64, 64))
    values = [psnr(img, img + amp * noise) for amp in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_ms_ssim_identity():
    x = np.random.default_rng(5).random((176, 176))
    assert ms_ssim(x, x) == pytest.approx(1.0, abs=1e-9)


def test_ms_ssim_scale_count():
    assert ms_ssim_scales((176, 176)) == 5
    assert ms_ssim_scales((175, 175)) == 4
    assert ms_ssim_scales((100, 100)) == 4
    assert ms_ssim_scales((64, 64)) == 3


def test_ms_ssim_coarsest_only_matches_manual_pyramid():
    rng = np.random.default_rng(6)
    a = rng.random((176, 176))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    ca, cb = a, b
    for _ in range(4):
        ca, cb = halve(ca), halve(cb)
    assert ms_ssim(a, b, weights=(0, 0, 0, 0, 1)) == pytest.approx(ssim_loop(ca, cb), abs=1e-6)


def test_ms_ssim_full_product_matches_manual_pyramid():
    rng = np.random.default_rng(7)
    a = rng.random((176, 176))
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    expected = 1.0
    ca, cb = a, b
    for j, w in enumerate(MS_SSIM_WEIGHTS):
        term = ssim_loop(ca, cb) if j == 4 else ssim_loop(ca, cb, cs_only=True)
        expected *= max(term, 0.0) ** w
        ca, cb = halve(ca), halve(cb)
    assert ms_ssim(a, b) == pytest.approx(expected, abs=1e-6)


def test_ms_ssim_small_image_renormalises_and_warns():
    rng = np.random.default_rng(8)
    a = rng.random((64, 64))
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    with pytest.warns(UserWarning, match="3 of 5 scales"):
        value, n = ms_ssim_details(a, b)
    assert n == 3
    assert 0.0 <= value <= 1.0


def test_evaluate_denoiser_perfect_and_means(tmp_path):
    rng = np.random.default_rng(9)
    clean = rng.random((4, 32, 32))
    rep = evaluate_denoiser(clean, clean)
    assert rep.means()["mae"] == 0.0
    assert rep.means()["ssim"] == pytest.approx(1.0, abs=1e-9)
    assert rep.n_psnr_infinite == 4

    restored = np.clip(clean + 0.05 * rng.standard_normal(clean.shape), 0, 1)
    rep = evaluate_denoiser(restored, clean)
    for key in ("mae", "psnr", "ssim", "msssim"):
        per_pair = getattr(rep, key)
        assert rep.means()[key] == pytest.approx(sum(per_pair) / len(per_pair), rel=1e-12)
    assert rep.means()["mae"] == pytest.approx(np.mean([mae(r, c) for r, c in zip(restored, clean)]))

    rep.write_json(tmp_path / "r.json")
    rep.write_csv(tmp_path / "r.csv")
    assert json.loads((tmp_path / "r.json").read_text())["n_pairs"] == 4
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "pair_id,mae,psnr,ssim,msssim"


def test_evaluate_denoiser_misaligned():
    with pytest.raises(ValueError):
        evaluate_denoiser(np.zeros((3, 16, 16)), np.zeros((2, 16, 16)))
    with pytest.raises(ValueError):
        evaluate_denoiser(np.zeros((1, 32, 32)), np.zeros((1, 16, 16)))


def test_evaluate_denoiser_upscales_clean_when_asked():
    clean = np.full((1, 100, 100), 0.5)
    restored = np.full((1, 256, 256), 0.5)
    rep = evaluate_denoiser(restored, clean, match_resolution=True)
    assert rep.resolution == (256, 256)
    assert rep.means()["mae"] == pytest.approx(0.0, abs=1e-7)

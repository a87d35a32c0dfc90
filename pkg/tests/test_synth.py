import numpy as np
import pytest

import oracles
from svshrink import (
    ComplexVolumeSet,
    MpLaw,
    PhantomSpec,
    SpikedSpec,
    add_white_noise,
    haar_frame,
    make_phantom,
    make_spiked,
    psnr,
)


def test_haar_frame_orthonormal():
    rng = np.random.default_rng(0)
    q = haar_frame(rng, 12, 5)
    assert q.shape == (12, 5)
    assert np.allclose(q.conj().T @ q, np.eye(5), atol=1e-12)
    # the phase gauge makes the frame a deterministic function of the draws
    rng2 = np.random.default_rng(0)
    assert np.array_equal(q, haar_frame(rng2, 12, 5))


def test_make_spiked_exact_spectrum():
    spec = SpikedSpec(m=20, n=40, thetas=(2.0, 1.0), sigma2=0.0)
    x, y = make_spiked(spec, 1)
    assert np.array_equal(x, y)
    eta = np.linalg.svd(x, compute_uv=False) / np.sqrt(40)
    assert np.allclose(eta[:2], [2.0, 1.0], atol=1e-12)
    assert np.allclose(eta[2:], 0.0, atol=1e-12)


def test_make_spiked_noise_level():
    spec = SpikedSpec(m=64, n=256, thetas=(), sigma2=2.0)
    _, y = make_spiked(spec, 2)
    assert np.mean(np.abs(y) ** 2) == pytest.approx(2.0, rel=0.05)


def test_spiked_observed_location():
    # observed top singular value near the analytic spiked limit
    locs = []
    for seed in range(8):
        spec = SpikedSpec(m=100, n=200, thetas=(2.0,), sigma2=1.0)
        _, y = make_spiked(spec, seed)
        locs.append(np.linalg.svd(y, compute_uv=False)[0] / np.sqrt(200))
    assert np.mean(locs) == pytest.approx(
        oracles.spiked_location(2.0, 0.5), rel=0.02)


def test_spiked_spec_validation():
    with pytest.raises(ValueError):
        SpikedSpec(m=2, n=4, thetas=(1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        SpikedSpec(m=2, n=4, thetas=(-1.0,))
    with pytest.raises(ValueError):
        SpikedSpec(m=0, n=4, thetas=())


def test_make_phantom_structure():
    spec = PhantomSpec(dims=(10, 9, 3), n_volumes=12, rank=3, intensity=5.0)
    rng = np.random.default_rng(3)
    vols = make_phantom(spec, rng)
    assert isinstance(vols, ComplexVolumeSet)
    assert vols.dims == (10, 9, 3)
    assert vols.n_volumes == 12
    flat = vols.data.reshape(-1, 12)
    s = np.linalg.svd(flat, compute_uv=False)
    assert s[2] > 1e-6 * s[0]       # full requested rank present
    assert s[3] < 1e-10 * s[0]      # and nothing beyond it
    unit = make_phantom(
        PhantomSpec(dims=(10, 9, 3), n_volumes=12, rank=3, intensity=1.0),
        np.random.default_rng(3))
    assert np.allclose(vols.data, 5.0 * unit.data, atol=1e-12)


def test_phantom_dominant_component_positive():
    spec = PhantomSpec(dims=(8, 8, 2), n_volumes=6, rank=1, contrast=0.0)
    vols = make_phantom(spec, np.random.default_rng(4))
    assert np.all(vols.data.real > 0)
    assert np.allclose(vols.data.imag, 0.0)


def test_add_white_noise():
    rng = np.random.default_rng(5)
    base = ComplexVolumeSet(np.zeros((16, 16, 2, 8), dtype=complex),
                            (1.0, 1.0, 1.0))
    noisy = add_white_noise(base, 0.25, rng)
    assert np.mean(np.abs(noisy.data) ** 2) == pytest.approx(0.25, rel=0.05)
    again = add_white_noise(base, 0.25, np.random.default_rng(5))
    assert np.array_equal(noisy.data, again.data)


def test_spiked_far_above_edge_location():
    # a strong component in a large matrix lands on the analytic limit
    spec = SpikedSpec(m=400, n=800, thetas=(3.0,), sigma2=1.0)
    _, y = make_spiked(spec, 7)
    top = np.linalg.svd(y, compute_uv=False)[0] / np.sqrt(800)
    assert top == pytest.approx(oracles.spiked_location(3.0, 0.5), rel=0.02)


def test_spiked_below_threshold_sticks_to_edge():
    # a component under the detectability threshold gamma^(1/4) leaves the
    # top singular value at the bulk edge sigma (1 + sqrt(gamma))
    tops = []
    for seed in range(50, 54):
        spec = SpikedSpec(m=100, n=400, thetas=(0.6,), sigma2=1.0)
        _, y = make_spiked(spec, seed)
        tops.append(np.linalg.svd(y, compute_uv=False)[0] / 20.0)
    assert np.mean(tops) == pytest.approx(1.5, rel=0.02)


def test_noise_only_pool_matches_limit_law():
    # pooled squared values from 40 independent draws against the limiting
    # quarter-circle-type law, Kolmogorov-Smirnov distance
    lam = []
    for seed in range(40):
        spec = SpikedSpec(m=100, n=200, thetas=(), sigma2=1.0)
        _, y = make_spiked(spec, seed)
        lam.append((np.linalg.svd(y, compute_uv=False) / np.sqrt(200)) ** 2)
    lam = np.sort(np.concatenate(lam))
    law = MpLaw(0.5, 1.0)
    grid = np.linspace(law.lower, law.upper, 20001)
    dens = law.density(grid)
    cdf_grid = np.concatenate(
        [[0.0], np.cumsum((dens[1:] + dens[:-1]) * 0.5 * np.diff(grid))])
    cdf_grid /= cdf_grid[-1]
    cdf = np.interp(lam, grid, cdf_grid, left=0.0, right=1.0)
    emp = (np.arange(lam.size) + 1) / lam.size
    ks = max(np.max(np.abs(emp - cdf)),
             np.max(np.abs(emp - 1.0 / lam.size - cdf)))
    assert ks < 0.02


def test_make_spiked_rank_zero_and_determinism():
    spec = SpikedSpec(m=16, n=32, thetas=(), sigma2=1.0)
    x0, y0 = make_spiked(spec, 9)
    assert np.all(x0 == 0.0)
    x1, y1 = make_spiked(spec, 9)
    assert np.array_equal(y0, y1)
    _, y2 = make_spiked(spec, 10)
    assert not np.array_equal(y0, y2)


def test_psnr_white_residual_concentration():
    # a million voxels at unit peak with variance 0.01 noise: the psnr
    # concentrates tightly at 20 dB
    base = ComplexVolumeSet(np.ones((100, 100, 1, 100), dtype=complex),
                            (1.0, 1.0, 1.0))
    noisy = add_white_noise(base, 0.01, np.random.default_rng(8))
    assert abs(psnr(base, noisy) - 20.0) < 0.1


def test_psnr_basics():
    rng = np.random.default_rng(6)
    ref = ComplexVolumeSet(np.full((4, 4, 1, 2), 2.0, dtype=complex),
                           (1.0, 1.0, 1.0))
    noisy = ComplexVolumeSet(ref.data + 0.1, (1.0, 1.0, 1.0))
    # |error| = 0.1 everywhere, peak 2 -> 20 log10(2 / 0.1)
    assert psnr(ref, noisy) == pytest.approx(20 * np.log10(20.0))
    with pytest.warns(RuntimeWarning):
        assert psnr(ref, ref) == 300.0
    with pytest.raises(ValueError):
        psnr(ref, ComplexVolumeSet(np.ones((4, 4, 1, 3), dtype=complex),
                                   (1.0, 1.0, 1.0)))
    # explicit peak wins over the reference maximum
    assert psnr(ref, noisy, peak=4.0) == pytest.approx(20 * np.log10(40.0))

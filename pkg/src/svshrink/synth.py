"""Synthetic data: spiked low-rank matrices, smooth phantoms, and metrics.

The spiked generator produces ground-truth low-rank matrices with chosen
scaled singular values plus white complex noise, the standard setting for
validating shrinkage rules.  The phantom generator builds a smooth,
strictly low-rank multi-volume complex object whose per-slice spectra are
dominated by the zero-frequency bin, so integer in-plane phase ramps are
exactly recoverable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .phase import PhaseModel
from .volumes import ComplexVolumeSet

PSNR_CAP_DB = 300.0


def _complex_normal(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) \
        * np.sqrt(0.5)


def haar_frame(rng, rows, cols):
    """Columns of a Haar-random complex matrix (rows >= cols)."""
    g = _complex_normal(rng, (rows, cols))
    q, r = np.linalg.qr(g)
    # fix the phase gauge so the factor is Haar distributed
    d = np.diagonal(r)
    return q * (d / np.abs(d))[None, :].conj()


@dataclass(frozen=True)
class SpikedSpec:
    """Low-rank plus white-noise matrix specification.

    thetas are the scaled signal singular values (svd(X)/sqrt(N)); sigma2
    is the per-entry complex noise variance.
    """

    m: int
    n: int
    thetas: tuple
    sigma2: float = 1.0

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("matrix sides must be positive")
        thetas = tuple(float(t) for t in self.thetas)
        if len(thetas) > min(self.m, self.n):
            raise ValueError("more spikes than the matrix rank allows")
        if any(t < 0 for t in thetas):
            raise ValueError("thetas must be non-negative")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")
        object.__setattr__(self, "thetas", thetas)


def make_spiked(spec, rng):
    """(signal, observed) matrices for a SpikedSpec.

    The signal has exactly the requested scaled singular values with Haar
    frames; the observation adds iid complex Gaussian noise of variance
    sigma2 per entry.
    """
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) \
        else rng
    k = len(spec.thetas)
    x = np.zeros((spec.m, spec.n), dtype=np.complex128)
    if k:
        u = haar_frame(rng, spec.m, k)
        v = haar_frame(rng, spec.n, k)
        s = np.asarray(spec.thetas) * np.sqrt(spec.n)
        x = (u * s[None, :]) @ v.conj().T
    y = x + np.sqrt(spec.sigma2) * _complex_normal(rng, (spec.m, spec.n))
    return x, y


@dataclass(frozen=True)
class PhantomSpec:
    """Smooth low-rank multi-volume phantom parameters.

    rank counts the across-volume components; smoothness is the Gaussian
    kernel width in voxels for the spatial factors; contrast scales the
    higher components relative to the dominant positive one.
    """

    dims: tuple = (16, 16, 8)
    n_volumes: int = 32
    rank: int = 4
    smoothness: float = 2.0
    contrast: float = 0.35
    intensity: float = 1.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError("dims must be three positive sizes")
        if self.n_volumes < 1 or self.rank < 1:
            raise ValueError("n_volumes and rank must be positive")
        if self.rank > self.n_volumes:
            raise ValueError("rank cannot exceed the volume count")
        if self.smoothness < 0 or self.contrast < 0 or self.intensity <= 0:
            raise ValueError("smoothness/contrast/intensity out of range")
        object.__setattr__(self, "dims", dims)


def _smooth_field(rng, dims, smoothness, complex_valued):
    if complex_valued:
        raw = _complex_normal(rng, dims)
        out = (ndimage.gaussian_filter(raw.real, smoothness)
               + 1j * ndimage.gaussian_filter(raw.imag, smoothness))
    else:
        out = ndimage.gaussian_filter(rng.standard_normal(dims), smoothness)
    norm = np.sqrt(np.mean(np.abs(out) ** 2))
    return out / max(norm, 1e-300)


def make_phantom(spec, rng, spacing=(1.0, 1.0, 1.0)):
    """Strictly rank-limited smooth complex volumes.

    The first component pairs a positive spatial field with a positive
    volume profile, which keeps every slice's spectrum peaked at zero
    frequency; the remaining rank-1 terms add smooth complex texture at
    relative weight contrast.
    """
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) \
        else rng
    base = np.abs(_smooth_field(rng, spec.dims, spec.smoothness, False)) + 0.6
    profile = 1.0 + 0.3 * rng.random(spec.n_volumes)
    data = np.multiply.outer(base, profile).astype(np.complex128)
    for _ in range(spec.rank - 1):
        field = _smooth_field(rng, spec.dims, spec.smoothness, True)
        weights = rng.standard_normal(spec.n_volumes) \
            + 1j * rng.standard_normal(spec.n_volumes)
        weights /= np.sqrt(spec.n_volumes)
        data += spec.contrast * np.multiply.outer(field, weights)
    return ComplexVolumeSet(spec.intensity * data, spacing)


def random_phase_model(dims, n_volumes, rng, max_cycles=3):
    """Random integer in-plane ramps plus offsets per (slice, volume)."""
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) \
        else rng
    x_dim, y_dim, z_dim = dims
    hx = min(max_cycles, max(x_dim // 2 - 1, 0))
    hy = min(max_cycles, max(y_dim // 2 - 1, 0))
    kx = rng.integers(-hx, hx + 1, size=(z_dim, n_volumes))
    ky = rng.integers(-hy, hy + 1, size=(z_dim, n_volumes))
    offset = rng.uniform(-np.pi, np.pi, size=(z_dim, n_volumes))
    return PhaseModel(kx, ky, offset, tuple(dims))


def add_white_noise(vols, sigma2, rng):
    """Add iid complex Gaussian noise of the given per-voxel variance."""
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) \
        else rng
    noise = np.sqrt(float(sigma2)) * _complex_normal(rng, vols.data.shape)
    return vols.with_data(vols.data + noise)


def psnr(reference, test, peak=None):
    """Peak signal-to-noise ratio in dB between complex volume sets.

    peak defaults to the reference magnitude maximum.  A zero-error pair
    returns the 300 dB cap with a RuntimeWarning rather than infinity.
    """
    ref = reference.data if isinstance(reference, ComplexVolumeSet) \
        else np.asarray(reference)
    tst = test.data if isinstance(test, ComplexVolumeSet) else np.asarray(test)
    if ref.shape != tst.shape:
        raise ValueError("shapes must match")
    if peak is None:
        peak = float(np.max(np.abs(ref)))
    mse = float(np.mean(np.abs(ref - tst) ** 2))
    if mse <= 0 or peak <= 0:
        warnings.warn("degenerate PSNR capped at 300 dB", RuntimeWarning)
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(peak ** 2 / mse), PSNR_CAP_DB))

"""Synthetic multi-coil encoding, linear reconstruction, and noise propagation.

The encoding chain per coil is: voxelwise sensitivity weighting, aliasing
(plain sum of the U overlap partners along the phase-encoding axis), and a
unitary DFT on the acquired grid.  With this convention the reconstruction
noise covariance for channel-whitened data is the inverse of the per-group
sensitivity Gram matrix, and partial-Fourier acquisitions add a spectral
filter sandwich along the PE axis.  Four sampling cases are supported:

- FULL: fully sampled, per-voxel variances (diagonal covariance);
- UNDER: uniform undersampling by U, per-overlap-group U x U covariance;
- HALF: partial Fourier, within-column covariance along the PE axis shaped
  by a zero-fill or ramp spectral filter;
- INTER: interleaved per-volume encodings, one HALF-type model per arm.

Reconstruction and propagation share one convention, so Monte Carlo noise
reconstructions match the analytic model exactly (up to sampling error).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (DecompositionError, FormatError,
                     IllConditionedEncodingError)
from .volumes import ComplexVolumeSet, _lin_to_coords


def _open_npz(path):
    """np.load with malformed archives mapped onto FormatError."""
    try:
        return np.load(path, allow_pickle=False)
    except (ValueError, OSError, EOFError) as exc:
        raise FormatError(f"malformed npz archive {path}: {exc}") from exc

CASES = ("FULL", "UNDER", "HALF", "INTER")
PF_KINDS = ("zero-fill", "ramp")

# Ridge scale for whitening near-singular patch covariances.
RIDGE_SCALE = 1e-8
# Relative eigenvalue floor below which an unfold group is called singular.
COND_FLOOR = 1e-12


# ----------------------------------------------------------------------
# covariance descriptors shared with the ESD module


@dataclass(frozen=True)
class DiagCovariance:
    """Diagonal patch covariance: independent rows with given variances."""

    variances: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.variances, dtype=np.float64)
        if v.ndim != 1 or np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("variances must be finite and non-negative")
        object.__setattr__(self, "variances", v)

    @property
    def size(self):
        return self.variances.shape[0]

    def dense(self):
        return np.diag(self.variances).astype(np.complex128)


@dataclass(frozen=True)
class DenseCovariance:
    """Full Hermitian patch covariance across the M member voxels."""

    matrix: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.complex128)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError("covariance must be square")
        if not np.allclose(mat, mat.conj().T, atol=1e-10 * max(1.0, np.abs(mat).max())):
            raise ValueError("covariance must be Hermitian")
        mat = 0.5 * (mat + mat.conj().T)
        object.__setattr__(self, "matrix", mat)

    @property
    def size(self):
        return self.matrix.shape[0]

    def dense(self):
        return self.matrix


@dataclass(frozen=True)
class BlockCovariance:
    """Per-encoding row covariances with disjoint volume index blocks."""

    blocks: tuple  # ((DiagCovariance | DenseCovariance, volume index array), ...)

    def __post_init__(self):
        blocks = []
        seen = set()
        size = None
        for cov, vols in self.blocks:
            vols = np.asarray(vols, dtype=np.int64)
            if size is None:
                size = cov.size
            elif cov.size != size:
                raise ValueError("all blocks must share the patch size")
            if seen.intersection(vols.tolist()):
                raise ValueError("volume blocks must be disjoint")
            seen.update(vols.tolist())
            blocks.append((cov, vols))
        object.__setattr__(self, "blocks", tuple(blocks))

    @property
    def size(self):
        return self.blocks[0][0].size

    @property
    def n_volumes(self):
        return sum(v.size for _, v in self.blocks)


# ----------------------------------------------------------------------
# encoding model


@dataclass(frozen=True)
class EncodingSpec:
    """One encoding arm: PE axis plus optional partial-Fourier filter."""

    pe_axis: int = 1
    pf_fraction: float = 1.0
    pf_kind: str = "zero-fill"
    pf_flip: bool = False

    def __post_init__(self):
        if self.pe_axis not in (0, 1, 2):
            raise ValueError("pe_axis must be 0, 1, or 2")
        if self.pf_kind not in PF_KINDS:
            raise ValueError(f"pf_kind must be one of {PF_KINDS}")
        if not 0.5 < self.pf_fraction <= 1.0:
            raise ValueError("pf_fraction must lie in (0.5, 1]")
        if self.pf_fraction == 1.0 and self.pf_kind != "zero-fill":
            raise ValueError("a full-fraction arm cannot carry a ramp filter")

    def profile(self, size):
        """Spectral weights over the full PE axis, in FFT bin order."""
        k = np.fft.fftfreq(size, d=1.0 / size)
        k0 = int(round((self.pf_fraction - 0.5) * size))
        if self.pf_fraction == 1.0:
            return np.ones(size)
        if k0 < 1:
            raise ValueError("pf_fraction too close to 0.5 for this grid")
        ks = -k if self.pf_flip else k
        if self.pf_kind == "zero-fill":
            return (ks >= -k0).astype(np.float64)
        return np.clip((ks + k0) / k0, 0.0, 2.0)


def channel_correlation(n_coils, rho):
    """Simple exponential coil correlation matrix rho^|i-j|."""
    if not -1.0 < rho < 1.0:
        raise ValueError("rho must lie in (-1, 1)")
    idx = np.arange(n_coils)
    return (rho ** np.abs(idx[:, None] - idx[None, :])).astype(np.complex128)


@dataclass(frozen=True)
class EncodingModel:
    """Sensitivities, channel covariance, and sampling scheme for one scan."""

    case: str
    sens: np.ndarray            # (C, X, Y, Z) complex
    channel_cov: np.ndarray     # (C, C) Hermitian positive definite
    undersampling: int = 1
    arms: tuple = (EncodingSpec(),)
    schedule: tuple | None = None   # 0-based arm index per volume (INTER only)

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"case must be one of {CASES}")
        sens = np.asarray(self.sens, dtype=np.complex128)
        if sens.ndim != 4:
            raise ValueError("sens must have shape (C, X, Y, Z)")
        cov = np.asarray(self.channel_cov, dtype=np.complex128)
        if cov.shape != (sens.shape[0], sens.shape[0]):
            raise ValueError("channel_cov must be (C, C)")
        if not np.allclose(cov, cov.conj().T, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("channel_cov must be Hermitian")
        eig = np.linalg.eigvalsh(0.5 * (cov + cov.conj().T))
        if eig.min() <= 1e-12 * max(eig.max(), 1.0):
            raise ValueError("channel_cov must be positive definite")
        u = int(self.undersampling)
        if u < 1:
            raise ValueError("undersampling must be >= 1")
        arms = tuple(self.arms)
        if not arms:
            raise ValueError("at least one encoding arm is required")
        if self.case in ("FULL", "UNDER", "HALF") and len(arms) != 1:
            raise ValueError("stationary cases take exactly one arm")
        if self.case == "FULL" and (u != 1 or arms[0].pf_fraction != 1.0):
            raise ValueError("FULL means U = 1 and no PF filter")
        if self.case == "UNDER" and u < 2:
            raise ValueError("UNDER requires U >= 2")
        if self.case == "HALF" and arms[0].pf_fraction == 1.0:
            raise ValueError("HALF requires a PF fraction below 1")
        if self.case == "INTER":
            if self.schedule is None:
                raise ValueError("INTER requires a schedule")
            sched = tuple(int(a) for a in self.schedule)
            if any(a < 0 or a >= len(arms) for a in sched):
                raise ValueError("schedule entries must index the arms")
            object.__setattr__(self, "schedule", sched)
        elif self.schedule is not None:
            raise ValueError("schedule only applies to INTER")
        for arm in arms:
            p = sens.shape[1 + arm.pe_axis]
            if p % u:
                raise ValueError("PE axis size must be divisible by U")
            arm.profile(p)   # validates fraction against the grid
        object.__setattr__(self, "sens", sens)
        object.__setattr__(self, "channel_cov", 0.5 * (cov + cov.conj().T))
        object.__setattr__(self, "undersampling", u)
        object.__setattr__(self, "arms", arms)

    @property
    def dims(self):
        return self.sens.shape[1:]

    @property
    def n_coils(self):
        return self.sens.shape[0]

    @property
    def n_arms(self):
        return len(self.arms)

    def acquired_dims(self, arm_idx=0):
        dims = list(self.dims)
        axis = self.arms[arm_idx].pe_axis
        dims[axis] //= self.undersampling
        return tuple(dims)


def make_encoding(case, sens, channel_cov=None, undersampling=1, pe_axis=1,
                  pf_fraction=1.0, pf_kind="zero-fill", schedule=None,
                  n_arms=None):
    """Convenience builder for the four sampling cases.

    For INTER, n_arms arms are generated by alternating the PE axis between
    pe_axis and the next spatial axis and flipping the PF side, which mirrors
    a multi-direction interleaved protocol; schedule holds 0-based arm ids.
    """
    sens = np.asarray(sens, dtype=np.complex128)
    if channel_cov is None:
        channel_cov = np.eye(sens.shape[0], dtype=np.complex128)
    if case == "INTER":
        if n_arms is None:
            n_arms = (max(schedule) + 1) if schedule is not None else 2
        alt_axis = (pe_axis + 1) % 3
        if sens.shape[1 + alt_axis] == 1:
            alt_axis = pe_axis
        built = []
        for i in range(int(n_arms)):
            axis = pe_axis if (i // 2) % 2 == 0 else alt_axis
            built.append(EncodingSpec(axis, pf_fraction, pf_kind,
                                      pf_flip=bool(i % 2)))
        arms = tuple(built)
    else:
        arms = (EncodingSpec(pe_axis, pf_fraction, pf_kind),)
    return EncodingModel(case, sens, channel_cov, undersampling, arms, schedule)


def synthetic_sensitivities(dims, n_coils, seed=0):
    """Smooth complex coil maps from loops placed around the FOV."""
    x_dim, y_dim, z_dim = dims
    rng = np.random.default_rng(seed)
    gx = np.linspace(-1.0, 1.0, x_dim) if x_dim > 1 else np.zeros(1)
    gy = np.linspace(-1.0, 1.0, y_dim) if y_dim > 1 else np.zeros(1)
    gz = np.linspace(-1.0, 1.0, z_dim) if z_dim > 1 else np.zeros(1)
    xx, yy, zz = np.meshgrid(gx, gy, gz, indexing="ij")
    sens = np.empty((n_coils, x_dim, y_dim, z_dim), dtype=np.complex128)
    for c in range(n_coils):
        ang = 2.0 * np.pi * c / n_coils + rng.uniform(-0.1, 0.1)
        cx, cy = 1.5 * np.cos(ang), 1.5 * np.sin(ang)
        cz = 0.4 * rng.uniform(-1.0, 1.0)
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2 + (zz - cz) ** 2
        mag = 1.0 / (0.35 + d2)
        phs = (0.5 * (np.cos(ang) * xx + np.sin(ang) * yy)
               + 0.3 * rng.uniform(-1, 1) * zz + rng.uniform(0, 2 * np.pi))
        sens[c] = mag * np.exp(1j * phs)
    scale = np.sqrt(n_coils / np.mean(np.sum(np.abs(sens) ** 2, axis=0)))
    return sens * scale


# ----------------------------------------------------------------------
# channel whitening


def channel_whitener(channel_cov):
    """Lower-triangular W with W^H W = channel_cov^{-1} (W = L^{-1})."""
    cov = np.asarray(channel_cov, dtype=np.complex128)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError("channel covariance is not positive definite") from exc
    c = cov.shape[0]
    return np.linalg.solve(chol, np.eye(c, dtype=np.complex128))


def whiten_channels(z, channel_cov):
    """Standardize multi-coil samples (coil axis first).

    Returns the whitened samples and the whitening matrix W so that
    sensitivities can be transformed consistently (S_bar = W S).
    """
    w = channel_whitener(channel_cov)
    z = np.asarray(z, dtype=np.complex128)
    zw = np.tensordot(w, z, axes=(1, 0))
    return zw, w


def whitened_sensitivities(enc):
    w = channel_whitener(enc.channel_cov)
    return np.tensordot(w, enc.sens, axes=(1, 0))


# ----------------------------------------------------------------------
# forward encoding and reconstruction


def _move_to_last(arr, axis, spatial_offset):
    """Move a spatial axis to the end; axis counts spatial dims only."""
    return np.moveaxis(arr, spatial_offset + axis, -1)


def _fold(coil_imgs, axis, u):
    """Sum the U overlap partners along the PE axis (axis in spatial terms)."""
    if u == 1:
        return coil_imgs
    arr = np.moveaxis(coil_imgs, 1 + axis, -1)
    p = arr.shape[-1]
    arr = arr.reshape(arr.shape[:-1] + (u, p // u)).sum(axis=-2)
    return np.moveaxis(arr, -1, 1 + axis)


def encode(enc, vols):
    """Noiseless whitened-model k-space for each volume.

    For stationary cases returns (C, *acq_dims, N); for INTER returns a list
    of per-volume (C, *acq_dims) arrays in volume order.  The output is in
    the channel-whitened frame: add unit-variance complex noise to model the
    acquisition.
    """
    sens = whitened_sensitivities(enc)
    data = vols.data if isinstance(vols, ComplexVolumeSet) else np.asarray(vols)
    if data.ndim == 3:
        data = data[..., None]
    if enc.case != "INTER":
        arm = enc.arms[0]
        coil = sens[..., None] * data[None]          # (C, X, Y, Z, N)
        batch = np.moveaxis(coil, -1, 1).reshape((-1,) + sens.shape[1:])
        folded = _fold(batch, arm.pe_axis, enc.undersampling)
        z = np.fft.fftn(folded, axes=(1, 2, 3), norm="ortho")
        c, n = sens.shape[0], data.shape[-1]
        return np.moveaxis(z.reshape((c, n) + z.shape[1:]), 1, -1)
    out = []
    for n in range(data.shape[-1]):
        arm = enc.arms[enc.schedule[n]]
        coil = sens * data[None, ..., n]
        folded = _fold(coil, arm.pe_axis, enc.undersampling)
        out.append(np.fft.fftn(folded, axes=(1, 2, 3), norm="ortho"))
    return out


def _unfold_gram(sens_w, axis, u):
    """Per-group Gram matrices of whitened sensitivities.

    Returns (grid_grams, sens_grouped) where grids are indexed by the
    acquired lattice with the PE axis last: grams (A, B, K, U, U) for
    spatial dims reordered (other0, other1, K).
    """
    arr = _move_to_last(sens_w, axis, 1)       # (C, a, b, P)
    c, d0, d1, p = arr.shape
    k = p // u
    grouped = arr.reshape(c, d0, d1, u, k)
    gram = np.einsum("cabuk,cabvk->abkuv", grouped.conj(), grouped)
    return gram, grouped


def _check_groups(gram, axis, u, dims):
    """Raise IllConditionedEncodingError naming the worst singular group."""
    eigs = np.linalg.eigvalsh(gram)
    bad = eigs[..., 0] <= COND_FLOOR * np.maximum(eigs[..., -1], 1e-300)
    if np.any(bad):
        a, b, k = [int(i[0]) for i in np.nonzero(bad)]
        others = [i for i in range(3) if i != axis]
        coords = [0, 0, 0]
        coords[others[0]], coords[others[1]] = a, b
        group = []
        kdim = dims[axis] // u
        for slot in range(u):
            g = coords.copy()
            g[axis] = k + slot * kdim
            group.append(tuple(g))
        raise IllConditionedEncodingError(
            f"unfolding group at {group} is numerically singular", group)


def _recon_stationary(z, enc, arm_idx=0):
    """(C, *acq, N) whitened k-space -> (X, Y, Z, N) volumes."""
    arm = enc.arms[arm_idx]
    u = enc.undersampling
    sens_w = whitened_sensitivities(enc)
    b = np.fft.ifftn(z, axes=(1, 2, 3), norm="ortho")
    b = _move_to_last(b, arm.pe_axis, 1)            # (C, a, b, N, K)
    gram, grouped = _unfold_gram(sens_w, arm.pe_axis, u)
    _check_groups(gram, arm.pe_axis, u, enc.dims)
    rhs = np.einsum("cabuk,cabnk->abkun", grouped.conj(), b)
    sol = np.linalg.solve(gram, rhs)                # (a, b, K, U, N)
    a_dim, b_dim, k_dim, _, n = sol.shape
    full = np.moveaxis(sol, 3, 2).reshape(a_dim, b_dim, u * k_dim, n)
    if arm.pf_fraction < 1.0:
        g = arm.profile(u * k_dim)
        spec = np.fft.fft(full, axis=2)
        full = np.fft.ifft(spec * g[None, None, :, None], axis=2)
    out = np.moveaxis(full, 2, arm.pe_axis)
    return out


def sense_reconstruct(z, enc, spacing=(1.0, 1.0, 1.0)):
    """Linear reconstruction of channel-whitened k-space samples.

    Parameters
    ----------
    z : ndarray (C, *acq_dims, N) for stationary cases; for INTER a list of
        per-volume (C, *acq_dims) arrays matching the schedule.
    enc : EncodingModel
    spacing : voxel size for the returned volume set.

    Returns
    -------
    ComplexVolumeSet
        Unfolded (and, for PF cases, spectrally filtered) volumes.
    """
    if enc.case != "INTER":
        z = np.asarray(z, dtype=np.complex128)
        if z.ndim == 4:
            z = z[..., None]
        if z.shape[:4] != (enc.n_coils,) + enc.acquired_dims(0):
            raise ValueError("k-space shape does not match the encoding")
        out = _recon_stationary(z, enc)
        return ComplexVolumeSet(out, spacing)
    if not isinstance(z, (list, tuple)) or len(z) != len(enc.schedule):
        raise ValueError("INTER reconstruction takes one k-space array per volume")
    n = len(z)
    out = np.empty(enc.dims + (n,), dtype=np.complex128)
    sched = np.asarray(enc.schedule)
    for arm_idx in range(enc.n_arms):
        vols_a = np.flatnonzero(sched == arm_idx)
        if vols_a.size == 0:
            continue
        stack = np.stack([np.asarray(z[v], dtype=np.complex128) for v in vols_a],
                         axis=-1)
        if stack.shape[:4] != (enc.n_coils,) + enc.acquired_dims(arm_idx):
            raise ValueError("k-space shape does not match the encoding arm")
        out[..., vols_a] = _recon_stationary(stack, enc, arm_idx)
    sched_1b = tuple(int(a) + 1 for a in enc.schedule)
    return ComplexVolumeSet(out, spacing, sched_1b)


def _complex_normal(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) \
        * np.sqrt(0.5)


def reconstruct_noise(enc, n_volumes, rng, spacing=(1.0, 1.0, 1.0)):
    """Reconstructions of pure unit channel noise (already whitened frame)."""
    if enc.case != "INTER":
        shape = (enc.n_coils,) + enc.acquired_dims(0) + (int(n_volumes),)
        return sense_reconstruct(_complex_normal(rng, shape), enc, spacing)
    if n_volumes != len(enc.schedule):
        raise ValueError("n_volumes must match the schedule length")
    z = [_complex_normal(rng, (enc.n_coils,) + enc.acquired_dims(a))
         for a in enc.schedule]
    return sense_reconstruct(z, enc, spacing)


# ----------------------------------------------------------------------
# noise propagation


def _filter_matrix(g):
    """Dense PE-axis convolution matrix F^H diag(g) F (unitary F)."""
    p = g.shape[0]
    f = np.fft.fft(np.eye(p), axis=0) / np.sqrt(p)
    return f.conj().T @ (g[:, None] * f)


class _ColumnCache:
    """Lazy per-column covariance matrices for PF cases."""

    def __init__(self, gmat, under_diag_cols, group_cov, u):
        # under_diag_cols: (n_cols, P) pre-filter variances per PE column
        # group_cov: (n_cols, K, U, U) or None when U = 1
        self.gmat = gmat
        self.under = under_diag_cols
        self.group = group_cov
        self.u = u
        self._cache = {}

    def column(self, col_idx):
        got = self._cache.get(col_idx)
        if got is not None:
            return got
        p = self.under.shape[1]
        if self.u == 1:
            pre = np.diag(self.under[col_idx]).astype(np.complex128)
        else:
            k = p // self.u
            pre = np.zeros((p, p), dtype=np.complex128)
            cov = self.group[col_idx]          # (K, U, U)
            for kk in range(k):
                idx = kk + k * np.arange(self.u)
                pre[np.ix_(idx, idx)] = cov[kk]
        post = self.gmat @ pre @ self.gmat.conj().T
        post = 0.5 * (post + post.conj().T)
        self._cache[col_idx] = post
        return post


@dataclass(frozen=True)
class NoiseModel:
    """Reconstruction noise statistics on the image grid.

    Per arm: variance_map is the post-filter per-voxel variance; for UNDER
    cases group_cov holds the per-overlap-group covariances on the acquired
    lattice (other0, other1, K, U, U); PF arms carry lazy per-column
    covariance caches.
    """

    case: str
    dims: tuple
    undersampling: int
    arms: tuple
    variance_maps: tuple          # per arm, (X, Y, Z) float64
    group_covs: tuple             # per arm, (a, b, K, U, U) complex or None
    schedule: tuple | None = None
    _columns: tuple = field(default=(), repr=False, compare=False)

    @property
    def n_arms(self):
        return len(self.arms)

    @property
    def variance_map(self):
        """Per-voxel variance; volume-averaged across arms for INTER."""
        if self.case != "INTER" or self.schedule is None:
            return self.variance_maps[0]
        counts = np.bincount(np.asarray(self.schedule), minlength=self.n_arms)
        w = counts / counts.sum()
        return sum(w[a] * self.variance_maps[a] for a in range(self.n_arms))

    def arm_of_volume(self, n):
        if self.case != "INTER":
            return 0
        return self.schedule[n]


def _column_layout(dims, axis):
    """Map voxel coords to (column id, position along PE axis)."""
    others = [i for i in range(3) if i != axis]
    n_cols = dims[others[0]] * dims[others[1]]
    return others, n_cols


def _propagate_arm(enc, arm):
    """UNDER-level statistics plus optional PF filtering for one arm."""
    u = enc.undersampling
    axis = arm.pe_axis
    dims = enc.dims
    sens_w = whitened_sensitivities(enc)
    gram, _ = _unfold_gram(sens_w, axis, u)
    _check_groups(gram, axis, u, dims)
    cov = np.linalg.inv(gram)                       # (a, b, K, U, U)
    cov = 0.5 * (cov + np.conj(np.swapaxes(cov, -1, -2)))
    a_dim, b_dim, k_dim = cov.shape[:3]
    p = u * k_dim

    # pre-filter per-voxel variances, PE axis last
    diag = np.einsum("abkuu->abku", cov).real       # (a, b, K, U)
    diag_full = np.moveaxis(diag, 3, 2).reshape(a_dim, b_dim, p)

    if arm.pf_fraction >= 1.0:
        var_full = diag_full
        gmat = None
        col_under = None
        col_group = None
    else:
        g = arm.profile(p)
        gmat = _filter_matrix(g)
        col_under = diag_full.reshape(a_dim * b_dim, p)
        col_group = None
        if u > 1:
            col_group = np.moveaxis(cov, 2, 2).reshape(a_dim * b_dim, k_dim, u, u)
        # post-filter diagonal: diag(G Sigma G^H) per column
        cache = _ColumnCache(gmat, col_under, col_group, u)
        var_cols = np.empty((a_dim * b_dim, p))
        absg2 = np.abs(gmat) ** 2
        if u == 1:
            var_cols = col_under @ absg2.T
        else:
            for ci in range(a_dim * b_dim):
                var_cols[ci] = np.diag(cache.column(ci)).real
        var_full = var_cols.reshape(a_dim, b_dim, p)

    # reorder (a, b, P) back to (X, Y, Z)
    var_map = np.moveaxis(var_full, 2, axis)
    group_cov = cov if u > 1 else None
    return var_map, group_cov, gmat, col_under, col_group


def propagate_noise(enc):
    """Analytic reconstruction-noise model for an encoding.

    Returns a NoiseModel whose covariances describe reconstructions of unit
    channel-whitened noise, matching :func:`reconstruct_noise` exactly.
    """
    var_maps, group_covs, columns = [], [], []
    for arm in enc.arms:
        var_map, group_cov, gmat, col_under, col_group = _propagate_arm(enc, arm)
        var_maps.append(var_map)
        group_covs.append(group_cov)
        if gmat is not None:
            columns.append(_ColumnCache(gmat, col_under, col_group,
                                        enc.undersampling))
        else:
            columns.append(None)
    return NoiseModel(enc.case, enc.dims, enc.undersampling, enc.arms,
                      tuple(var_maps), tuple(group_covs), enc.schedule,
                      _columns=tuple(columns))


def scale_noise_model(nm, variance_scale):
    """New NoiseModel with every covariance multiplied by variance_scale.

    A scale of 0 yields an exactly noiseless model, under which the
    recovery rules reduce to identities.
    """
    s = float(variance_scale)
    if s < 0:
        raise ValueError("variance_scale must be non-negative")
    cols = []
    for cache in nm._columns:
        if cache is None:
            cols.append(None)
        else:
            cols.append(_ColumnCache(
                cache.gmat, cache.under * s,
                None if cache.group is None else cache.group * s, cache.u))
    return NoiseModel(nm.case, nm.dims, nm.undersampling, nm.arms,
                      tuple(v * s for v in nm.variance_maps),
                      tuple(None if g is None else g * s
                            for g in nm.group_covs),
                      nm.schedule, _columns=tuple(cols))


def _arm_member_cov(nm, arm_idx, members):
    """Dense or diagonal covariance of one arm restricted to member voxels."""
    arm = nm.arms[arm_idx]
    axis = arm.pe_axis
    dims = nm.dims
    xs, ys, zs = _lin_to_coords(np.asarray(members, dtype=np.int64), dims)
    coords = np.stack([xs, ys, zs], axis=0)
    var = nm.variance_maps[arm_idx][xs, ys, zs]
    others, _ = _column_layout(dims, axis)
    col_id = coords[others[0]] * dims[others[1]] + coords[others[1]]
    pe_pos = coords[axis]

    if arm.pf_fraction < 1.0:
        cache = nm._columns[arm_idx]
        m = members.shape[0]
        mat = np.zeros((m, m), dtype=np.complex128)
        for ci in np.unique(col_id):
            sel = np.flatnonzero(col_id == ci)
            sub = cache.column(int(ci))
            mat[np.ix_(sel, sel)] = sub[np.ix_(pe_pos[sel], pe_pos[sel])]
        return DenseCovariance(mat)

    if nm.undersampling == 1:
        return DiagCovariance(var)

    # UNDER: voxels in the same column whose PE positions share k mod K
    k_dim = dims[axis] // nm.undersampling
    group_key = col_id * k_dim + (pe_pos % k_dim)
    uniq, counts = np.unique(group_key, return_counts=True)
    if counts.max() == 1:
        return DiagCovariance(var)
    m = members.shape[0]
    mat = np.diag(var).astype(np.complex128)
    gcov = nm.group_covs[arm_idx]
    a_coord = coords[others[0]]
    b_coord = coords[others[1]]
    for key in uniq[counts > 1]:
        sel = np.flatnonzero(group_key == key)
        slots = pe_pos[sel] // k_dim
        sub = gcov[a_coord[sel[0]], b_coord[sel[0]], pe_pos[sel[0]] % k_dim]
        mat[np.ix_(sel, sel)] = sub[np.ix_(slots, slots)]
    return DenseCovariance(mat)


def local_covariance(nm, table, patch_id, n_volumes=None):
    """Marginal patch covariance descriptor for one patch.

    For stationary cases returns a DiagCovariance or DenseCovariance across
    the M member voxels.  For INTER returns a BlockCovariance pairing each
    arm's spatial covariance with the volume indices it applies to
    (n_volumes must match the schedule length).
    """
    if tuple(nm.dims) != tuple(table.dims):
        raise ValueError("noise model grid does not match the patch table")
    members = table.members[patch_id]
    if nm.case != "INTER":
        return _arm_member_cov(nm, 0, members)
    if nm.schedule is None:
        raise ValueError("INTER noise model lacks a schedule")
    if n_volumes is not None and n_volumes != len(nm.schedule):
        raise ValueError("n_volumes does not match the schedule")
    sched = np.asarray(nm.schedule)
    blocks = []
    for arm_idx in range(nm.n_arms):
        vols_a = np.flatnonzero(sched == arm_idx)
        if vols_a.size == 0:
            continue
        blocks.append((_arm_member_cov(nm, arm_idx, members), vols_a))
    if len(blocks) == 1:
        # one populated encoding: the columns are homogeneous, so the
        # descriptor degenerates to the stationary form
        return blocks[0][0]
    return BlockCovariance(tuple(blocks))


# ----------------------------------------------------------------------
# encoding persistence


def save_encoding(path, enc):
    """Write an EncodingModel to an .npz archive."""
    import json

    meta = {
        "case": enc.case,
        "undersampling": enc.undersampling,
        "schedule": list(enc.schedule) if enc.schedule is not None else None,
        "arms": [{"pe_axis": a.pe_axis, "pf_fraction": a.pf_fraction,
                  "pf_kind": a.pf_kind, "pf_flip": a.pf_flip}
                 for a in enc.arms],
    }
    np.savez(path,
             meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             sens=enc.sens, channel_cov=enc.channel_cov)


def load_encoding(path):
    import json

    with _open_npz(path) as z:
        try:
            meta = json.loads(bytes(z["meta"]).decode())
            sens = z["sens"]
            channel_cov = z["channel_cov"]
        except (KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed encoding archive: {exc}") from exc
    arms = tuple(EncodingSpec(**a) for a in meta["arms"])
    sched = meta["schedule"]
    return EncodingModel(meta["case"], sens, channel_cov,
                         int(meta["undersampling"]), arms,
                         tuple(sched) if sched is not None else None)


# ----------------------------------------------------------------------
# noise model persistence


def save_noise_model(path, nm):
    """Write a NoiseModel to an .npz archive.

    Stores the per-arm variance maps, overlap-group covariances, and the
    PF column statistics needed to rebuild the lazy per-column caches.
    """
    import json

    meta = {
        "case": nm.case,
        "dims": list(nm.dims),
        "undersampling": nm.undersampling,
        "schedule": list(nm.schedule) if nm.schedule is not None else None,
        "arms": [{"pe_axis": a.pe_axis, "pf_fraction": a.pf_fraction,
                  "pf_kind": a.pf_kind, "pf_flip": a.pf_flip}
                 for a in nm.arms],
    }
    payload = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for i in range(nm.n_arms):
        payload[f"arm{i}_variance"] = nm.variance_maps[i]
        if nm.group_covs[i] is not None:
            payload[f"arm{i}_group"] = nm.group_covs[i]
        cache = nm._columns[i]
        if cache is not None:
            payload[f"arm{i}_gmat"] = cache.gmat
            payload[f"arm{i}_col_under"] = cache.under
            if cache.group is not None:
                payload[f"arm{i}_col_group"] = cache.group
    np.savez(path, **payload)


def load_noise_model(path):
    import json

    with _open_npz(path) as z:
        try:
            meta = json.loads(bytes(z["meta"]).decode())
        except (KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed noise model archive: {exc}") from exc
        arms = tuple(EncodingSpec(**a) for a in meta["arms"])
        var_maps, group_covs, columns = [], [], []
        for i in range(len(arms)):
            var_maps.append(z[f"arm{i}_variance"])
            group_covs.append(z[f"arm{i}_group"] if f"arm{i}_group" in z
                              else None)
            if f"arm{i}_gmat" in z:
                col_group = (z[f"arm{i}_col_group"]
                             if f"arm{i}_col_group" in z else None)
                columns.append(_ColumnCache(z[f"arm{i}_gmat"],
                                            z[f"arm{i}_col_under"],
                                            col_group,
                                            int(meta["undersampling"])))
            else:
                columns.append(None)
    sched = meta["schedule"]
    return NoiseModel(meta["case"], tuple(meta["dims"]),
                      int(meta["undersampling"]), arms,
                      tuple(var_maps), tuple(group_covs),
                      tuple(sched) if sched is not None else None,
                      _columns=tuple(columns))


# ----------------------------------------------------------------------
# patch whitening


def patch_whitener(cov):
    """(W, ridged) with W Sigma W^H = I; ridged marks an added epsilon."""
    if isinstance(cov, DiagCovariance):
        v = cov.variances
        ridged = bool(np.any(v <= 0))
        floor = RIDGE_SCALE * max(v.sum() / max(v.size, 1), 1e-300)
        w = 1.0 / np.sqrt(np.maximum(v, floor))
        return np.diag(w).astype(np.complex128), ridged
    mat = cov.dense() if hasattr(cov, "dense") else np.asarray(cov)
    m = mat.shape[0]
    try:
        chol = np.linalg.cholesky(mat)
        ridged = False
    except np.linalg.LinAlgError:
        ridge = RIDGE_SCALE * np.trace(mat).real / m
        chol = np.linalg.cholesky(mat + ridge * np.eye(m))
        ridged = True
    return np.linalg.solve(chol, np.eye(m, dtype=np.complex128)), ridged


def whiten_patch(entries, cov):
    """Standardize a Casorati matrix against its patch noise covariance.

    Returns (whitened entries, W, ridged).  Estimates computed in the
    whitened frame map back through W^{-1}, and Frobenius losses are
    preserved in the whitened metric.
    """
    entries = np.asarray(entries, dtype=np.complex128)
    w, ridged = patch_whitener(cov)
    return w @ entries, w, ridged

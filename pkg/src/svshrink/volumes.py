"""Complex volume sets, spherical patch geometry, and weighted patch assembly.

A volume set holds N complex volumes on a shared (X, Y, Z) grid with
anisotropic voxel spacing in mm.  Patches are index sets of the M voxels
nearest to a center in physical distance; near the FOV boundary the ball
deforms so every patch keeps exactly M members.  Linear voxel indices run
x-fastest: q = x + X*(y + Y*z).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CoverageError

WEIGHT_KINDS = ("uniform", "inverse-variance", "gaussian")
WEIGHT_EPS = 1e-12


def _as_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0.0 for s in spacing):
        raise ValueError("spacing must be three positive finite values in mm")
    return spacing


def _as_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError("dims must be three positive integers")
    return dims


@dataclass(frozen=True)
class ComplexVolumeSet:
    """N complex volumes indexed (x, y, z, n), read-only after construction.

    Parameters
    ----------
    data : ndarray, shape (X, Y, Z, N), complex
        Volume samples. Copied to complex128 and frozen.
    spacing : tuple of three floats
        Voxel size along x, y, z in mm.
    schedule : tuple of int, optional
        Per-volume encoding labels (1-based), only meaningful for
        interleaved acquisitions.
    """

    data: np.ndarray
    spacing: tuple
    schedule: tuple | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.complex128, copy=True, order="C")
        if data.ndim != 4:
            raise ValueError("data must have shape (X, Y, Z, N)")
        if data.size == 0:
            raise ValueError("data must be non-empty")
        if not np.all(np.isfinite(data.view(np.float64))):
            raise ValueError("data contains non-finite samples")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))
        if self.schedule is not None:
            sched = tuple(int(a) for a in self.schedule)
            if len(sched) != data.shape[3]:
                raise ValueError("schedule length must equal the number of volumes")
            if any(a < 1 for a in sched):
                raise ValueError("schedule labels are 1-based positive integers")
            object.__setattr__(self, "schedule", sched)

    @property
    def dims(self):
        return self.data.shape[:3]

    @property
    def n_volumes(self):
        return self.data.shape[3]

    @property
    def n_voxels(self):
        x, y, z = self.dims
        return x * y * z

    def with_data(self, data):
        """New set with the same grid metadata and different samples."""
        return ComplexVolumeSet(data, self.spacing, self.schedule)


@dataclass(frozen=True)
class WeightScheme:
    """Patch assembly weighting.

    kind is one of "uniform", "inverse-variance", "gaussian".  gaussian_sigma
    is the kernel width in mm; None selects half the patch radius per patch.
    """

    kind: str = "uniform"
    gaussian_sigma: float | None = None

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise ValueError(f"unknown weight kind {self.kind!r}")
        if self.gaussian_sigma is not None:
            if self.kind != "gaussian":
                raise ValueError("gaussian_sigma only applies to gaussian weights")
            if not self.gaussian_sigma > 0:
                raise ValueError("gaussian_sigma must be positive")


@dataclass(frozen=True)
class PatchTable:
    """Deterministic patch geometry for one grid.

    centers and members hold linear voxel indices (x-fastest); members has
    one row of M indices per patch, nearest-first with equidistant ties
    broken by ascending linear index.
    """

    dims: tuple
    spacing: tuple
    centers: np.ndarray
    members: np.ndarray
    stride: int
    n_volumes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", _as_dims(self.dims))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))
        centers = np.asarray(self.centers, dtype=np.int64)
        members = np.asarray(self.members, dtype=np.int64)
        if members.ndim != 2 or centers.ndim != 1:
            raise ValueError("centers must be 1-D and members 2-D")
        if members.shape[0] != centers.shape[0]:
            raise ValueError("one member row per center required")
        centers.setflags(write=False)
        members.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "members", members)

    @property
    def n_patches(self):
        return self.centers.shape[0]

    @property
    def patch_size(self):
        return self.members.shape[1]

    @property
    def aspect(self):
        """gamma = M / N; requires n_volumes."""
        if self.n_volumes is None:
            raise ValueError("aspect undefined without n_volumes")
        return self.patch_size / self.n_volumes


@dataclass(frozen=True)
class CasoratiMatrix:
    """One patch unrolled to an M x N matrix (voxels x volumes)."""

    entries: np.ndarray
    center: int
    patch_id: int

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.complex128)
        if entries.ndim != 2:
            raise ValueError("entries must be a 2-D matrix")
        object.__setattr__(self, "entries", entries)


def _lin_to_coords(lin, dims):
    x_dim, y_dim = dims[0], dims[1]
    lin = np.asarray(lin, dtype=np.int64)
    return lin % x_dim, (lin // x_dim) % y_dim, lin // (x_dim * y_dim)


def _coords_to_lin(xs, ys, zs, dims):
    x_dim, y_dim = dims[0], dims[1]
    return xs + x_dim * (ys + y_dim * zs)


def _nearest_members(dims, spacing, center_lin, patch_size):
    """M nearest in-FOV voxels to one center, ties by ascending linear index."""
    x_dim, y_dim, z_dim = dims
    sx, sy, sz = spacing
    cx, cy, cz = _lin_to_coords(np.int64(center_lin), dims)

    # Grow a clipped box until at least M in-FOV voxels fall inside radius r;
    # any voxel outside r is then farther than all selected ones.
    r = float(max(spacing))
    max_r = np.sqrt(
        (x_dim * sx) ** 2 + (y_dim * sy) ** 2 + (z_dim * sz) ** 2
    ) + max(spacing)
    while True:
        hx, hy, hz = (int(np.ceil(r / s)) for s in spacing)
        x0, x1 = max(0, cx - hx), min(x_dim - 1, cx + hx)
        y0, y1 = max(0, cy - hy), min(y_dim - 1, cy + hy)
        z0, z1 = max(0, cz - hz), min(z_dim - 1, cz + hz)
        xs = np.arange(x0, x1 + 1, dtype=np.int64)
        ys = np.arange(y0, y1 + 1, dtype=np.int64)
        zs = np.arange(z0, z1 + 1, dtype=np.int64)
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        d2 = (
            ((gx - cx) * sx) ** 2
            + ((gy - cy) * sy) ** 2
            + ((gz - cz) * sz) ** 2
        ).ravel()
        lin = _coords_to_lin(gx, gy, gz, dims).ravel()
        inside = d2 <= r * r * (1.0 + 1e-12)
        if inside.sum() >= patch_size or r > max_r:
            d2, lin = d2[inside], lin[inside]
            break
        r *= 1.5
    order = np.lexsort((lin, d2))
    return lin[order[:patch_size]]


def build_patch_table(dims, spacing, patch_size, stride, n_volumes=None,
                      repair=True):
    """Stride-T lattice of spherical patches with full-coverage repair.

    Parameters
    ----------
    dims : (X, Y, Z)
    spacing : voxel size in mm
    patch_size : int
        Number of voxels M per patch; 1 <= M <= X*Y*Z.
    stride : int
        Lattice step T >= 1 along every axis.
    n_volumes : int, optional
        Stored so the table can report its aspect ratio gamma = M/N.
    repair : bool
        Append extra centers at uncovered voxels so every voxel belongs to
        at least one patch.  Risk scans that never assemble volumes can
        turn this off to keep sparse lattices sparse.

    Returns
    -------
    PatchTable
        Centers in ascending linear order, extra centers appended at any
        voxel the lattice patches failed to cover (when repair is on).
    """
    dims = _as_dims(dims)
    spacing = _as_spacing(spacing)
    n_voxels = dims[0] * dims[1] * dims[2]
    patch_size = int(patch_size)
    stride = int(stride)
    if not 1 <= patch_size <= n_voxels:
        raise ValueError("patch_size must be in [1, n_voxels]")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if n_volumes is not None and int(n_volumes) < 1:
        raise ValueError("n_volumes must be positive")

    gx, gy, gz = np.meshgrid(
        np.arange(0, dims[0], stride, dtype=np.int64),
        np.arange(0, dims[1], stride, dtype=np.int64),
        np.arange(0, dims[2], stride, dtype=np.int64),
        indexing="ij",
    )
    centers = np.sort(_coords_to_lin(gx, gy, gz, dims).ravel())
    members = np.empty((centers.size, patch_size), dtype=np.int64)
    for i, c in enumerate(centers):
        members[i] = _nearest_members(dims, spacing, c, patch_size)

    covered = np.zeros(n_voxels, dtype=bool)
    covered[members.ravel()] = True
    uncovered = np.flatnonzero(~covered)
    if repair and uncovered.size:
        extra = np.empty((uncovered.size, patch_size), dtype=np.int64)
        for i, c in enumerate(uncovered):
            extra[i] = _nearest_members(dims, spacing, c, patch_size)
        centers = np.concatenate([centers, uncovered])
        members = np.vstack([members, extra])

    return PatchTable(dims, spacing, centers, members,
                      stride, None if n_volumes is None else int(n_volumes))


def flatten_volumes(vols):
    """(X,Y,Z,N) data as a (Q, N) view ordered by x-fastest linear index."""
    x_dim, y_dim, z_dim = vols.dims
    return np.ascontiguousarray(
        vols.data.transpose(2, 1, 0, 3)
    ).reshape(x_dim * y_dim * z_dim, vols.n_volumes)


def unflatten_volumes(flat, dims):
    """Inverse of :func:`flatten_volumes`."""
    x_dim, y_dim, z_dim = dims
    n = flat.shape[1]
    return flat.reshape(z_dim, y_dim, x_dim, n).transpose(2, 1, 0, 3)


def extract_casorati(vols, table, patch_id):
    """Casorati matrix of one patch: rows are member voxels, columns volumes."""
    if not 0 <= patch_id < table.n_patches:
        raise ValueError("patch_id out of range")
    if table.dims != vols.dims:
        raise ValueError("patch table grid does not match the volume set")
    mem = table.members[patch_id]
    xs, ys, zs = _lin_to_coords(mem, table.dims)
    return CasoratiMatrix(vols.data[xs, ys, zs, :], int(table.centers[patch_id]),
                          int(patch_id))


def patch_radii(table):
    """Max member distance (mm) per patch; 0 for single-voxel patches."""
    sx, sy, sz = table.spacing
    cx, cy, cz = _lin_to_coords(table.centers, table.dims)
    mx, my, mz = _lin_to_coords(table.members, table.dims)
    d2 = (
        ((mx - cx[:, None]) * sx) ** 2
        + ((my - cy[:, None]) * sy) ** 2
        + ((mz - cz[:, None]) * sz) ** 2
    )
    return np.sqrt(d2.max(axis=1))


def _member_distances(table):
    sx, sy, sz = table.spacing
    cx, cy, cz = _lin_to_coords(table.centers, table.dims)
    mx, my, mz = _lin_to_coords(table.members, table.dims)
    return np.sqrt(
        ((mx - cx[:, None]) * sx) ** 2
        + ((my - cy[:, None]) * sy) ** 2
        + ((mz - cz[:, None]) * sz) ** 2
    )


def assemble_patches(estimates, table, scheme, per_patch_variance=None,
                     spacing=None, schedule=None):
    """Weighted overlap-average of patch estimates back onto the grid.

    Parameters
    ----------
    estimates : sequence of CasoratiMatrix
        One estimate per table patch (any order; reduced in ascending
        patch_id order for determinism).
    table : PatchTable
    scheme : WeightScheme
    per_patch_variance : array, optional
        Required for inverse-variance weights; entry p is the estimated
        variance (AMSE) of patch p. Weights are 1/max(v, 1e-12).

    Returns
    -------
    ComplexVolumeSet
        Per-voxel weights are renormalized to sum to one exactly, so
        constant inputs are reproduced bit-for-bit.
    """
    if len(estimates) != table.n_patches:
        raise ValueError("need exactly one estimate per patch")
    n = estimates[0].entries.shape[1]
    m = table.patch_size
    n_voxels = table.dims[0] * table.dims[1] * table.dims[2]

    by_id = sorted(estimates, key=lambda e: e.patch_id)
    ids = [e.patch_id for e in by_id]
    if ids != list(range(table.n_patches)):
        raise ValueError("estimates must carry patch ids 0..n_patches-1")

    if scheme.kind == "inverse-variance":
        if per_patch_variance is None:
            raise ValueError("inverse-variance weights need per_patch_variance")
        var = np.asarray(per_patch_variance, dtype=np.float64)
        if var.shape != (table.n_patches,):
            raise ValueError("per_patch_variance must have one entry per patch")
        if np.any(~np.isfinite(var) | (var < 0)):
            raise ValueError("per_patch_variance must be finite and >= 0")
        patch_w = 1.0 / np.maximum(var, WEIGHT_EPS)
        weights = np.repeat(patch_w[:, None], m, axis=1)
    elif scheme.kind == "gaussian":
        dist = _member_distances(table)
        if scheme.gaussian_sigma is not None:
            sig = np.full(table.n_patches, float(scheme.gaussian_sigma))
        else:
            sig = np.maximum(patch_radii(table) / 2.0, WEIGHT_EPS)
        weights = np.exp(-(dist ** 2) / (2.0 * sig[:, None] ** 2))
    else:
        weights = np.ones((table.n_patches, m))

    num = np.zeros((n_voxels, n), dtype=np.complex128)
    den = np.zeros(n_voxels, dtype=np.float64)
    for est in by_id:
        if est.entries.shape != (m, n):
            raise ValueError("estimate shape does not match the table")
        w = weights[est.patch_id]
        mem = table.members[est.patch_id]
        num[mem] += w[:, None] * est.entries
        den[mem] += w

    if np.any(den <= 0):
        bad = int(np.flatnonzero(den <= 0)[0])
        raise CoverageError(f"voxel {bad} received zero assembly weight")
    out = num / den[:, None]
    return ComplexVolumeSet(unflatten_volumes(out, table.dims),
                            spacing if spacing is not None else table.spacing,
                            schedule)

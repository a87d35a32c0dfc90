"""Noise spectra, their integral transforms, and the Marchenko-Pastur law.

A patch's noise enters the singular value spectrum of its Casorati matrix
through the empirical spectral distribution (ESD) of pure-noise matrices
with the same row covariance and aspect.  The ESD is estimated once per
distinct covariance descriptor by simulating a B-fold enlarged noise matrix
(B stacked M x N blocks sharing the patch covariance) and keeping the
singular values of W / sqrt(B N) as atoms.  All spectra in this package
use the same 1/sqrt(columns) scaling.

The Stieltjes-type transforms of the atom measure give the optimal
Frobenius shrinker and its risk for any observed singular value above the
ESD upper edge; a noiseless model (all atoms zero) reduces the shrinker to
the identity.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

from .errors import DomainError, FormatError, ResourceLimitError
from .recon import (BlockCovariance, DenseCovariance, DiagCovariance,
                    _open_npz)

DEFAULT_B_REPS = 10
# Singular values must clear the edge by this relative margin to count as
# signal; ties at the edge shrink to zero.
EDGE_GUARD = 1e-6
# Cap on simulated noise matrix entries (B*M times B*N).
MAX_ESD_ENTRIES = 2 ** 24


# ----------------------------------------------------------------------
# descriptor hashing for model reuse


def _quantize3(arr):
    """Round to 3 significant digits, elementwise."""
    a = np.asarray(arr, dtype=np.float64).copy()
    nz = a != 0
    if np.any(nz):
        mag = np.floor(np.log10(np.abs(a[nz])))
        scale = 10.0 ** (mag - 2)
        a[nz] = np.round(a[nz] / scale) * scale
    return a


def _digest(*arrays):
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def descriptor_key(cov, n_cols):
    """Stable cache key for (patch covariance, column count).

    Entries are quantized to 3 significant digits so patches with nearly
    identical noise statistics share one simulated ESD.
    """
    if isinstance(cov, DiagCovariance):
        return ("diag", cov.size, int(n_cols), _digest(_quantize3(cov.variances)))
    if isinstance(cov, DenseCovariance):
        mat = cov.matrix
        return ("dense", cov.size, int(n_cols),
                _digest(_quantize3(mat.real), _quantize3(mat.imag)))
    if isinstance(cov, BlockCovariance):
        parts = []
        for sub, vols in cov.blocks:
            parts.append((descriptor_key(sub, vols.size)[-1],
                          _digest(np.asarray(vols, dtype=np.int64))))
        return ("block", cov.size, int(n_cols), tuple(parts))
    raise TypeError(f"unsupported covariance descriptor {type(cov).__name__}")


# ----------------------------------------------------------------------
# ESD simulation


def _chol_factor(mat):
    """Cholesky factor with a tiny trace-scaled ridge fallback."""
    mat = np.asarray(mat, dtype=np.complex128)
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        m = mat.shape[0]
        ridge = 1e-8 * max(np.trace(mat).real / m, 1e-300)
        return np.linalg.cholesky(mat + ridge * np.eye(m))


@dataclass(frozen=True)
class EsdModel:
    """Atoms of a simulated pure-noise singular value distribution.

    Attributes
    ----------
    atoms : ndarray
        Noise singular values (descending), scaled by 1/sqrt(B N).
    aspect : float
        Row/column ratio M/N of the patch matrices the model describes.
    m, n, b_reps : int
        Patch rows, patch columns, and enlargement factor.
    """

    atoms: np.ndarray
    aspect: float
    m: int
    n: int
    b_reps: int

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim != 1 or atoms.size == 0:
            raise ValueError("atoms must be a non-empty 1-D array")
        if np.any(atoms < 0) or not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite and non-negative")
        atoms = np.sort(atoms)[::-1].copy()
        atoms.flags.writeable = False
        object.__setattr__(self, "atoms", atoms)
        if not 0 < self.aspect <= 1:
            raise ValueError("aspect must lie in (0, 1]")

    @property
    def edge(self):
        """Upper edge of the noise spectrum."""
        return float(self.atoms[0])

    # -- transforms of the symmetrized atom measure ---------------------

    def _split(self, y):
        y = np.asarray(y, dtype=np.float64)
        scalar = y.ndim == 0
        y2 = np.atleast_1d(y)[:, None] ** 2
        a2 = self.atoms[None, :] ** 2
        return y, scalar, y2, a2

    def transforms(self, y):
        """phi, phi', psi, psi' of the atom measure at points y.

        Valid only above the edge; no masking is applied here.
        """
        y, scalar, y2, a2 = self._split(y)
        yv = np.atleast_1d(y)[:, None]
        denom = y2 - a2
        phi = np.mean(yv / denom, axis=1)
        phip = -np.mean((y2 + a2) / denom ** 2, axis=1)
        g = self.aspect
        yy = np.atleast_1d(y)
        psi = g * phi + (1.0 - g) / yy
        psip = g * phip - (1.0 - g) / yy ** 2
        if scalar:
            return phi[0], phip[0], psi[0], psip[0]
        return phi, phip, psi, psip

    def d_transform(self, y):
        """(D, D') at points y above the edge."""
        phi, phip, psi, psip = self.transforms(y)
        return phi * psi, phip * psi + phi * psip

    def detected(self, y):
        """Observed values that clear the edge with a relative guard."""
        return np.asarray(y, dtype=np.float64) > self.edge * (1.0 + EDGE_GUARD)

    def shrink(self, y):
        """Optimal Frobenius shrinker applied to observed singular values.

        Values at or below the spectrum edge map to zero.  Input and output
        are in 1/sqrt(N)-scaled units.
        """
        y = np.asarray(y, dtype=np.float64)
        scalar = y.ndim == 0
        yv = np.atleast_1d(y).astype(np.float64)
        out = np.zeros_like(yv)
        keep = self.detected(yv)
        if np.any(keep):
            d, dp = self.d_transform(yv[keep])
            out[keep] = -2.0 * d / dp
        return float(out[0]) if scalar else out

    def signal_energy(self, y):
        """Estimated squared signal singular values 1/D(y); NaN below edge."""
        y = np.asarray(y, dtype=np.float64)
        scalar = y.ndim == 0
        yv = np.atleast_1d(y).astype(np.float64)
        out = np.full_like(yv, np.nan)
        keep = self.detected(yv)
        if np.any(keep):
            d, _ = self.d_transform(yv[keep])
            out[keep] = 1.0 / d
        return float(out[0]) if scalar else out

    def amse_terms(self, y, rule="shrink"):
        """Per-component asymptotic Frobenius risk at observed values y.

        For the shrink rule the estimate eta = -2 D/D' gives risk
        1/D - eta^2; hard truncation (keeping y itself) gives
        1/D + y^2 - 2 y eta, which exceeds the shrink risk by (y - eta)^2.
        Components at or below the edge return NaN.
        """
        if rule not in ("shrink", "truncate"):
            raise ValueError("rule must be 'shrink' or 'truncate'")
        y = np.asarray(y, dtype=np.float64)
        scalar = y.ndim == 0
        yv = np.atleast_1d(y).astype(np.float64)
        out = np.full_like(yv, np.nan)
        keep = self.detected(yv)
        if np.any(keep):
            d, dp = self.d_transform(yv[keep])
            eta = -2.0 * d / dp
            if rule == "shrink":
                out[keep] = 1.0 / d - eta ** 2
            else:
                out[keep] = 1.0 / d + yv[keep] ** 2 - 2.0 * yv[keep] * eta
        return float(out[0]) if scalar else out


def noiseless_esd(m, n, b_reps=1):
    """Degenerate model with all atoms at zero (identity shrinker)."""
    return EsdModel(np.zeros(max(int(m), 1)), m / n, int(m), int(n), int(b_reps))


def simulate_esd(cov, n_cols, b_reps=DEFAULT_B_REPS, rng=None,
                 max_entries=MAX_ESD_ENTRIES):
    """Monte Carlo ESD for a patch covariance descriptor.

    Draws a (B M) x (B N) complex Gaussian matrix whose rows carry B
    independent copies of the patch covariance, with per-column-group
    covariances for block descriptors, and returns the singular values of
    W / sqrt(B N) as an EsdModel.

    Parameters
    ----------
    cov : DiagCovariance | DenseCovariance | BlockCovariance
    n_cols : int
        Number of data columns N the model will be compared against.
    b_reps : int
        Enlargement factor B; more blocks give a smoother spectrum.
    rng : numpy.random.Generator or int seed.
    max_entries : int
        Cap on B M x B N; exceeding it raises ResourceLimitError.
    """
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    m = cov.size
    n = int(n_cols)
    b = int(b_reps)
    if n < 1 or b < 1:
        raise ValueError("n_cols and b_reps must be positive")
    if isinstance(cov, BlockCovariance) and cov.n_volumes != n:
        raise ValueError("block descriptor covers a different column count")
    bm, bn = b * m, b * n
    if bm * bn > max_entries:
        raise ResourceLimitError(
            f"ESD draw of {bm} x {bn} exceeds the {max_entries} entry cap; "
            "reduce b_reps or the patch size")
    g = (rng.standard_normal((b, m, bn)) + 1j * rng.standard_normal((b, m, bn)))
    g *= np.sqrt(0.5)
    if isinstance(cov, DiagCovariance):
        w = np.sqrt(cov.variances)[None, :, None] * g
    elif isinstance(cov, DenseCovariance):
        w = np.matmul(_chol_factor(cov.matrix), g)
    else:
        w = np.empty_like(g)
        col_arm = np.empty(n, dtype=np.int64)
        for arm_idx, (_, vols) in enumerate(cov.blocks):
            col_arm[vols] = arm_idx
        col_arm = np.tile(col_arm, b)
        for arm_idx, (sub, _) in enumerate(cov.blocks):
            sel = np.flatnonzero(col_arm == arm_idx)
            if isinstance(sub, DiagCovariance):
                w[:, :, sel] = np.sqrt(sub.variances)[None, :, None] * g[:, :, sel]
            else:
                w[:, :, sel] = np.matmul(_chol_factor(sub.matrix), g[:, :, sel])
    w = w.reshape(bm, bn)
    gram = w @ w.conj().T
    evals = np.linalg.eigvalsh(gram).real
    atoms = np.sqrt(np.clip(evals, 0.0, None) / bn)
    return EsdModel(atoms, m / n, m, n, b)


def save_esd(path, model):
    """Persist an EsdModel to a .npz file."""
    np.savez(path, atoms=model.atoms, aspect=model.aspect,
             m=model.m, n=model.n, b_reps=model.b_reps)


def load_esd(path):
    with _open_npz(path) as z:
        try:
            return EsdModel(z["atoms"], float(z["aspect"]), int(z["m"]),
                            int(z["n"]), int(z["b_reps"]))
        except KeyError as exc:
            raise FormatError(f"malformed ESD archive: {exc}") from exc


# ----------------------------------------------------------------------
# Marchenko-Pastur law (white noise reference)


@dataclass(frozen=True)
class MpLaw:
    """Limiting squared-singular-value law for white noise, aspect gamma."""

    gamma: float
    sigma2: float = 1.0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")

    @property
    def lower(self):
        return self.sigma2 * (1.0 - np.sqrt(self.gamma)) ** 2

    @property
    def upper(self):
        return self.sigma2 * (1.0 + np.sqrt(self.gamma)) ** 2

    @property
    def edge(self):
        """Upper edge in singular value units."""
        return float(np.sqrt(self.upper))

    def density(self, x):
        x = np.asarray(x, dtype=np.float64)
        a, bnd = self.lower, self.upper
        inside = (x > a) & (x < bnd)
        out = np.zeros_like(x, dtype=np.float64)
        xi = x[inside]
        out[inside] = np.sqrt((bnd - xi) * (xi - a)) / (
            2.0 * np.pi * self.gamma * self.sigma2 * xi)
        return out if out.ndim else float(out)

    def cdf(self, x):
        x = float(x)
        if x <= self.lower:
            return 0.0
        if x >= self.upper:
            return 1.0
        val, _ = integrate.quad(lambda t: self.density(np.float64(t)),
                                self.lower, x, limit=200)
        return min(max(val, 0.0), 1.0)

    def quantile(self, p):
        """Inverse CDF by bisection; p must lie in (0, 1], p = 1 gives the
        upper support point."""
        if not 0.0 < p <= 1.0:
            raise DomainError("quantile order must lie in (0, 1]")
        if p == 1.0:
            return self.upper
        return _mp_quantile_cached(round(self.gamma, 12),
                                   round(self.sigma2, 12), p)


@lru_cache(maxsize=256)
def _mp_quantile_cached(gamma, sigma2, p):
    law = MpLaw(gamma, sigma2)
    lo, hi = law.lower, law.upper
    tol = 1e-8 * max(1.0, hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if law.cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)

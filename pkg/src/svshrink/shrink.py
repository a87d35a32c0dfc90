"""Singular value shrinkage of patch matrices and scalar noise estimators.

All spectra are expressed in 1/sqrt(N)-scaled units: a patch matrix Y with
N columns has observed values eta = svd(Y)/sqrt(N), estimates are produced
in the same units, and the recovered matrix multiplies back by sqrt(N).
The shrinkage rule and its asymptotic risk come from an EsdModel of the
patch noise; hard truncation of the same detected components is kept as a
reference rule and is never risk-optimal for the Frobenius loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .esd import EsdModel, MpLaw

EXP_VARIANTS = ("exp1", "exp2")


@dataclass(frozen=True)
class SpectralDecomposition:
    """Economy SVD of a patch matrix with 1/sqrt(N) value scaling."""

    u: np.ndarray
    eta: np.ndarray
    vh: np.ndarray
    n_cols: int

    def recover(self, eta_new):
        """Matrix with the same singular frames and new scaled values."""
        eta_new = np.asarray(eta_new, dtype=np.float64)
        if eta_new.shape != self.eta.shape:
            raise ValueError("eta_new must match the decomposition size")
        s = eta_new * np.sqrt(self.n_cols)
        return (self.u * s[None, :]) @ self.vh


def decompose(entries):
    """SpectralDecomposition of an M x N complex matrix."""
    entries = np.asarray(entries, dtype=np.complex128)
    if entries.ndim != 2:
        raise ValueError("entries must be a 2-D matrix")
    u, s, vh = np.linalg.svd(entries, full_matrices=False)
    return SpectralDecomposition(u, s / np.sqrt(entries.shape[1]),
                                 vh, entries.shape[1])


@dataclass(frozen=True)
class ShrinkOutcome:
    """Denoised patch matrix plus spectrum-level diagnostics.

    amse is the floored sum of per-component risk terms over detected
    components (NaN when nothing clears the noise edge, in which case the
    estimate is the zero matrix); amse_terms keeps the raw per-component
    values for diagnostics.
    """

    estimate: np.ndarray
    eta: np.ndarray
    eta_hat: np.ndarray
    detected: np.ndarray
    amse: float
    amse_terms: np.ndarray
    rule: str

    @property
    def n_detected(self):
        return int(np.count_nonzero(self.detected))

    @property
    def signal_energy(self):
        """Sum of squared estimated values (RAMSE denominator units)."""
        return float(np.sum(self.eta_hat ** 2))


def _apply_rule(dec, model, rule):
    detected = model.detected(dec.eta)
    if rule == "shrink":
        eta_hat = model.shrink(dec.eta)
    elif rule == "truncate":
        eta_hat = np.where(detected, dec.eta, 0.0)
    else:
        raise ValueError("rule must be 'shrink' or 'truncate'")
    terms = model.amse_terms(dec.eta, rule)
    if np.any(detected):
        amse = float(np.nansum(np.clip(terms, 0.0, None)))
        est = dec.recover(eta_hat)
    else:
        amse = float("nan")
        est = np.zeros((dec.u.shape[0], dec.vh.shape[1]), dtype=np.complex128)
    return ShrinkOutcome(est, dec.eta, eta_hat, detected, amse, terms, rule)


def shrink_frobenius(entries, model, dec=None):
    """Optimal Frobenius-loss shrinkage of a whitened patch matrix.

    Parameters
    ----------
    entries : ndarray (M, N)
        Patch matrix in the noise-whitened frame.
    model : EsdModel
        Noise spectrum model matching the whitened rows.
    dec : SpectralDecomposition, optional
        Reuse an existing decomposition of entries.
    """
    if dec is None:
        dec = decompose(entries)
    return _apply_rule(dec, model, "shrink")


def truncate_hard(entries, model, dec=None):
    """Reference rule: keep detected singular values unshrunk."""
    if dec is None:
        dec = decompose(entries)
    return _apply_rule(dec, model, "truncate")


class NoiseEstimate(NamedTuple):
    sigma2: float
    rank: int


def _check_spectrum(eta):
    lam = np.sort(np.asarray(eta, dtype=np.float64) ** 2)[::-1]
    if lam.ndim != 1 or lam.size == 0:
        raise ValueError("eta must be a non-empty 1-D spectrum")
    return lam


def estimate_noise_exp(eta, n_cols, variant="exp2"):
    """Noise variance and rank from the spectrum tail, exp-family rules.

    Scans candidate ranks R = 0, 1, ... and keeps the first whose tail
    energy sum(lam[R:]) is at least (M - R) times the tail-slope variance
    guess sigma2(R) = f(R) * (lam[R] - lam[M-1]) / (4 sqrt(M - R)); the
    variants differ in the column factor f: exp1 uses sqrt(N), exp2 uses
    sqrt(N - R).  The scan always terminates because R = M - 1 gives a
    zero guess.

    Parameters
    ----------
    eta : 1-D array of scaled singular values (any order).
    n_cols : int
        Column count N of the patch matrix.
    variant : {'exp1', 'exp2'}
    """
    if variant not in EXP_VARIANTS:
        raise ValueError(f"variant must be one of {EXP_VARIANTS}")
    lam = _check_spectrum(eta)
    m = lam.size
    n = int(n_cols)
    tail = np.cumsum(lam[::-1])[::-1]
    for r in range(m):
        factor = np.sqrt(n) if variant == "exp1" else np.sqrt(max(n - r, 0))
        sigma2 = factor * (lam[r] - lam[m - 1]) / (4.0 * np.sqrt(m - r))
        if tail[r] >= (m - r) * sigma2:
            return NoiseEstimate(float(sigma2), r)
    return NoiseEstimate(0.0, m - 1)


def estimate_noise_med(eta, n_cols):
    """Noise variance from the spectrum median against the white-noise law.

    Divides the ceil(M/2)-th largest squared value by the median of the
    Marchenko-Pastur law at aspect M/N; the rank is the count of values
    above the resulting noise edge.
    """
    lam = _check_spectrum(eta)
    m = lam.size
    n = int(n_cols)
    gamma = min(m / n, 1.0)
    law = MpLaw(gamma)
    k = int(np.ceil(m / 2))
    sigma2 = float(lam[k - 1] / law.quantile(0.5))
    edge = sigma2 * (1.0 + np.sqrt(gamma)) ** 2
    rank = int(np.count_nonzero(lam > edge))
    return NoiseEstimate(sigma2, rank)


def white_esd_reference(sigma2, m, n):
    """MpLaw for a white spectrum, for comparing against EsdModel edges."""
    return MpLaw(min(m / n, 1.0), float(sigma2))


__all__ = [
    "SpectralDecomposition", "decompose", "ShrinkOutcome",
    "shrink_frobenius", "truncate_hard", "NoiseEstimate",
    "estimate_noise_exp", "estimate_noise_med", "white_esd_reference",
    "EsdModel",
]

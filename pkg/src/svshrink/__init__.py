"""Patch-based singular value shrinkage denoising for complex volume sets.

The package reconstructs multi-coil acquisitions with exact noise
propagation, simulates per-patch noise singular value spectra, applies the
risk-optimal Frobenius shrinker to overlapping patch matrices, and
reassembles denoised volumes with weighted averaging.  Slicewise linear
phase demodulation and a patch-aspect risk scan round out the pipeline.
"""

from .errors import (CoverageError, DecompositionError, DomainError,
                     FormatError, IllConditionedEncodingError,
                     NumericalFailureError, ResourceLimitError, SvshrinkError)
from .volumes import (CasoratiMatrix, ComplexVolumeSet, PatchTable,
                      WeightScheme, assemble_patches, build_patch_table,
                      extract_casorati, flatten_volumes, patch_radii,
                      unflatten_volumes)
from .cvol import (atomic_write_bytes, atomic_write_json, read_cvol,
                   write_cvol, write_map_cvol)
from .recon import (BlockCovariance, DenseCovariance, DiagCovariance,
                    EncodingModel, EncodingSpec, NoiseModel,
                    channel_correlation, channel_whitener, encode,
                    load_encoding, load_noise_model, local_covariance,
                    make_encoding, propagate_noise, reconstruct_noise,
                    save_encoding, save_noise_model, scale_noise_model,
                    sense_reconstruct, patch_whitener,
                    synthetic_sensitivities, whiten_channels, whiten_patch,
                    whitened_sensitivities)
from .esd import (EsdModel, MpLaw, descriptor_key, load_esd, noiseless_esd,
                  save_esd, simulate_esd)
from .shrink import (NoiseEstimate, ShrinkOutcome, SpectralDecomposition,
                     decompose, estimate_noise_exp, estimate_noise_med,
                     shrink_frobenius, truncate_hard,
                     white_esd_reference)
from .phase import PhaseModel, demodulate, estimate_linear_phase, remodulate
from .pipeline import (DenoiseConfig, GammaScan, RecoveryReport, denoise,
                       estimate_gamma, phase_gain_db)
from .synth import (PhantomSpec, SpikedSpec, add_white_noise, haar_frame,
                    make_phantom, make_spiked, psnr, random_phase_model)

__version__ = "0.1.0"

__all__ = [
    "SvshrinkError", "DecompositionError", "IllConditionedEncodingError",
    "ResourceLimitError", "NumericalFailureError", "DomainError",
    "CoverageError", "FormatError",
    "ComplexVolumeSet", "WeightScheme", "PatchTable", "CasoratiMatrix",
    "build_patch_table", "extract_casorati", "assemble_patches",
    "flatten_volumes", "unflatten_volumes", "patch_radii",
    "atomic_write_bytes", "atomic_write_json",
    "read_cvol", "write_cvol", "write_map_cvol",
    "EncodingSpec", "EncodingModel", "NoiseModel",
    "DiagCovariance", "DenseCovariance", "BlockCovariance",
    "make_encoding", "synthetic_sensitivities", "channel_correlation",
    "channel_whitener", "patch_whitener", "whiten_channels", "whiten_patch",
    "whitened_sensitivities", "encode",
    "sense_reconstruct", "reconstruct_noise", "propagate_noise",
    "local_covariance", "save_encoding", "load_encoding",
    "save_noise_model", "load_noise_model", "scale_noise_model",
    "EsdModel", "MpLaw", "simulate_esd", "noiseless_esd", "descriptor_key",
    "save_esd", "load_esd",
    "SpectralDecomposition", "decompose", "ShrinkOutcome",
    "shrink_frobenius", "truncate_hard", "white_esd_reference", "NoiseEstimate",
    "estimate_noise_exp", "estimate_noise_med",
    "PhaseModel", "estimate_linear_phase", "demodulate", "remodulate",
    "DenoiseConfig", "RecoveryReport", "GammaScan", "denoise",
    "estimate_gamma", "phase_gain_db",
    "SpikedSpec", "make_spiked", "PhantomSpec", "make_phantom", "haar_frame",
    "random_phase_model", "add_white_noise", "psnr",
]

"""Command line tools: denoise, estimate-gamma, simulate, validate-noise, esd.

Exit codes: 0 success, 1 computational failure, 2 usage or I/O error,
3 validation failure.  All outputs are written atomically after the full
computation finishes, and JSON reports embed the resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .cvol import atomic_write_bytes, atomic_write_json, read_cvol, write_cvol
from .errors import DomainError, FormatError, SvshrinkError
from .esd import save_esd, simulate_esd
from .phase import remodulate
from .pipeline import (GAMMA_GRID, SCAN_STRIDE, DenoiseConfig, denoise,
                       estimate_gamma)
from .recon import (load_encoding, load_noise_model, local_covariance,
                    make_encoding, propagate_noise, reconstruct_noise,
                    save_encoding, save_noise_model, synthetic_sensitivities,
                    channel_correlation, encode, sense_reconstruct,
                    whiten_patch)
from .shrink import estimate_noise_exp, estimate_noise_med
from .synth import PhantomSpec, make_phantom, psnr, random_phase_model
from .volumes import (ComplexVolumeSet, PatchTable, WeightScheme,
                      _nearest_members, build_patch_table)

EXIT_OK = 0
EXIT_COMPUTE = 1
EXIT_USAGE = 2
EXIT_VALIDATION = 3

CONFIG_KEYS = {
    "aspect", "patch_size", "stride", "weights", "gaussian_sigma", "rule",
    "mode", "b_reps", "seed", "workers", "phase_correction", "whitened",
    "noise_scale", "max_esd_entries",
}


class UsageError(Exception):
    pass


def _csv_ints(text):
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") \
            from exc


def _csv_floats(text):
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") \
            from exc


def _build_config(args):
    """Defaults, then config file keys, then explicit flags."""
    cfg = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"malformed config JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - CONFIG_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(loaded)
    overrides = {
        "aspect": getattr(args, "gamma", None),
        "patch_size": getattr(args, "patch_size", None),
        "stride": getattr(args, "stride", None),
        "weights": getattr(args, "weights", None),
        "gaussian_sigma": getattr(args, "gaussian_sigma", None),
        "rule": getattr(args, "rule", None),
        "mode": getattr(args, "mode", None),
        "b_reps": getattr(args, "b_reps", None),
        "seed": getattr(args, "seed", None),
        "workers": getattr(args, "workers", None),
        "noise_scale": getattr(args, "noise_scale", None),
    }
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    if getattr(args, "no_phase_correction", False):
        cfg["phase_correction"] = False
    if getattr(args, "whitened", False):
        cfg["whitened"] = True
    weights = cfg.pop("weights", None)
    gaussian_sigma = cfg.pop("gaussian_sigma", None)
    if isinstance(weights, dict):
        gaussian_sigma = weights.get("gaussian_sigma", gaussian_sigma)
        weights = weights.get("kind")
    try:
        scheme = WeightScheme(weights or "uniform", gaussian_sigma)
        return DenoiseConfig(weights=scheme, **cfg)
    except (TypeError, ValueError, DomainError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


def _add_config_flags(sub):
    sub.add_argument("--config", help="JSON file with configuration keys")
    sub.add_argument("--gamma", type=float, help="patch aspect M/N in (0, 1]")
    sub.add_argument("--patch-size", type=int, dest="patch_size",
                     help="patch voxel count M (overrides --gamma)")
    sub.add_argument("--stride", type=int, help="patch lattice step")
    sub.add_argument("--weights", choices=("uniform", "inverse-variance",
                                           "gaussian"))
    sub.add_argument("--gaussian-sigma", type=float, dest="gaussian_sigma",
                     help="fixed kernel width in mm for gaussian weights")
    sub.add_argument("--rule", choices=("shrink", "truncate"))
    sub.add_argument("--mode", choices=("joint", "separate"),
                     help="interleaved handling: one joint problem or one "
                          "subproblem per encoding")
    sub.add_argument("--b-reps", type=int, dest="b_reps",
                     help="ESD enlargement factor")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--workers", type=int)
    sub.add_argument("--noise-scale", type=float, dest="noise_scale",
                     help="multiplier on the modeled noise std")
    sub.add_argument("--no-phase-correction", action="store_true",
                     dest="no_phase_correction",
                     help="skip slicewise linear phase demodulation")
    sub.add_argument("--whitened", action="store_true",
                     help="standardize each patch before recovery and map "
                          "the estimate back (invariant-loss mode)")


# ----------------------------------------------------------------------
# denoise


def _cmd_denoise(args):
    vols = read_cvol(args.input)
    nm = load_noise_model(args.noise)
    config = _build_config(args)
    scan = None
    if args.auto_gamma:
        gams = _csv_floats(args.gammas) if args.gammas else None
        scan = estimate_gamma(vols, nm, config, gammas=gams,
                              scan_stride=args.scan_stride)
        config = replace(config, aspect=scan.best_gamma, patch_size=None)
    est, report = denoise(vols, nm, config)
    write_cvol(args.output, est)
    if args.report:
        payload = report.to_dict()
        payload["input"] = os.path.abspath(args.input)
        payload["noise"] = os.path.abspath(args.noise)
        payload["output"] = os.path.abspath(args.output)
        if scan is not None:
            payload["gamma_scan"] = scan.to_dict()
        atomic_write_json(args.report, payload)
    print(f"denoised {vols.n_volumes} volumes on a "
          f"{'x'.join(str(d) for d in vols.dims)} grid: "
          f"patches={report.n_patches} ramse={report.ramse:.6g} "
          f"-> {args.output}")
    return EXIT_OK


# ----------------------------------------------------------------------
# estimate-gamma


def _scan_curve_csv(scan):
    lines = ["gamma,patch_size,ramse,n_undetected,skipped"]
    for g, m, r, u in zip(scan.gammas, scan.patch_sizes, scan.ramse,
                          scan.n_undetected):
        lines.append(f"{g:g},{m},{r:.12g},{u},{int(g in scan.skipped)}")
    return "\n".join(lines) + "\n"


def _cmd_estimate_gamma(args):
    vols = read_cvol(args.input)
    nm = load_noise_model(args.noise)
    config = _build_config(args)
    gams = _csv_floats(args.gammas) if args.gammas else None
    scan = estimate_gamma(vols, nm, config, gammas=gams,
                          scan_stride=args.scan_stride)
    payload = scan.to_dict()
    payload["config"] = config.to_dict()
    payload["input"] = os.path.abspath(args.input)
    payload["noise"] = os.path.abspath(args.noise)
    csv_path = args.csv or os.path.splitext(args.output)[0] + ".csv"
    payload["curve_csv"] = os.path.abspath(csv_path)
    atomic_write_json(args.output, payload)
    atomic_write_bytes(csv_path, _scan_curve_csv(scan).encode())
    print(f"best aspect {scan.best_gamma:.2f} "
          f"(patch size {scan.best_patch_size}, status {payload['status']}) "
          f"-> {args.output}")
    return EXIT_OK


# ----------------------------------------------------------------------
# simulate


def _cmd_simulate(args):
    dims = _csv_ints(args.dims)
    if len(dims) != 3:
        raise UsageError("--dims takes X,Y,Z")
    spacing = _csv_floats(args.spacing)
    if len(spacing) != 3:
        raise UsageError("--spacing takes sx,sy,sz")
    rng = np.random.default_rng(args.seed)
    spec = PhantomSpec(dims, args.volumes, args.rank, args.smoothness,
                       args.contrast, args.intensity)
    truth = make_phantom(spec, rng, spacing)
    phase = None
    if args.phase_ramps:
        phase = random_phase_model(dims, args.volumes, rng, args.max_cycles)
        modulated = remodulate(truth, phase)
    else:
        modulated = truth

    sens = synthetic_sensitivities(dims, args.coils, seed=args.seed)
    cov = channel_correlation(args.coils, args.channel_rho)
    schedule = None
    if args.case == "INTER":
        schedule = tuple(i % args.arms for i in range(args.volumes))
    enc = make_encoding(args.case, sens, cov,
                        undersampling=args.undersampling,
                        pe_axis=args.pe_axis, pf_fraction=args.pf_fraction,
                        pf_kind=args.pf_kind, schedule=schedule,
                        n_arms=args.arms if args.case == "INTER" else None)
    z = encode(enc, modulated)
    if enc.case == "INTER":
        noisy_z = [zi + _unit_noise(rng, zi.shape) for zi in z]
    else:
        noisy_z = z + _unit_noise(rng, z.shape)
    reference = sense_reconstruct(z, enc, spacing)
    noisy = sense_reconstruct(noisy_z, enc, spacing)
    nm = propagate_noise(enc)

    os.makedirs(args.output_dir, exist_ok=True)
    paths = {name: os.path.join(args.output_dir, name) for name in
             ("truth.json", "reference.json", "noisy.json", "noise.npz",
              "encoding.npz", "manifest.json")}
    write_cvol(paths["truth.json"], truth)
    write_cvol(paths["reference.json"], reference)
    write_cvol(paths["noisy.json"], noisy)
    save_noise_model(paths["noise.npz"], nm)
    save_encoding(paths["encoding.npz"], enc)
    manifest = {
        "case": args.case, "dims": list(dims), "spacing_mm": list(spacing),
        "volumes": args.volumes, "coils": args.coils,
        "channel_rho": args.channel_rho,
        "undersampling": args.undersampling, "pe_axis": args.pe_axis,
        "pf_fraction": args.pf_fraction, "pf_kind": args.pf_kind,
        "arms": args.arms if args.case == "INTER" else 1,
        "schedule": list(schedule) if schedule else None,
        "rank": args.rank, "smoothness": args.smoothness,
        "contrast": args.contrast, "intensity": args.intensity,
        "phase_ramps": bool(args.phase_ramps), "max_cycles": args.max_cycles,
        "seed": args.seed,
        "noisy_psnr_db": psnr(reference, noisy),
        "files": {k: os.path.abspath(v) for k, v in paths.items()},
    }
    atomic_write_json(paths["manifest.json"], manifest)
    print(f"simulated {args.case} set in {args.output_dir} "
          f"(noisy PSNR {manifest['noisy_psnr_db']:.2f} dB)")
    return EXIT_OK


def _unit_noise(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) \
        * np.sqrt(0.5)


# ----------------------------------------------------------------------
# validate-noise


def _probe_patch_ids(n_patches, n_probes):
    if n_patches <= n_probes:
        return list(range(n_patches))
    step = n_patches / n_probes
    return sorted({int(i * step) for i in range(n_probes)})


def _cmd_validate_noise(args):
    enc = load_encoding(args.encoding)
    nm = propagate_noise(enc)
    rng = np.random.default_rng(args.seed)
    dims = enc.dims
    spacing = _csv_floats(args.spacing)
    if len(spacing) != 3:
        raise UsageError("--spacing takes sx,sy,sz")

    if enc.case == "INTER":
        n_per = len(enc.schedule)
        reps = max(args.samples // n_per, 2)
        draws = [reconstruct_noise(enc, n_per, rng, spacing).data
                 for _ in range(reps)]
        stack = np.stack(draws, axis=-1)      # (X, Y, Z, n_per, reps)
        sched = np.asarray(enc.schedule)
        emp_maps = [np.mean(np.abs(stack[..., sched == a, :]) ** 2,
                            axis=(3, 4)) for a in range(enc.n_arms)]
        counts = np.bincount(sched, minlength=enc.n_arms)
        w = counts / counts.sum()
        emp_map = sum(w[a] * emp_maps[a] for a in range(enc.n_arms))
        flat = [stack[..., sched == a, :].reshape(dims + (-1,))
                for a in range(enc.n_arms)]
    else:
        noise = reconstruct_noise(enc, args.samples, rng, spacing)
        emp_map = np.mean(np.abs(noise.data) ** 2, axis=3)
        flat = [noise.data]

    ana_map = nm.variance_map
    ratio = emp_map / np.maximum(ana_map, 1e-300)
    median_ratio = float(np.median(ratio))

    table = build_patch_table(dims, spacing, args.patch_size, args.stride,
                              repair=False)
    probes = _probe_patch_ids(table.n_patches, args.probes)
    probe_errors = []
    for pid in probes:
        members = table.members[pid]
        xs, ys, zs = _member_coords(members, dims)
        if enc.case == "INTER":
            errs = []
            for arm_idx in range(enc.n_arms):
                samples = flat[arm_idx][xs, ys, zs, :]
                emp = samples @ samples.conj().T / samples.shape[1]
                ana = _patch_cov(nm, table, pid, arm_idx).dense()
                errs.append(_rel_frob(emp, ana))
            probe_errors.append(max(errs))
        else:
            samples = flat[0][xs, ys, zs, :]
            emp = samples @ samples.conj().T / samples.shape[1]
            ana = _patch_cov(nm, table, pid, 0).dense()
            probe_errors.append(_rel_frob(emp, ana))
    worst_probe = float(max(probe_errors)) if probe_errors else float("nan")

    est_rows, medians = _estimator_histograms(args, nm, dims, spacing, flat)
    csv_path = args.csv
    if csv_path is None and args.output:
        csv_path = os.path.splitext(args.output)[0] + ".csv"
    if csv_path and est_rows:
        lines = ["arm,patch,exp1,exp2,med,model"]
        lines += [f"{a},{p},{e1:.10g},{e2:.10g},{md:.10g},{mo:.10g}"
                  for a, p, e1, e2, md, mo in est_rows]
        atomic_write_bytes(csv_path, ("\n".join(lines) + "\n").encode())

    sigma_ok = all(abs(v - 1.0) <= args.tol_sigma for v in medians.values()) \
        if medians else True
    passed = (abs(median_ratio - 1.0) <= args.tol
              and worst_probe <= args.tol and sigma_ok)
    payload = {
        "encoding": os.path.abspath(args.encoding),
        "case": enc.case,
        "samples": args.samples,
        "patch_size": args.patch_size,
        "probes": [int(p) for p in probes],
        "tol": args.tol,
        "seed": args.seed,
        "median_variance_ratio": median_ratio,
        "max_abs_log_ratio": float(np.max(np.abs(np.log(ratio)))),
        "probe_frobenius_errors": [float(e) for e in probe_errors],
        "worst_probe_error": worst_probe,
        "est_patch_size": args.est_patch_size,
        "est_volumes": args.est_volumes,
        "tol_sigma": args.tol_sigma,
        "estimator_medians": medians,
        "histogram_csv": os.path.abspath(csv_path) if csv_path and est_rows
        else None,
        "passed": bool(passed),
    }
    if args.output:
        atomic_write_json(args.output, payload)
    med_text = ", ".join(f"{k} {v:.4f}" for k, v in medians.items())
    print(f"noise validation {'PASSED' if passed else 'FAILED'}: "
          f"median variance ratio {median_ratio:.4f}, "
          f"worst patch covariance error {worst_probe:.4f}"
          + (f", estimator medians {med_text}" if medians else ""))
    return EXIT_OK if passed else EXIT_VALIDATION


def _member_coords(members, dims):
    xs = members % dims[0]
    ys = (members // dims[0]) % dims[1]
    zs = members // (dims[0] * dims[1])
    return xs, ys, zs


def _estimator_histograms(args, nm, dims, spacing, flat):
    """Spectrum-based noise estimates on whitened pure-noise patches.

    Each patch Casorati matrix is standardized against the propagated
    covariance, so every estimator should report a variance near 1; the
    model column is the plain mean squared magnitude under the same
    whitening.
    """
    m_est, n_est = args.est_patch_size, args.est_volumes
    if m_est < 1:
        return [], {}
    avail = min(arr.shape[3] for arr in flat)
    if n_est > avail:
        raise UsageError(f"--est-volumes {n_est} exceeds the {avail} "
                         "noise draws available; raise --samples")
    if m_est > n_est:
        raise UsageError("--est-patch-size must not exceed --est-volumes")
    table = build_patch_table(dims, spacing, m_est, args.est_stride,
                              repair=False)
    rows = []
    for arm_idx, arr in enumerate(flat):
        cols = arr[..., :n_est]
        for pid in range(table.n_patches):
            xs, ys, zs = _member_coords(table.members[pid], dims)
            entries = cols[xs, ys, zs, :]
            white, _, _ = whiten_patch(entries,
                                       _patch_cov(nm, table, pid, arm_idx))
            eta = np.linalg.svd(white, compute_uv=False) / np.sqrt(n_est)
            e1 = estimate_noise_exp(eta, n_est, "exp1").sigma2
            e2 = estimate_noise_exp(eta, n_est, "exp2").sigma2
            md = estimate_noise_med(eta, n_est).sigma2
            mo = float(np.mean(np.abs(white) ** 2))
            rows.append((arm_idx, pid, e1, e2, md, mo))
    cols = np.asarray([r[2:] for r in rows], dtype=np.float64)
    medians = {name: float(np.median(cols[:, i]))
               for i, name in enumerate(("exp1", "exp2", "med", "model"))}
    return rows, medians


def _patch_cov(nm, table, pid, arm_idx):
    from .recon import _arm_member_cov
    return _arm_member_cov(nm, arm_idx, table.members[pid])


def _rel_frob(emp, ana):
    denom = np.linalg.norm(ana)
    if denom == 0:
        return float(np.linalg.norm(emp))
    return float(np.linalg.norm(emp - ana) / denom)


# ----------------------------------------------------------------------
# esd


def _cmd_esd(args):
    nm = load_noise_model(args.noise)
    dims = nm.dims
    spacing = _csv_floats(args.spacing)
    if len(spacing) != 3:
        raise UsageError("--spacing takes sx,sy,sz")
    center = _csv_ints(args.center)
    if len(center) != 3 or any(c < 0 or c >= d for c, d in zip(center, dims)):
        raise UsageError("--center must give in-grid x,y,z")
    lin = center[0] + dims[0] * (center[1] + dims[1] * center[2])
    members = _nearest_members(dims, spacing, lin, args.patch_size)
    table = PatchTable(dims, spacing, np.array([lin]), members[None, :], 1,
                       args.volumes)
    cov = local_covariance(nm, table, 0, n_volumes=args.volumes)
    model = simulate_esd(cov, args.volumes, args.b_reps,
                         np.random.default_rng(args.seed))
    save_esd(args.output, model)
    summary = {
        "noise": os.path.abspath(args.noise),
        "center": list(center), "patch_size": args.patch_size,
        "volumes": args.volumes, "b_reps": args.b_reps, "seed": args.seed,
        "aspect": model.aspect, "edge": model.edge,
        "n_atoms": int(model.atoms.size),
        "output": os.path.abspath(args.output),
    }
    if args.summary:
        atomic_write_json(args.summary, summary)
    print(f"ESD with {model.atoms.size} atoms, upper edge {model.edge:.6g} "
          f"-> {args.output}")
    return EXIT_OK


# ----------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="svshrink",
        description="Patch-based singular value shrinkage denoising for "
                    "complex volume sets")
    subs = parser.add_subparsers(dest="command", required=True)

    d = subs.add_parser("denoise", help="denoise a CVOL volume set")
    d.add_argument("--input", required=True, help="CVOL header (.json)")
    d.add_argument("--noise", required=True, help="noise model (.npz)")
    d.add_argument("--output", required=True, help="output CVOL header")
    d.add_argument("--report", help="write a JSON run report here")
    d.add_argument("--auto-gamma", action="store_true",
                   help="pick the aspect by a risk scan first")
    d.add_argument("--gammas", help="comma-separated aspects for the scan")
    d.add_argument("--scan-stride", type=int, default=SCAN_STRIDE)
    _add_config_flags(d)
    d.set_defaults(func=_cmd_denoise)

    g = subs.add_parser("estimate-gamma",
                        help="scan patch aspects and report the risk profile")
    g.add_argument("--input", required=True)
    g.add_argument("--noise", required=True)
    g.add_argument("--output", required=True, help="JSON report path")
    g.add_argument("--gammas", help="comma-separated candidate aspects")
    g.add_argument("--scan-stride", type=int, default=SCAN_STRIDE)
    g.add_argument("--csv", help="risk curve CSV path (default: next to "
                                 "the JSON report)")
    _add_config_flags(g)
    g.set_defaults(func=_cmd_estimate_gamma)

    s = subs.add_parser("simulate",
                        help="write a synthetic phantom acquisition")
    s.add_argument("--output-dir", required=True)
    s.add_argument("--case", default="FULL",
                   choices=("FULL", "UNDER", "HALF", "INTER"))
    s.add_argument("--dims", default="16,16,8")
    s.add_argument("--spacing", default="1,1,1")
    s.add_argument("--volumes", type=int, default=32)
    s.add_argument("--coils", type=int, default=6)
    s.add_argument("--channel-rho", type=float, default=0.1,
                   dest="channel_rho")
    s.add_argument("--undersampling", type=int, default=1)
    s.add_argument("--pe-axis", type=int, default=1, dest="pe_axis")
    s.add_argument("--pf-fraction", type=float, default=1.0,
                   dest="pf_fraction")
    s.add_argument("--pf-kind", default="zero-fill",
                   choices=("zero-fill", "ramp"), dest="pf_kind")
    s.add_argument("--arms", type=int, default=2)
    s.add_argument("--rank", type=int, default=4)
    s.add_argument("--smoothness", type=float, default=2.0)
    s.add_argument("--contrast", type=float, default=0.35)
    s.add_argument("--intensity", type=float, default=10.0)
    s.add_argument("--phase-ramps", action="store_true", dest="phase_ramps")
    s.add_argument("--max-cycles", type=int, default=2, dest="max_cycles")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_simulate)

    v = subs.add_parser("validate-noise",
                        help="check analytic noise against Monte Carlo")
    v.add_argument("--encoding", required=True, help="encoding (.npz)")
    # patch covariance probes need ~ sqrt(M / samples) relative accuracy;
    # 10^4 draws keep the expected error near half the default tolerance
    v.add_argument("--samples", type=int, default=10_000)
    v.add_argument("--patch-size", type=int, default=8, dest="patch_size")
    v.add_argument("--stride", type=int, default=5)
    v.add_argument("--probes", type=int, default=8)
    v.add_argument("--spacing", default="1,1,1")
    v.add_argument("--tol", type=float, default=0.05)
    v.add_argument("--est-patch-size", type=int, default=121,
                   dest="est_patch_size",
                   help="patch rows for the estimator histograms "
                        "(0 disables the stage)")
    v.add_argument("--est-volumes", type=int, default=250,
                   dest="est_volumes",
                   help="columns per estimator patch, drawn from the "
                        "noise samples")
    v.add_argument("--est-stride", type=int, default=4, dest="est_stride")
    v.add_argument("--tol-sigma", type=float, default=0.05, dest="tol_sigma",
                   help="allowed deviation of estimator medians from 1")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--output", help="JSON report path")
    v.add_argument("--csv", help="estimator histogram CSV path (default: "
                                 "next to the JSON report)")
    v.set_defaults(func=_cmd_validate_noise)

    e = subs.add_parser("esd", help="simulate one patch noise spectrum")
    e.add_argument("--noise", required=True, help="noise model (.npz)")
    e.add_argument("--center", required=True, help="patch center x,y,z")
    e.add_argument("--patch-size", type=int, required=True,
                   dest="patch_size")
    e.add_argument("--volumes", type=int, required=True)
    e.add_argument("--b-reps", type=int, default=10, dest="b_reps")
    e.add_argument("--spacing", default="1,1,1")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--output", required=True, help=".npz output path")
    e.add_argument("--summary", help="JSON summary path")
    e.set_defaults(func=_cmd_esd)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except json.JSONDecodeError as exc:
        print(f"error: malformed JSON: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SvshrinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except np.linalg.LinAlgError as exc:
        print(f"error: linear algebra failure: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())

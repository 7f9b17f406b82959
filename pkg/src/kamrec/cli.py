"""Command-line surface: simulate, reconstruct, evaluate, expand.

Each subcommand reads and writes the documented file formats, so stages can
be re-run or swapped independently. Exit codes: 0 success, 2 usage or
parameter validation, 3 I/O or format problems, 4 numerical failures (the
failing stage is named on standard error). Outputs are deterministic for
fixed seeds; only the manifest's generated_at field varies between runs.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import io as _io
from .basis import BasisSpec
from .metrics import align_globally, fsc, resolution_at_threshold
from .projector import add_noise, image_to_polar, polar_grid, project_clean_cartesian
from .retrieval import reconstruct, resolve_threads
from .simulate import sample_rotation_pair, simulate_dataset
from .validation import FormatError, NumericalError
from .volume import VolumeGrid, expand_from_grid, synthesize_real_grid


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _write_report(path, pairs) -> None:
    """Plain text key=value diagnostics, one pair per line."""
    with open(path, "w", newline="\n") as fh:
        for key, value in pairs:
            fh.write(f"{key}={_fmt(value)}\n")


def _ensure_outdir(path) -> None:
    os.makedirs(path, exist_ok=True)


def cmd_simulate(args) -> int:
    if args.n < 1:
        raise ValueError("--n must be at least 1")
    if args.snr <= 0:
        raise ValueError("--snr must be positive (use 'inf' for clean images)")
    spec = BasisSpec.create(args.c, args.L, args.R)
    # A two-image dataset exists to be reconstructed; near-identity and
    # near-half-turn pairs are ambiguous, so keep the relative angle in the
    # window the reconstruction is specified for. Larger stacks stay Haar.
    rotations = (sample_rotation_pair(np.random.SeedSequence(args.seed).spawn(3)[1])
                 if args.n == 2 else None)
    dataset = simulate_dataset(spec, args.n, snr=args.snr, seed=args.seed,
                               degree_decay=args.degree_decay, rotations=rotations)
    _ensure_outdir(args.out)
    paths = {
        "coefficients": os.path.join(args.out, "phantom_coefficients.kamcoef"),
        "images": os.path.join(args.out, "images.kampol"),
        "spectrum": os.path.join(args.out, "spectrum.kamcl"),
        "profile": os.path.join(args.out, "profile.kamprofile"),
        "rotations": os.path.join(args.out, "rotations.kamrot"),
    }
    _io.write_coefficients(paths["coefficients"], dataset.coefficients)
    _io.write_polar_stack(paths["images"], dataset.images)
    _io.write_cl_spectrum(paths["spectrum"], dataset.spectrum)
    _io.write_profile(paths["profile"], dataset.profile_radii, dataset.profile_values)
    _io.write_rotations(paths["rotations"], dataset.rotations)
    if args.mrc_images:
        side = args.mrc_images
        if side < 2 * args.R:
            raise ValueError(f"--mrc-images {side} is below twice the support "
                             f"radius {args.R}")
        sections = np.stack([project_clean_cartesian(dataset.coefficients, rot, side)
                             for rot in dataset.rotations])
        rng = np.random.default_rng(np.random.SeedSequence(args.seed).spawn(4)[3])
        sections = add_noise(sections, args.snr, rng)
        paths["images_mrc"] = os.path.join(args.out, "images.mrc")
        _io.write_mrc_stack(paths["images_mrc"], sections)
    _io.write_manifest(
        os.path.join(args.out, "manifest.json"), "simulate",
        {"L": args.L, "c": args.c, "R": args.R, "n": args.n,
         "snr": "inf" if math.isinf(args.snr) else args.snr,
         "seed": args.seed, "degree_decay": args.degree_decay,
         "mrc_images": args.mrc_images},
        outputs=paths)
    print(f"wrote {args.n} images and oracle spectrum to {args.out}")
    return 0


def _load_image(path, index, grid):
    """One Fourier-domain image from a KAMPOL1 or MRC image stack.

    KAMPOL1 sections are already polar Fourier samples on their own grid;
    MRC sections are real-space images converted onto ``grid``. MRC stacks
    must be sampled at unit spacing, because the polar radii are in cycles
    per model length unit and the conversion reads the FFT in cycles per
    pixel.
    """
    kind = _io.sniff_image_stack(path)
    if kind == "polar":
        stack = _io.read_polar_stack(path)
        if not 0 <= index < len(stack):
            raise ValueError(f"image index {index} out of range for {path} "
                             f"({len(stack)} images)")
        return stack[index]
    data, voxel = _io.read_mrc(path)
    if abs(voxel - 1.0) > 1e-6:
        raise ValueError(f"MRC image stacks must be sampled at unit spacing "
                         f"(got voxel {voxel:g} in {path})")
    if data.shape[0] != data.shape[1]:
        raise ValueError(f"MRC sections in {path} are not square")
    if not 0 <= index < data.shape[2]:
        raise ValueError(f"image index {index} out of range for {path} "
                         f"({data.shape[2]} images)")
    return image_to_polar(data[:, :, index], grid)


def cmd_reconstruct(args) -> int:
    spectrum = _io.read_cl_spectrum(args.spectrum, bandlimit=args.c,
                                    support_radius=args.R)
    index2 = args.index2
    if index2 is None:
        index2 = 1 if os.path.abspath(args.image2) == os.path.abspath(args.image1) else 0
    grid = polar_grid(spectrum.spec)
    image1 = _load_image(args.image1, args.index1, grid)
    image2 = _load_image(args.image2, index2, grid)
    radii, values = _io.read_profile(args.profile)
    threads = resolve_threads(args.threads)
    result = reconstruct(
        spectrum, [image1, image2], radii, values,
        grid_resolution=args.grid_res, n_starts=args.starts,
        max_starts=args.max_starts, shortlist=args.shortlist,
        top_candidates=args.top, seed=args.seed, n_threads=threads)

    _ensure_outdir(args.out)
    coef_path = os.path.join(args.out, "coefficients.kamcoef")
    mrc_path = os.path.join(args.out, "volume.mrc")
    report_path = os.path.join(args.out, "diagnostics.txt")
    _io.write_coefficients(coef_path, result.coefficients)
    if args.size < 2 * spectrum.spec.support_radius:
        raise ValueError(f"--size {args.size} is below twice the support "
                         f"radius {spectrum.spec.support_radius}")
    volume_grid = synthesize_real_grid(result.coefficients, args.size, args.voxel)
    _io.write_mrc(mrc_path, volume_grid)

    diag = result.diagnostics
    q = result.rotation.quaternion
    pairs = [
        ("sign", result.sign),
        ("sign_relative_residual", diag["sign"]["relative_residual"]),
        ("match1_relative_residual", diag["match_residuals"][0]),
        ("match2_relative_residual", diag["match_residuals"][1]),
        ("match1_starts", diag["match_starts"][0]),
        ("match2_starts", diag["match_starts"][1]),
        ("grid_size", diag["grid_size"]),
        ("merge_best_score", diag["candidate_scores"][0]),
        ("final_cost", diag["final_cost"]),
        ("final_relative_residual", diag["final_relative_residual"]),
        ("rotation_quaternion", " ".join(f"{v:.17g}" for v in q)),
        ("grid_resolution", args.grid_res),
        ("n_starts", args.starts),
        ("max_starts", args.max_starts),
        ("shortlist", args.shortlist),
        ("top_candidates", args.top),
        ("seed", args.seed),
        ("threads", threads),
    ]
    pairs += [(f"time_{k}_s", v) for k, v in diag["timings"].items()]
    _write_report(report_path, pairs)
    _io.write_manifest(
        os.path.join(args.out, "manifest.json"), "reconstruct",
        {"c": args.c, "grid_res": args.grid_res, "starts": args.starts,
         "max_starts": args.max_starts, "shortlist": args.shortlist,
         "top": args.top, "seed": args.seed, "size": args.size,
         "voxel": args.voxel},
        outputs={"coefficients": coef_path, "volume": mrc_path,
                 "diagnostics": report_path},
        inputs={"spectrum": args.spectrum, "image1": args.image1,
                "image2": args.image2, "profile": args.profile})
    print(f"final_relative_residual={diag['final_relative_residual']:.6g}")
    print(f"wrote coefficients and volume to {args.out}")
    return 0


def _sniff_kind(path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(212)
    if head.startswith(b"kamcoef"):
        return "coefficients"
    if len(head) >= 212 and head[208:212] == b"MAP ":
        return "volume"
    raise FormatError(f"{path}: neither a coefficient file nor an MRC volume")


def cmd_evaluate(args) -> int:
    kind_ref = _sniff_kind(args.reference)
    kind_cand = _sniff_kind(args.candidate)
    if kind_ref != kind_cand:
        raise ValueError("reference and candidate must both be coefficient "
                         "files or both MRC volumes")
    _ensure_outdir(args.out)
    pairs = []
    if kind_ref == "coefficients":
        reference = _io.read_coefficients(args.reference)
        candidate = _io.read_coefficients(args.candidate)
        alignment = align_globally(reference, candidate,
                                   grid_resolution=args.grid_res)
        size = args.size
        if size < 2 * reference.spec.support_radius:
            raise ValueError(f"--size {size} is below twice the support "
                             f"radius {reference.spec.support_radius}")
        vol_ref = synthesize_real_grid(reference, size, args.voxel)
        vol_cand = synthesize_real_grid(alignment.aligned, size, args.voxel)
        curve = fsc(vol_ref, vol_cand)
        q = alignment.rotation.quaternion
        pairs += [
            ("correlation", alignment.correlation),
            ("hand", alignment.hand),
            ("rotation_quaternion", " ".join(f"{v:.17g}" for v in q)),
        ]
        print(f"correlation={alignment.correlation:.6g}")
    else:
        data_ref, vox_ref = _io.read_mrc(args.reference)
        data_cand, vox_cand = _io.read_mrc(args.candidate)
        if data_ref.shape != data_cand.shape:
            raise ValueError("volumes have different grid sizes")
        if abs(vox_ref - vox_cand) > 1e-6 * max(vox_ref, vox_cand):
            raise ValueError("volumes have different voxel sizes")
        if data_ref.ndim != 3 or len(set(data_ref.shape)) != 1:
            raise ValueError("volumes must be cubes")
        pairs.append(("alignment", "skipped (grid inputs are compared as stored)"))
        curve = fsc(VolumeGrid(data_ref, vox_ref), VolumeGrid(data_cand, vox_cand))
    estimate = resolution_at_threshold(curve, args.fsc_threshold)
    fsc_path = os.path.join(args.out, "fsc.csv")
    curve.to_csv(fsc_path)
    pairs += [
        ("fsc_threshold", args.fsc_threshold),
        ("resolution_A", estimate.resolution),
        ("crossing_frequency_per_A", estimate.frequency),
        ("nyquist_limited", estimate.nyquist_limited),
    ]
    report_path = os.path.join(args.out, "alignment.txt")
    _write_report(report_path, pairs)
    _io.write_manifest(
        os.path.join(args.out, "manifest.json"), "evaluate",
        {"fsc_threshold": args.fsc_threshold, "grid_res": args.grid_res,
         "size": args.size, "voxel": args.voxel},
        outputs={"fsc": fsc_path, "report": report_path},
        inputs={"reference": args.reference, "candidate": args.candidate})
    print(f"resolution_A={estimate.resolution:.6g}"
          + (" (Nyquist limited)" if estimate.nyquist_limited else ""))
    return 0


def cmd_expand(args) -> int:
    data, voxel = _io.read_mrc(args.volume)
    if data.ndim != 3 or len(set(data.shape)) != 1:
        raise ValueError("expand requires a cubic MRC volume")
    if args.voxel is not None:
        voxel = args.voxel
    spec = BasisSpec.create(args.c, args.L, args.R)
    if data.shape[0] < 2 * spec.support_radius:
        raise ValueError(f"cube side {data.shape[0]} is below twice the "
                         f"support radius {spec.support_radius}")
    coeffs, diagnostics = expand_from_grid(VolumeGrid(data, voxel), spec)
    _ensure_outdir(args.out)
    coef_path = os.path.join(args.out, "coefficients.kamcoef")
    report_path = os.path.join(args.out, "expand_diagnostics.txt")
    _io.write_coefficients(coef_path, coeffs)
    _write_report(report_path, sorted(diagnostics.items()))
    _io.write_manifest(
        os.path.join(args.out, "manifest.json"), "expand",
        {"L": args.L, "c": args.c, "R": args.R, "voxel": voxel},
        outputs={"coefficients": coef_path, "diagnostics": report_path},
        inputs={"volume": args.volume})
    worst = max(v for k, v in diagnostics.items() if k.startswith("condition"))
    print(f"wrote coefficients to {coef_path} (max condition {worst:.3g})")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kamrec",
        description="Ab initio reconstruction from autocorrelation data "
                    "plus two projection images.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--L", type=int, default=6, help="maximum degree")
    sim.add_argument("--c", type=float, default=0.25,
                     help="bandlimit in cycles per pixel")
    sim.add_argument("--R", type=float, default=16.0,
                     help="support radius in pixels")
    sim.add_argument("--n", type=int, required=True, help="number of images")
    sim.add_argument("--snr", type=float, default=math.inf,
                     help="signal-to-noise power ratio; 'inf' for clean")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--degree-decay", type=float, default=1.0,
                     help="phantom spectral decay exponent over degree")
    sim.add_argument("--mrc-images", type=int, default=0, metavar="SIDE",
                     help="also write real-space projections as an MRC stack "
                          "with SIDE pixels per edge (0 disables)")
    sim.set_defaults(func=cmd_simulate)

    rec = sub.add_parser("reconstruct",
                         help="recover coefficients from spectrum + two images")
    rec.add_argument("--spectrum", required=True, help="kamcl spectrum file")
    rec.add_argument("--image1", required=True,
                     help="image stack file, KAMPOL1 or MRC")
    rec.add_argument("--image2", required=True,
                     help="image stack file (may equal --image1)")
    rec.add_argument("--index1", type=int, default=0,
                     help="image index within --image1")
    rec.add_argument("--index2", type=int, default=None,
                     help="image index within --image2 (default: 1 when the "
                          "files coincide, else 0)")
    rec.add_argument("--profile", required=True, help="kamprofile file")
    rec.add_argument("--out", required=True, help="output directory")
    rec.add_argument("--c", type=float, default=0.25,
                     help="bandlimit of the spectrum chart")
    rec.add_argument("--R", type=float, default=None,
                     help="support radius; inferred from sizes if omitted")
    rec.add_argument("--grid-res", type=float, default=0.15,
                     help="rotation grid resolution in radians")
    rec.add_argument("--starts", type=int, default=8,
                     help="multi-start batch size for matching")
    rec.add_argument("--max-starts", type=int, default=64)
    rec.add_argument("--shortlist", type=int, default=64,
                     help="grid candidates kept for exact rescoring")
    rec.add_argument("--top", type=int, default=5,
                     help="rescored candidates polished by refinement")
    rec.add_argument("--seed", type=int, default=0)
    rec.add_argument("--threads", type=int, default=None,
                     help="worker threads (default: KAM_THREADS or all cores)")
    rec.add_argument("--size", type=int, default=65,
                     help="cube side of the synthesized MRC volume")
    rec.add_argument("--voxel", type=float, default=1.0,
                     help="voxel size in Angstrom for the MRC volume")
    rec.set_defaults(func=cmd_reconstruct)

    ev = sub.add_parser("evaluate",
                        help="align, FSC, and resolution of two volumes")
    ev.add_argument("--reference", required=True,
                    help="coefficient file or MRC volume")
    ev.add_argument("--candidate", required=True,
                    help="coefficient file or MRC volume (same kind)")
    ev.add_argument("--out", required=True, help="output directory")
    ev.add_argument("--fsc-threshold", type=float, default=0.5)
    ev.add_argument("--grid-res", type=float, default=0.15,
                    help="alignment rotation grid resolution in radians")
    ev.add_argument("--size", type=int, default=65,
                    help="cube side used to synthesize coefficient inputs")
    ev.add_argument("--voxel", type=float, default=1.0,
                    help="voxel size in Angstrom for coefficient inputs")
    ev.set_defaults(func=cmd_evaluate)

    ex = sub.add_parser("expand",
                        help="project an MRC volume onto the coefficient basis")
    ex.add_argument("--volume", required=True, help="cubic MRC volume")
    ex.add_argument("--out", required=True, help="output directory")
    ex.add_argument("--L", type=int, required=True, help="maximum degree")
    ex.add_argument("--c", type=float, required=True,
                    help="bandlimit in cycles per voxel")
    ex.add_argument("--R", type=float, default=16.0,
                    help="support radius in voxels")
    ex.add_argument("--voxel", type=float, default=None,
                    help="override the voxel size stored in the MRC header")
    ex.set_defaults(func=cmd_expand)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    name = args.subcommand
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"kamrec {name}: invalid parameter: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"kamrec {name}: bad input file: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"kamrec {name}: I/O error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        stage = getattr(exc, "stage", name)
        print(f"kamrec {name}: numerical failure in stage '{stage}': {exc}",
              file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

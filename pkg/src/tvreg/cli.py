"""Command-line interface: register, warp, overlap, synth, certify.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
import argparse
import logging
import sys

import numpy as np

from . import _accel
from .evalmetrics import target_overlap
from .nifti import NiftiError, VolumeHeader, read_volume, write_volume
from .preprocess import AffineFormatError, apply_affine, nonzero_mask, normalize_robust, read_affine
from .registration import RegistrationParams, register
from .synthbench import KINDS, certify_solver, make_case
from .tvsolver import NumericalError
from .volume import warp_nearest, warp_scalar

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = RegistrationParams()


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dims(text):
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like X,Y,Z, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be three positive integers, got {text!r}")
    return dims


def build_parser():
    parser = _Parser(prog="tvreg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("register", help="deformably register a moving volume to a fixed one")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--out-disp", required=True)
    p.add_argument("--out-warped")
    p.add_argument("--alpha", type=float, default=DEFAULTS.alpha)
    p.add_argument("--levels", type=int, default=DEFAULTS.levels)
    p.add_argument("--warps", type=int, default=DEFAULTS.warps_per_level)
    p.add_argument("--max-iters", type=int, default=DEFAULTS.max_iters)
    p.add_argument("--delta", type=float, default=DEFAULTS.delta)
    p.add_argument("--c", type=float, default=DEFAULTS.c)
    p.add_argument("--threads", type=int)
    p.add_argument("--affine-init", help="4x4 text matrix applied to the moving volume first")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("warp", help="pull a volume through a displacement field")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--disp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--interp", choices=("linear", "nearest"), default="linear")

    p = sub.add_parser("overlap", help="target overlap of a label volume against a reference")
    p.add_argument("--test", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--per-label", metavar="CSV")

    p = sub.add_parser("synth", help="write a synthetic pair with known deformation")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--dims", type=_dims, required=True)
    p.add_argument("--amplitude", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.01,
                   help="noise std relative to the image std (default 0.01)")
    p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("certify", help="check the dual solver against an independent oracle")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--mode", choices=("conic", "descent"), default="conic")
    p.add_argument("--csv")
    return parser


def _read(path):
    try:
        return read_volume(path)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except NiftiError as exc:
        raise DataError(f"{path}: {exc}") from None


def _prepare(vol):
    return normalize_robust(vol, nonzero_mask(vol))


def cmd_register(args):
    if args.threads:
        _accel.set_threads(args.threads)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
        logging.getLogger("tvreg").setLevel(logging.DEBUG)
    try:
        params = RegistrationParams(alpha=args.alpha, levels=args.levels,
                                    warps_per_level=args.warps, max_iters=args.max_iters,
                                    delta=args.delta, c=args.c)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    fixed, fixed_hdr = _read(args.fixed)
    moving, _ = _read(args.moving)
    if fixed.ndim != 3 or moving.ndim != 3:
        raise DataError("register expects scalar volumes")
    moving = moving.astype(np.float64)
    fixed = fixed.astype(np.float64)
    if args.affine_init:
        try:
            moving = apply_affine(moving, read_affine(args.affine_init), target_shape=fixed.shape)
        except (OSError, AffineFormatError) as exc:
            raise DataError(f"{args.affine_init}: {exc}") from None
    if fixed.shape != moving.shape:
        raise DataError(f"dimension mismatch: fixed {fixed.shape} vs moving {moving.shape}")
    try:
        f_in, m_in = (fixed, moving) if args.no_normalize else (_prepare(fixed), _prepare(moving))
        result = register(f_in, m_in, params)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    u = result.displacement
    write_volume(args.out_disp, u, fixed_hdr)
    if args.out_warped:
        write_volume(args.out_warped, warp_scalar(moving, u), fixed_hdr)
    print(f"sad_initial={result.sad_initial:.6f} sad_final={result.sad_final:.6f}")
    return EXIT_OK


def cmd_warp(args):
    vol, hdr = _read(args.input)
    disp, _ = _read(args.disp)
    if disp.ndim != 4:
        raise DataError(f"{args.disp} is not a displacement (vector) volume")
    if disp.shape[1:] != vol.shape:
        raise DataError(f"dimension mismatch: volume {vol.shape} vs displacement {disp.shape[1:]}")
    if args.interp == "nearest":
        out = warp_nearest(vol, disp)
    else:
        out = warp_scalar(vol.astype(np.float64), disp)
    write_volume(args.out, out, hdr)
    return EXIT_OK


def cmd_overlap(args):
    test, _ = _read(args.test)
    ref, _ = _read(args.ref)
    try:
        _, report = target_overlap(test, ref)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if args.per_label:
        report.to_csv(args.per_label)
    print(report.summary())
    return EXIT_OK


def cmd_synth(args):
    try:
        case = make_case(args.kind, args.dims, args.amplitude, args.sigma, args.seed, args.noise)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    hdr = VolumeHeader(dims=args.dims)
    prefix = args.out_prefix
    write_volume(f"{prefix}_fixed.nii.gz", case.fixed, hdr)
    write_volume(f"{prefix}_moving.nii.gz", case.moving, hdr)
    write_volume(f"{prefix}_truth.nii.gz", case.truth, hdr)
    write_volume(f"{prefix}_fixed_labels.nii.gz", case.fixed_labels, hdr)
    write_volume(f"{prefix}_moving_labels.nii.gz", case.moving_labels, hdr)
    print(f"wrote {prefix}_{{fixed,moving,truth,fixed_labels,moving_labels}}.nii.gz")
    return EXIT_OK


def cmd_certify(args):
    if args.cases < 0:
        raise UsageError("--cases must be non-negative")
    report = certify_solver(n_cases=args.cases, seed=args.seed, mode=args.mode)
    print(report.to_text())
    if args.csv:
        report.to_csv(args.csv)
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {
    "register": cmd_register,
    "warp": cmd_warp,
    "overlap": cmd_overlap,
    "synth": cmd_synth,
    "certify": cmd_certify,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""One executable covering the full pipeline: phantom rasterization, forward
simulation, classical and learned inversions, training, stitched inference,
and evaluation.

Exit codes: 0 success, 1 input error (flags, files, geometry), 2 numerical
failure (NaN or divergence). Every subcommand accepts --seed and produces
bit-identical outputs for identical inputs and seed; subcommands without any
randomness simply ignore it. Config-file subcommands resolve each value as
flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .classical import (
    MediParams,
    TkdParams,
    build_medi_weights,
    cg_least_squares,
    medi_invert,
    tkd_invert,
)
from .config import last_value, read_config, read_config_items
from .dipole import build_dipole, forward_field, naive_inverse
from .errors import InputError, NumericalError, QsmError
from .gradcheck import F32_TOL, F64_TOL, LOSSES, OPS, run_suite
from .losses import LossWeights
from .metrics import RoiSet, psnr, rmse, roi_means, roi_regression, ssim3
from .network import (
    Generator,
    build_discriminator,
    build_generator,
    load_checkpoint,
    save_checkpoint,
)
from .phantom import (
    Box,
    PhantomSpec,
    SimulatedCase,
    Sphere,
    make_phantom,
    shape_coverage,
    simulate_case,
)
from .training import (
    TrainConfig,
    UnpairedDataset,
    infer_stitched,
    optimize_dip,
    train_cycleqsm,
    train_uqsm,
)
from .volume import Mask, RealVolume, VolumeMeta, read_mask, read_volume, write_volume


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to the input-error exit code."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")


def _convert(s: str, typ, key: str):
    try:
        if typ is bool:
            return _bool(s)
        return typ(s)
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise InputError(f"config key {key!r}: {exc}") from exc


def _numbers(value: str, n: int, key: str, typ=float) -> tuple:
    parts = value.replace(",", " ").split()
    if len(parts) != n:
        raise InputError(f"{key!r} needs {n} numbers, got {value!r}")
    try:
        return tuple(typ(p) for p in parts)
    except ValueError as exc:
        raise InputError(f"{key!r}: {exc}") from exc


def _write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, str)) else repr(float(v))
                        for v in row])


# ---------------------------------------------------------------- phantom


PHANTOM_SCALARS = ("dims", "voxel_size", "b0_dir", "background_chi", "seed")


def _phantom_spec(path: str) -> PhantomSpec:
    """Build a PhantomSpec from a key=value file.

    Scalar keys: dims, voxel_size, b0_dir, background_chi, seed (last
    assignment wins). Shape keys repeat and keep file order, later shapes
    overwriting earlier ones where they overlap:
      sphere = cx cy cz radius chi      (mm, mm, ppm)
      box    = cx cy cz ex ey ez chi    (corner, extents, ppm)
    """
    scalars: dict[str, str] = {}
    shapes = []
    for key, value in read_config_items(path):
        if key == "sphere":
            v = _numbers(value, 5, "sphere")
            shapes.append(Sphere((v[0], v[1], v[2]), v[3], v[4]))
        elif key == "box":
            v = _numbers(value, 7, "box")
            shapes.append(Box((v[0], v[1], v[2]), (v[3], v[4], v[5]), v[6]))
        elif key in PHANTOM_SCALARS:
            scalars[key] = value
        else:
            raise InputError(
                f"{path}: unknown key {key!r} (known: sphere, box, "
                f"{', '.join(PHANTOM_SCALARS)})")
    if "dims" not in scalars:
        raise InputError(f"{path}: missing required key 'dims'")
    meta = VolumeMeta(
        _numbers(scalars["dims"], 3, "dims", int),
        _numbers(scalars.get("voxel_size", "1 1 1"), 3, "voxel_size"),
        _numbers(scalars.get("b0_dir", "0 0 1"), 3, "b0_dir"))
    return PhantomSpec(
        meta, tuple(shapes),
        background_chi=_convert(scalars.get("background_chi", "0"), float,
                                "background_chi"),
        seed=_convert(scalars.get("seed", "0"), int, "seed"))


def cmd_phantom(args) -> int:
    spec = _phantom_spec(args.spec)
    write_volume(make_phantom(spec), args.out)
    if args.mask_out:
        write_volume(shape_coverage(spec), args.mask_out)
    return 0


# ------------------------------------------------- forward and inversions


def cmd_forward(args) -> int:
    chi = read_volume(args.chi)
    if args.kernel_out:
        kernel = build_dipole(chi.meta)
        write_volume(RealVolume(chi.meta, kernel.spectrum), args.kernel_out)
    if args.mask:
        case = simulate_case(chi, read_mask(args.mask), args.noise_sigma,
                             args.seed)
        field = case.field
        if args.mag_out:
            write_volume(case.magnitude, args.mag_out)
    else:
        if args.mag_out:
            raise InputError("--mag-out needs --mask (magnitude is the mask "
                             "indicator)")
        if args.noise_sigma < 0:
            raise InputError(
                f"noise_sigma must be >= 0, got {args.noise_sigma}")
        field = forward_field(chi, build_dipole(chi.meta))
        if args.noise_sigma > 0:
            rng = np.random.default_rng(args.seed)
            field = RealVolume(chi.meta, field.data + rng.normal(
                0.0, args.noise_sigma, size=chi.meta.dims))
    write_volume(field, args.out)
    return 0


def cmd_naive(args) -> int:
    field = read_volume(args.field)
    out = naive_inverse(field, build_dipole(field.meta), eps=args.eps)
    write_volume(out, args.out)
    return 0


def cmd_tkd(args) -> int:
    field = read_volume(args.field)
    out = tkd_invert(field, build_dipole(field.meta), TkdParams(a=args.a))
    write_volume(out, args.out)
    return 0


def cmd_medi(args) -> int:
    field = read_volume(args.field)
    weights = build_medi_weights(read_volume(args.magnitude),
                                 edge_fraction=args.edge_fraction)
    params = MediParams(lam=args.lam, edge_fraction=args.edge_fraction,
                        iters=args.iters, step=args.step)
    out, trace = medi_invert(field, build_dipole(field.meta), weights, params)
    write_volume(out, args.out)
    if args.trace:
        _write_csv(args.trace,
                   ["iteration", "objective", "data_term", "reg_term"], trace)
    return 0


def cmd_cgls(args) -> int:
    field = read_volume(args.field)
    weights = read_volume(args.weights) if args.weights else None
    out, residuals = cg_least_squares(field, build_dipole(field.meta),
                                      weights, iters=args.iters, tol=args.tol)
    write_volume(out, args.out)
    if args.trace:
        # the CGLS objective is the squared weighted residual; it has no
        # regularizer, so the reg column is identically zero
        rows = [(i, r * r, r * r, 0.0) for i, r in enumerate(residuals)]
        _write_csv(args.trace,
                   ["iteration", "objective", "data_term", "reg_term"], rows)
    return 0


# ------------------------------------------------------ trained pipelines


def _resolve(args, cfg: dict, key: str, typ, default):
    flag = getattr(args, key)
    if flag is not None:
        return flag
    s = last_value(cfg, key)
    if s is not None:
        return _convert(s, typ, key)
    return default


def _add_table_flags(p: argparse.ArgumentParser, table) -> None:
    for key, typ, default, help_ in table:
        p.add_argument(f"--{key.replace('_', '-')}",
                       type=_bool if typ is bool else typ, default=None,
                       metavar="BOOL" if typ is bool else None,
                       help=f"{help_} (default {default})")


def _read_table(args, table) -> dict:
    cfg_path = getattr(args, "config", None)
    cfg = read_config(cfg_path) if cfg_path else {}
    known = {key for key, *_ in table}
    for k in cfg:
        if k not in known:
            raise InputError(
                f"unknown config key {k!r} (known: {', '.join(sorted(known))})")
    return {key: _resolve(args, cfg, key, typ, default)
            for key, typ, default, _ in table}


_D = TrainConfig()
_W = LossWeights()

TRAIN_TABLE = [
    ("epochs", int, _D.epochs, "training epochs"),
    ("patches_per_epoch", int, _D.patches_per_epoch,
     "patch groups sampled per epoch"),
    ("patch_size", int, _D.patch_size, "cubic patch side in voxels"),
    ("infer_stride", int, None,
     "stitched-inference stride; None means half the patch"),
    ("lr", float, _D.lr, "Adam learning rate for both networks"),
    ("beta1", float, _D.beta1, "Adam first-moment decay"),
    ("beta2", float, _D.beta2, "Adam second-moment decay"),
    ("gamma", float, _W.gamma, "cycle-consistency weight"),
    ("eta", float, _W.eta, "gradient-difference weight"),
    ("rho", float, _W.rho, "total-variation weight"),
    ("gan", float, _W.gan,
     "adversarial weight on the generator; 0 trains on the "
     "non-adversarial terms alone"),
    ("seed", int, _D.seed, "seed for sampling and augmentation"),
    ("d_steps_per_g_step", int, _D.d_steps_per_g_step,
     "discriminator updates per generator step"),
    ("batch_size", int, _D.batch_size, "patch groups per step"),
    ("norm", str, _D.norm, "residual norm, l1 or l2"),
    ("mask_losses", bool, _D.mask_losses,
     "apply masks inside the cycle/gradient/tv residuals"),
    ("gen_depth", int, 3, "generator U-Net depth"),
    ("gen_channels", int, 16, "generator base channels"),
    ("gen_seed", int, 0, "generator init seed"),
    ("disc_layers", int, 3, "discriminator strided conv layers"),
    ("disc_channels", int, 16, "discriminator base channels"),
    ("disc_seed", int, 1, "discriminator init seed"),
]

UQSM_TABLE = [row for row in TRAIN_TABLE
              if row[0] in ("epochs", "patches_per_epoch", "patch_size",
                            "lr", "beta1", "beta2", "seed", "batch_size",
                            "gen_depth", "gen_channels", "gen_seed")]
UQSM_TABLE.append(("lam", float, 1e-3, "total-variation weight"))

DIP_TABLE = [
    ("lam", float, 1e-3, "total-variation weight"),
    ("iters", int, 200, "optimization iterations"),
    ("lr", float, 1e-3, "Adam learning rate"),
    ("seed", int, 0, "seed for init and the fixed noise input"),
    ("depth", int, 3, "U-Net depth"),
    ("channels", int, 8, "U-Net base channels"),
    ("beta1", float, 0.5, "Adam first-moment decay"),
    ("beta2", float, 0.999, "Adam second-moment decay"),
]

INFER_TABLE = [
    ("patch_size", int, _D.patch_size, "cubic patch side in voxels"),
    ("infer_stride", int, None,
     "window stride; None means half the patch"),
]


def _train_config(vals: dict) -> TrainConfig:
    return TrainConfig(
        epochs=vals["epochs"], patches_per_epoch=vals["patches_per_epoch"],
        patch_size=vals["patch_size"],
        infer_stride=vals.get("infer_stride"),
        lr=vals["lr"], beta1=vals["beta1"], beta2=vals["beta2"],
        weights=LossWeights(vals.get("gamma", _W.gamma),
                            vals.get("eta", _W.eta),
                            vals.get("rho", _W.rho),
                            vals.get("gan", _W.gan)),
        seed=vals["seed"],
        d_steps_per_g_step=vals.get("d_steps_per_g_step",
                                    _D.d_steps_per_g_step),
        batch_size=vals["batch_size"], norm=vals.get("norm", _D.norm),
        mask_losses=vals.get("mask_losses", _D.mask_losses))


def _ones_volume(meta: VolumeMeta) -> RealVolume:
    return RealVolume(meta, np.ones(meta.dims))


def _field_cases(field_paths, mag_paths, mask_paths) -> tuple:
    """Assemble measurement-side cases from volume files.

    The ground-truth slot is a zero placeholder: training reads only the
    field, magnitude, and mask of each case.
    """
    for name, paths in (("--mags", mag_paths), ("--masks", mask_paths)):
        if paths and len(paths) != len(field_paths):
            raise InputError(
                f"{name} must list one file per --fields entry "
                f"({len(paths)} vs {len(field_paths)})")
    cases = []
    for i, fp in enumerate(field_paths):
        field = read_volume(fp)
        mag = (read_volume(mag_paths[i]) if mag_paths
               else _ones_volume(field.meta))
        mask = (read_mask(mask_paths[i]) if mask_paths
                else Mask(field.meta, np.ones(field.meta.dims)))
        cases.append(SimulatedCase(
            chi=RealVolume(field.meta, np.zeros(field.meta.dims)),
            field=field, magnitude=mag, mask=mask))
    return tuple(cases)


def cmd_train(args) -> int:
    vals = _read_table(args, TRAIN_TABLE)
    cases = _field_cases(args.fields, args.mags, args.masks)
    chis = tuple(read_volume(p) for p in args.chis)
    ds = UnpairedDataset(cases, chis)
    gen = build_generator(depth=vals["gen_depth"],
                          base_channels=vals["gen_channels"],
                          seed=vals["gen_seed"])
    disc = build_discriminator(n_layers=vals["disc_layers"],
                               base_channels=vals["disc_channels"],
                               seed=vals["disc_seed"])
    gen, rows = train_cycleqsm(ds, gen, disc, _train_config(vals),
                               checkpoint_dir=args.checkpoint_dir,
                               log_path=args.log)
    save_checkpoint(gen, args.out_gen)
    if args.out_disc:
        save_checkpoint(disc, args.out_disc)
    print(f"trained {len(rows)} generator steps; "
          f"final total {rows[-1].total:.6g}")
    return 0


def _load_generator(path: str) -> Generator:
    model = load_checkpoint(path)
    if not isinstance(model, Generator):
        raise InputError(f"checkpoint {path} does not hold a generator")
    return model


def cmd_infer(args) -> int:
    vals = _read_table(args, INFER_TABLE)
    gen = _load_generator(args.gen)
    field = read_volume(args.field)
    magnitude = read_volume(args.magnitude) if args.magnitude else None
    mask = read_mask(args.mask) if args.mask else None
    cfg = TrainConfig(patch_size=vals["patch_size"],
                      infer_stride=vals["infer_stride"])
    write_volume(infer_stitched(gen, field, magnitude, mask, cfg), args.out)
    return 0


def cmd_dip(args) -> int:
    vals = _read_table(args, DIP_TABLE)
    field = read_volume(args.field)
    magnitude = read_volume(args.magnitude) if args.magnitude else None
    mask = read_mask(args.mask) if args.mask else None
    out, trace = optimize_dip(
        field, magnitude, mask, build_dipole(field.meta), lam=vals["lam"],
        iters=vals["iters"], lr=vals["lr"], seed=vals["seed"],
        depth=vals["depth"], base_channels=vals["channels"],
        beta1=vals["beta1"], beta2=vals["beta2"])
    write_volume(out, args.out)
    if args.trace:
        _write_csv(args.trace, ["iteration", "objective"],
                   list(enumerate(trace)))
    return 0


def cmd_uqsm(args) -> int:
    vals = _read_table(args, UQSM_TABLE)
    cases = _field_cases(args.fields, args.mags, args.masks)
    # the sampler draws from both dataset sides; this objective never reads
    # the chi side, so a zero volume stands in
    ds = UnpairedDataset(
        cases, (RealVolume(cases[0].field.meta,
                           np.zeros(cases[0].field.meta.dims)),))
    gen = build_generator(depth=vals["gen_depth"],
                          base_channels=vals["gen_channels"],
                          seed=vals["gen_seed"])
    gen, trace = train_uqsm(ds, gen, _train_config(vals), lam=vals["lam"],
                            checkpoint_dir=args.checkpoint_dir)
    save_checkpoint(gen, args.out_gen)
    if args.trace:
        _write_csv(args.trace, ["iteration", "objective"],
                   list(enumerate(trace)))
    print(f"trained {len(trace)} steps; final objective {trace[-1]:.6g}")
    return 0


# -------------------------------------------------------------- evaluation


def _parse_rois(pairs) -> RoiSet:
    rois = []
    for pair in pairs:
        name, sep, path = pair.partition("=")
        if not sep or not name or not path:
            raise InputError(f"--roi expects NAME=PATH, got {pair!r}")
        rois.append((name, read_mask(path)))
    return RoiSet(tuple(rois))


def cmd_eval(args) -> int:
    truth = read_volume(args.truth)
    recon = read_volume(args.recon)
    mask = read_mask(args.mask) if args.mask else None
    header = ["RMSE (%)", "PSNR (dB)", "SSIM"]
    row = [rmse(truth, recon, mask), psnr(truth, recon, mask),
           ssim3(truth, recon, mask, window=args.window)]
    if args.roi:
        rois = _parse_rois(args.roi)
        reg = roi_regression(truth, recon, rois, mode=args.roi_mode)
        header += ["Slope", "Intercept", "R2", "Corr", "MeanAbsErr",
                   "StdAbsErr"]
        row += [reg.slope, reg.intercept, reg.r_squared, reg.corr,
                reg.mean_abs_error, reg.std_abs_error]
        if args.roi_means:
            _write_csv(args.roi_means, ["name", "mean", "std"],
                       roi_means(recon, rois))
    elif args.roi_means:
        raise InputError("--roi-means needs at least one --roi")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerow([repr(float(v)) for v in row])
    if args.out:
        _write_csv(args.out, header, [row])
    return 0


def cmd_gradcheck(args) -> int:
    families = OPS + LOSSES
    failures = []
    for dtype, tol, name in ((np.float32, F32_TOL, "float32"),
                             (np.float64, F64_TOL, "float64")):
        results = run_suite(dtype, n_cases=args.cases, samples=args.samples,
                            ops=families, seed=args.seed)
        for op, err in results.items():
            status = "ok" if err < tol else "FAIL"
            print(f"{name} {op:17s} {err:9.3e} {status}")
            if err >= tol:
                failures.append(f"{name}/{op}: {err:.3e}")
        worst = max(results, key=results.get)
        print(f"{name} worst: {worst} {results[worst]:.3e} (tol {tol:g})")
    if failures:
        raise NumericalError(
            "gradient checks exceeded tolerance: " + "; ".join(failures))
    print("all gradient checks passed")
    return 0


# ------------------------------------------------------------------ parser


def _add_seed(p: argparse.ArgumentParser, help_: str = "random seed") -> None:
    p.add_argument("--seed", type=int, default=0, help=f"{help_} (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="qsmkit",
        description="Desk-scale quantitative susceptibility mapping: "
                    "phantoms, dipole physics, classical and learned "
                    "inversions, and evaluation.")
    parser.add_argument("--version", action="version",
                        version=f"qsmkit {__version__}")
    parser.add_argument(
        "--threads", type=int, default=1,
        help="worker fan-out; every current routine is single-threaded, so "
             "values above 1 change nothing (default 1)")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="SUBCOMMAND")

    p = sub.add_parser("phantom", help="rasterize a shape-list config file",
                       description="Rasterize the shapes in --spec over a "
                                   "constant background; later shapes "
                                   "overwrite earlier ones.")
    p.add_argument("--spec", required=True,
                   help="key=value file: dims, voxel_size, b0_dir, "
                        "background_chi, seed, and repeated sphere/box lines")
    p.add_argument("--out", required=True, help="output chi volume (DBV1)")
    p.add_argument("--mask-out",
                   help="also write the union of all shapes as a mask")
    _add_seed(p, "unused; the --spec file's own seed governs")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("forward", help="simulate the field of a chi volume",
                       description="Apply the dipole forward operator, "
                                   "optionally adding white Gaussian noise.")
    p.add_argument("--chi", required=True, help="input chi volume (DBV1)")
    p.add_argument("--out", required=True, help="output field volume (DBV1)")
    p.add_argument("--noise-sigma", type=float, default=0.0,
                   help="white noise standard deviation (default 0)")
    p.add_argument("--mask", help="mask volume; attaches the indicator "
                                  "magnitude convention")
    p.add_argument("--mag-out", help="write the magnitude (needs --mask)")
    p.add_argument("--kernel-out",
                   help="write the dipole spectrum on this grid (DBV1)")
    _add_seed(p, "noise seed")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("naive", help="direct division inverse",
                       description="Divide by the dipole spectrum with an "
                                   "epsilon floor; the ill-posedness "
                                   "baseline.")
    p.add_argument("--field", required=True, help="input field (DBV1)")
    p.add_argument("--out", required=True, help="output chi (DBV1)")
    p.add_argument("--eps", type=float, default=1e-6,
                   help="division floor (default 1e-06)")
    _add_seed(p, "unused; this inverse is deterministic")
    p.set_defaults(func=cmd_naive)

    p = sub.add_parser("tkd", help="thresholded k-space division",
                       description="Clamp the dipole spectrum at threshold "
                                   "a before dividing.")
    p.add_argument("--field", required=True, help="input field (DBV1)")
    p.add_argument("--out", required=True, help="output chi (DBV1)")
    p.add_argument("--a", type=float, default=0.1,
                   help="spectrum threshold (default 0.1)")
    _add_seed(p, "unused; this inverse is deterministic")
    p.set_defaults(func=cmd_tkd)

    p = sub.add_parser(
        "medi", help="weighted data fidelity plus edge-masked TV",
        description="Gradient descent with backtracking on "
                    "||W(b - Hx)||^2 + lam * sum_c ||M_c grad_c x||_1; "
                    "W and M derive from the magnitude image.")
    p.add_argument("--field", required=True, help="input field (DBV1)")
    p.add_argument("--magnitude", required=True,
                   help="magnitude image for the weights (DBV1)")
    p.add_argument("--out", required=True, help="output chi (DBV1)")
    p.add_argument("--lam", type=float, default=600.0,
                   help="regularization weight (default 600)")
    p.add_argument("--edge-fraction", type=float, default=0.3,
                   help="fraction of strongest magnitude edges released "
                        "from the TV penalty (default 0.3)")
    p.add_argument("--iters", type=int, default=300,
                   help="iterations (default 300)")
    p.add_argument("--step", type=float, default=1.0,
                   help="initial step size (default 1)")
    p.add_argument("--trace", help="write the objective trace CSV here")
    _add_seed(p, "unused; this solver is deterministic")
    p.set_defaults(func=cmd_medi)

    p = sub.add_parser("cgls", help="conjugate-gradient least squares",
                       description="Unregularized weighted least squares, "
                                   "the lam -> 0 reference solver.")
    p.add_argument("--field", required=True, help="input field (DBV1)")
    p.add_argument("--out", required=True, help="output chi (DBV1)")
    p.add_argument("--weights", help="data weight volume W (DBV1)")
    p.add_argument("--iters", type=int, default=50,
                   help="maximum iterations (default 50)")
    p.add_argument("--tol", type=float, default=1e-10,
                   help="relative residual stop (default 1e-10)")
    p.add_argument("--trace", help="write the objective trace CSV here")
    _add_seed(p, "unused; this solver is deterministic")
    p.set_defaults(func=cmd_cgls)

    p = sub.add_parser(
        "train", help="adversarial unpaired training",
        description="Train the dipole-inversion generator on unpaired "
                    "field and chi volumes. Values resolve as flag > "
                    "--config file > default.")
    p.add_argument("--fields", nargs="+", required=True,
                   help="field volumes (DBV1), the measurement side")
    p.add_argument("--chis", nargs="+", required=True,
                   help="chi volumes (DBV1), the unpaired label side")
    p.add_argument("--mags", nargs="+",
                   help="magnitude volume per field (default all ones)")
    p.add_argument("--masks", nargs="+",
                   help="mask per field (default all ones)")
    p.add_argument("--out-gen", required=True,
                   help="write the trained generator here (DBC1)")
    p.add_argument("--out-disc", help="also write the discriminator (DBC1)")
    p.add_argument("--checkpoint-dir", help="per-epoch checkpoints go here")
    p.add_argument("--log", help="write the per-step loss CSV here")
    p.add_argument("--config", help="key=value file mirroring the flag "
                                    "names below")
    _add_table_flags(p, TRAIN_TABLE)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "infer", help="stitched full-volume inference",
        description="Run a trained generator over sliding windows and "
                    "average the overlaps.")
    p.add_argument("--field", required=True, help="input field (DBV1)")
    p.add_argument("--gen", required=True, help="generator checkpoint (DBC1)")
    p.add_argument("--out", required=True, help="output chi (DBV1)")
    p.add_argument("--magnitude", help="magnitude volume (default all ones)")
    p.add_argument("--mask", help="mask applied to the stitched output")
    p.add_argument("--config", help="key=value file mirroring the flag "
                                    "names below")
    _add_table_flags(p, INFER_TABLE)
    _add_seed(p, "unused; inference is deterministic")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser(
        "dip", help="per-volume deep-prior inversion",
        description="Fit a freshly initialized network to one field volume "
                    "through the phasor data term plus TV; no training "
                    "data involved.")
    p.add_argument("--field", required=True, help="input field (DBV1)")
    p.add_argument("--out", required=True, help="output chi (DBV1)")
    p.add_argument("--magnitude", help="data weight (default all ones)")
    p.add_argument("--mask", help="restricts the data term and the output")
    p.add_argument("--trace", help="write the objective trace CSV here")
    p.add_argument("--config", help="key=value file mirroring the flag "
                                    "names below")
    _add_table_flags(p, DIP_TABLE)
    p.set_defaults(func=cmd_dip)

    p = sub.add_parser(
        "uqsm", help="field-only network training",
        description="Train the generator across field patches on the "
                    "phasor data term plus TV; no chi labels and no "
                    "discriminator.")
    p.add_argument("--fields", nargs="+", required=True,
                   help="field volumes (DBV1)")
    p.add_argument("--mags", nargs="+",
                   help="magnitude volume per field (default all ones)")
    p.add_argument("--masks", nargs="+",
                   help="mask per field (default all ones)")
    p.add_argument("--out-gen", required=True,
                   help="write the trained generator here (DBC1)")
    p.add_argument("--checkpoint-dir", help="per-epoch checkpoints go here")
    p.add_argument("--trace", help="write the objective trace CSV here")
    p.add_argument("--config", help="key=value file mirroring the flag "
                                    "names below")
    _add_table_flags(p, UQSM_TABLE)
    p.set_defaults(func=cmd_uqsm)

    p = sub.add_parser(
        "eval", help="reconstruction quality metrics",
        description="Print a one-row CSV of RMSE (%), PSNR (dB), and SSIM, "
                    "plus regression statistics when ROIs are given.")
    p.add_argument("--truth", required=True, help="ground truth chi (DBV1)")
    p.add_argument("--recon", required=True, help="reconstruction (DBV1)")
    p.add_argument("--mask", help="evaluate inside this mask only "
                                  "(default whole volume)")
    p.add_argument("--window", type=int, default=7,
                   help="SSIM window side (default 7)")
    p.add_argument("--roi", action="append", metavar="NAME=PATH",
                   help="named region mask; repeat per region")
    p.add_argument("--roi-mode", choices=("voxels", "means"),
                   default="voxels",
                   help="regress pooled voxels or one point per region "
                        "(default voxels)")
    p.add_argument("--roi-means", help="write per-region mean/std CSV here")
    p.add_argument("--out", help="also write the metrics row to this CSV")
    _add_seed(p, "unused; metrics are deterministic")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "gradcheck", help="finite-difference gradient audit",
        description="Check every autodiff op and loss against central "
                    "differences in both precisions; nonzero exit on any "
                    "tolerance breach.")
    p.add_argument("--cases", type=int, default=20,
                   help="random cases per family (default 20)")
    p.add_argument("--samples", type=int, default=8,
                   help="probed coordinates per tensor (default 8)")
    _add_seed(p, "shifts every case's data and probes")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("qsmkit: error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"qsmkit: numerical failure: {exc}", file=sys.stderr)
        return 2
    except QsmError as exc:
        print(f"qsmkit: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"qsmkit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Patch sampling, augmentation, the unpaired adversarial training loop,
per-volume deep-prior optimization, field-only phasor training, and stitched
full-volume inference.

Determinism contract: every routine that draws randomness takes a seed or an
explicit rng, consumes it in a documented order, and mutates parameters only
from the loop body, so identical (dataset, config, seed) reproduce identical
parameter trajectories, logs, and outputs bit for bit on one thread.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dipole import DipoleKernel, build_dipole
from .errors import InputError, NumericalError
from .losses import (
    LossReport,
    LossWeights,
    apply_generator,
    dip_loss,
    lsgan_losses,
    total_generator_loss,
)
from .network import (
    AdamState,
    Discriminator,
    Generator,
    adam_step,
    build_generator,
    forward_generator,
    save_checkpoint,
)
from .phantom import SimulatedCase
from .volume import Mask, RealVolume, VolumeMeta

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for the patch-based trainers.

    ``infer_stride`` of None means half the patch size. ``patches_per_epoch``
    counts sampled patch groups; generator steps per epoch are
    patches_per_epoch // batch_size (floored, at least one).
    """

    epochs: int = 50
    patches_per_epoch: int = 256
    patch_size: int = 16
    infer_stride: int | None = None
    lr: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.999
    weights: LossWeights = LossWeights()
    seed: int = 0
    d_steps_per_g_step: int = 1
    batch_size: int = 1
    norm: str = "l1"
    mask_losses: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.patches_per_epoch < 1:
            raise InputError("epochs and patches_per_epoch must be >= 1")
        if self.patch_size < 2:
            raise InputError(f"patch_size must be >= 2, got {self.patch_size}")
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise InputError(f"lr must be finite and > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise InputError(f"{name} must be in [0, 1), got {v}")
        if self.d_steps_per_g_step < 1 or self.batch_size < 1:
            raise InputError("d_steps_per_g_step and batch_size must be >= 1")
        if self.norm not in ("l1", "l2"):
            raise InputError(f"norm must be 'l1' or 'l2', got {self.norm!r}")
        if not 1 <= self.stride <= self.patch_size:
            raise InputError(
                f"infer_stride must be in [1, patch_size], got {self.infer_stride}")

    @property
    def stride(self) -> int:
        if self.infer_stride is not None:
            return self.infer_stride
        return max(1, self.patch_size // 2)


@dataclass(frozen=True)
class UnpairedDataset:
    """Two unpaired sample sets: simulated field cases and chi volumes.

    No pairing between the lists is assumed or used; each draw picks an
    independent uniform index into each list. All volumes must share voxel
    size and field direction so a single patch-grid kernel serves every draw.
    """

    field_cases: tuple[SimulatedCase, ...]
    chi_volumes: tuple[RealVolume, ...]

    def __post_init__(self):
        object.__setattr__(self, "field_cases", tuple(self.field_cases))
        object.__setattr__(self, "chi_volumes", tuple(self.chi_volumes))
        if not self.field_cases or not self.chi_volumes:
            raise InputError(
                "dataset needs at least one field case and one chi volume")
        ref = self.field_cases[0].field.meta
        for case in self.field_cases:
            self._check_meta(case.field.meta, ref)
        for vol in self.chi_volumes:
            self._check_meta(vol.meta, ref)

    @staticmethod
    def _check_meta(meta: VolumeMeta, ref: VolumeMeta) -> None:
        if meta.voxel_size != ref.voxel_size or meta.b0_dir != ref.b0_dir:
            raise InputError(
                "all dataset volumes must share voxel size and b0 direction")

    def patch_meta(self, patch_size: int) -> VolumeMeta:
        ref = self.field_cases[0].field.meta
        return VolumeMeta((patch_size,) * 3, ref.voxel_size, ref.b0_dir)


def _check_fits(dims: tuple[int, int, int], p: int) -> None:
    if min(dims) < p:
        raise InputError(f"volume dims {dims} smaller than patch size {p}")


def _origin(rng: np.random.Generator, dims, p: int) -> tuple[int, ...]:
    return tuple(int(rng.integers(n - p + 1)) for n in dims)


def _slices(origin, p: int):
    return tuple(slice(o, o + p) for o in origin)


def sample_patches(ds: UnpairedDataset, cfg: TrainConfig,
                   rng: np.random.Generator, count: int = 1):
    """Draw ``count`` unpaired patch groups of side cfg.patch_size.

    Per group, in fixed rng order: field case index, field origin (three
    uniform ints over valid starts), chi volume index, chi origin. Magnitude
    and mask patches ride with the field draw; the chi patch comes from an
    independently chosen volume and position. Returns (field_patches,
    chi_patches, mask_patches) with field_patches a list of
    (phase, magnitude) array pairs.
    """
    p = cfg.patch_size
    for case in ds.field_cases:
        _check_fits(case.field.meta.dims, p)
    for vol in ds.chi_volumes:
        _check_fits(vol.meta.dims, p)
    field_patches, chi_patches, mask_patches = [], [], []
    for _ in range(count):
        case = ds.field_cases[int(rng.integers(len(ds.field_cases)))]
        f_sl = _slices(_origin(rng, case.field.meta.dims, p), p)
        vol = ds.chi_volumes[int(rng.integers(len(ds.chi_volumes)))]
        c_sl = _slices(_origin(rng, vol.meta.dims, p), p)
        field_patches.append((case.field.data[f_sl].copy(),
                              case.magnitude.data[f_sl].copy()))
        mask_patches.append(case.mask.data[f_sl].copy())
        chi_patches.append(vol.data[c_sl].copy())
    return field_patches, chi_patches, mask_patches


def _aligned_axis(b0_dir) -> int | None:
    b = np.asarray(b0_dir, dtype=np.float64)
    if b.shape != (3,) or not np.all(np.isfinite(b)) or not b.any():
        raise InputError(f"b0 direction must be a finite nonzero 3-vector, "
                         f"got {b0_dir}")
    b = b / np.linalg.norm(b)
    axis = int(np.argmax(np.abs(b)))
    return axis if abs(abs(b[axis]) - 1.0) < 1e-12 else None


def augment(patch_group, rng: np.random.Generator,
            b0_dir=(0.0, 0.0, 1.0)) -> list[np.ndarray]:
    """Random per-axis flips plus a k*90 degree rotation about the field axis.

    Every array in the group receives the identical transform. The draw order
    is fixed (three flip coins, then k) independent of b0, so the rng stream
    does not depend on the field direction. An oblique b0 admits no
    grid-aligned rotation plane; rotation is then skipped with a logged
    notice and only flips apply.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in patch_group]
    if not arrays:
        raise InputError("empty patch group")
    shape = arrays[0].shape
    if len(shape) != 3:
        raise InputError(f"patches must be 3D, got shape {shape}")
    for a in arrays[1:]:
        if a.shape != shape:
            raise InputError("patch group shapes differ")
    flips = rng.integers(0, 2, size=3)
    k = int(rng.integers(4))
    axis = _aligned_axis(b0_dir)
    if axis is None:
        log.info("b0 %s is not axis-aligned; rotation augmentation skipped",
                 tuple(b0_dir))
    plane = tuple(i for i in range(3) if i != axis)
    if axis is not None and k % 2 and shape[plane[0]] != shape[plane[1]]:
        raise InputError(
            f"90 degree rotation needs equal lengths on axes {plane}, "
            f"got {shape}")
    out = []
    for a in arrays:
        for ax in range(3):
            if flips[ax]:
                a = np.flip(a, axis=ax)
        if axis is not None and k:
            a = np.rot90(a, k, axes=plane)
        out.append(np.ascontiguousarray(a))
    return out


def _to_tensor(arr: np.ndarray) -> Tensor:
    return Tensor(arr[None].astype(np.float32))


def _grads(params: dict[str, Tensor]) -> dict[str, np.ndarray | None]:
    return {n: t.grad for n, t in params.items()}


def _draw_batch(ds, cfg, rng, b0_dir):
    field_p, chi_p, mask_p = sample_patches(ds, cfg, rng, cfg.batch_size)
    chi_b, b_b, mag_b, mask_b = [], [], [], []
    for (phase, mag), chi, mask in zip(field_p, chi_p, mask_p):
        phase, mag, chi, mask = augment([phase, mag, chi, mask], rng, b0_dir)
        b_b.append(_to_tensor(phase))
        mag_b.append(_to_tensor(mag))
        chi_b.append(_to_tensor(chi))
        mask_b.append(_to_tensor(mask))
    return chi_b, b_b, mag_b, mask_b


def _disc_patch_check(disc: Discriminator, p: int) -> None:
    n = p
    for _ in range(disc.n_layers):
        n = (n - 2) // 2 + 1
    if n < 2:
        raise InputError(
            f"patch_size {p} leaves a {n}-wide map after {disc.n_layers} "
            f"strided layers; the 4-wide head needs at least 2")


def _params_finite(*models) -> bool:
    return all(np.isfinite(t.data).all()
               for m in models for t in m.params.values())


def _halt(gen, disc, ckdir, epoch: int, step: int,
          exc: NumericalError) -> None:
    """Raise the training-halt diagnostic, preserving a usable checkpoint."""
    msg = f"training halted at epoch {epoch}, generator step {step}: {exc}"
    if ckdir is not None and _params_finite(gen, disc):
        save_checkpoint(gen, ckdir / "gen_last_good.dbc1")
        save_checkpoint(disc, ckdir / "disc_last_good.dbc1")
        msg += ("; pre-step parameters saved to gen_last_good.dbc1 and "
                "disc_last_good.dbc1")
    elif ckdir is not None:
        msg += ("; parameters already non-finite, fall back to the newest "
                "epoch checkpoint")
    raise NumericalError(msg) from exc


def train_cycleqsm(ds: UnpairedDataset, gen: Generator, disc: Discriminator,
                   cfg: TrainConfig, checkpoint_dir=None, log_path=None
                   ) -> tuple[Generator, list[LossReport]]:
    """Adversarial unpaired training of the dipole-inversion generator.

    Per generator step: sample and augment a batch, evaluate the combined
    objective once (sharing all generator applications), update the generator
    on gamma*cycle + gan*gan_g + eta*grad + rho*tv, then the discriminator on
    gan_d; extra discriminator steps (d_steps_per_g_step > 1) resample fresh
    batches. Masks always multiply discriminator inputs. Returns the trained
    generator and one LossReport per generator step; checkpoints per epoch
    and a CSV log are written when the paths are given. A non-finite value
    anywhere halts with NumericalError and keeps the last good parameters.
    """
    if cfg.patch_size % gen.divisor:
        raise InputError(
            f"patch_size {cfg.patch_size} must be divisible by {gen.divisor}")
    _disc_patch_check(disc, cfg.patch_size)
    rng = np.random.default_rng(cfg.seed)
    meta = ds.patch_meta(cfg.patch_size)
    kernel = build_dipole(meta)
    g_state, d_state = AdamState(), AdamState()
    all_params = list(gen.params.values()) + list(disc.params.values())
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    rows: list[LossReport] = []
    steps = max(1, cfg.patches_per_epoch // cfg.batch_size)
    for epoch in range(cfg.epochs):
        for _ in range(steps):
            try:
                chi_b, b_b, mag_b, mask_b = _draw_batch(ds, cfg, rng,
                                                        meta.b0_dir)
                ad.zero_grads(all_params)
                report, total_g, gan_d = total_generator_loss(
                    chi_b, b_b, gen, disc, kernel, weights=cfg.weights,
                    mag_batch=mag_b, mask_batch=mask_b, norm=cfg.norm,
                    mask_losses=cfg.mask_losses)
                ad.backward(total_g)
                adam_step(gen.params, _grads(gen.params), g_state, cfg.lr,
                          cfg.beta1, cfg.beta2)
                ad.zero_grads(all_params)
                ad.backward(gan_d)
                adam_step(disc.params, _grads(disc.params), d_state, cfg.lr,
                          cfg.beta1, cfg.beta2)
                ad.zero_grads(all_params)
                for _ in range(cfg.d_steps_per_g_step - 1):
                    chi_b, b_b, mag_b, mask_b = _draw_batch(ds, cfg, rng,
                                                            meta.b0_dir)
                    fakes = [apply_generator(gen, b, m).detach()
                             for b, m in zip(b_b, mag_b)]
                    extra_d, _ = lsgan_losses(disc, chi_b, fakes, mask_b)
                    ad.backward(extra_d)
                    adam_step(disc.params, _grads(disc.params), d_state,
                              cfg.lr, cfg.beta1, cfg.beta2)
                    ad.zero_grads(all_params)
            except NumericalError as exc:
                _halt(gen, disc, ckdir, epoch, len(rows), exc)
            rows.append(report)
        if ckdir is not None:
            save_checkpoint(gen, ckdir / f"gen_epoch{epoch:03d}.dbc1")
            save_checkpoint(disc, ckdir / f"disc_epoch{epoch:03d}.dbc1")
    if log_path is not None:
        write_log_csv(rows, log_path, steps)
    return gen, rows


def write_log_csv(rows: list[LossReport], path, steps_per_epoch: int) -> None:
    """One CSV row per generator step; repr-precision floats and a fixed line
    terminator so identical runs serialize to identical bytes."""
    if steps_per_epoch < 1:
        raise InputError("steps_per_epoch must be >= 1")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "cycle", "gan_g", "gan_d", "grad", "tv",
                    "total"])
        for i, r in enumerate(rows):
            w.writerow([i, i // steps_per_epoch] + [repr(v) for v in r.row()])


def window_origins(n: int, p: int, stride: int) -> list[int]:
    """Sliding-window start positions covering [0, n): regular strides plus
    an edge-clamped final window so the last voxels are always covered."""
    if p < 1 or stride < 1:
        raise InputError("patch and stride must be >= 1")
    if n <= p:
        return [0]
    out = list(range(0, n - p + 1, stride))
    if out[-1] != n - p:
        out.append(n - p)
    return out


def infer_stitched(gen, field: RealVolume, magnitude: RealVolume | None,
                   mask: Mask | None, cfg: TrainConfig) -> RealVolume:
    """Full-volume inference by averaging overlapping patch predictions.

    Windows slide at cfg.stride with edge-clamped final positions; each
    voxel's output is the uniform average over the windows covering it.
    Volumes smaller than the patch run zero-padded and are cropped back.
    The output is multiplied by the mask when one is given.
    """
    meta = field.meta
    p = cfg.patch_size
    if isinstance(gen, Generator) and p % gen.divisor:
        raise InputError(
            f"patch_size {p} must be divisible by {gen.divisor}")
    if magnitude is not None and magnitude.meta != meta:
        raise InputError("magnitude geometry does not match field")
    if mask is not None and mask.meta != meta:
        raise InputError("mask geometry does not match field")
    dims = meta.dims
    pad = [(0, max(n, p) - n) for n in dims]
    f = np.pad(field.data, pad)
    m = np.pad(magnitude.data if magnitude is not None else np.ones(dims), pad)
    out = np.zeros(f.shape)
    cnt = np.zeros(f.shape)
    origins = [window_origins(n, p, cfg.stride) for n in f.shape]
    for ox in origins[0]:
        for oy in origins[1]:
            for oz in origins[2]:
                sl = (slice(ox, ox + p), slice(oy, oy + p), slice(oz, oz + p))
                phase = _to_tensor(f[sl])
                mag = _to_tensor(m[sl])
                pred = apply_generator(gen, phase, mag)
                out[sl] += pred.data[0].astype(np.float64)
                cnt[sl] += 1.0
    out = (out / cnt)[:dims[0], :dims[1], :dims[2]]
    if mask is not None:
        out = out * mask.data
    return RealVolume(meta, out)


def optimize_dip(field: RealVolume, magnitude: RealVolume | None,
                 mask: Mask | None, kernel: DipoleKernel, lam: float = 1e-3,
                 iters: int = 200, lr: float = 1e-3, seed: int = 0,
                 depth: int = 3, base_channels: int = 8, beta1: float = 0.5,
                 beta2: float = 0.999) -> tuple[RealVolume, list[float]]:
    """Deep-prior inversion of a single volume, no training data.

    A freshly initialized half-width generator driven by a fixed uniform
    noise input is fit with Adam to the phasor data term (weighted by
    magnitude * mask) plus lam * TV on this one volume. Returns the
    best-objective iterate (masked when a mask is given) and the
    per-iteration objective trace.
    """
    meta = field.meta
    if kernel.meta != meta:
        raise InputError("kernel grid does not match the field volume")
    if iters < 1:
        raise InputError(f"iters must be >= 1, got {iters}")
    if not (np.isfinite(lr) and lr > 0):
        raise InputError(f"lr must be finite and > 0, got {lr}")
    if magnitude is not None and magnitude.meta != meta:
        raise InputError("magnitude geometry does not match field")
    if mask is not None and mask.meta != meta:
        raise InputError("mask geometry does not match field")
    gen = build_generator(depth=depth, base_channels=base_channels, seed=seed)
    bad = [n for n in meta.dims if n % gen.divisor]
    if bad:
        raise InputError(
            f"volume dims {meta.dims} must be divisible by {gen.divisor}")
    w_arr = magnitude.data if magnitude is not None else np.ones(meta.dims)
    if mask is not None:
        w_arr = w_arr * mask.data
    rng = np.random.default_rng(seed)
    noise = rng.uniform(0.0, 0.1, size=(2,) + meta.dims).astype(np.float32)
    phase_in = Tensor(noise[:1])
    mag_in = Tensor(noise[1:])
    state = AdamState()
    params = list(gen.params.values())
    best_val, best_chi = np.inf, None
    trace: list[float] = []
    for it in range(iters):
        try:
            ad.zero_grads(params)
            chi = forward_generator(gen, phase_in, mag_in)
            loss = dip_loss(chi, field.data, w_arr, kernel, lam=lam)
            val = loss.item()
            if val < best_val:
                best_val = val
                best_chi = chi.data[0].astype(np.float64)
            ad.backward(loss)
            adam_step(gen.params, _grads(gen.params), state, lr, beta1, beta2)
        except NumericalError as exc:
            raise NumericalError(
                f"non-finite value at iteration {it}") from exc
        trace.append(val)
    out = best_chi if mask is None else best_chi * mask.data
    return RealVolume(meta, out), trace


def train_uqsm(ds: UnpairedDataset, gen: Generator, cfg: TrainConfig,
               lam: float = 1e-3, checkpoint_dir=None
               ) -> tuple[Generator, list[float]]:
    """Field-only training: fit the generator across random field patches to
    the phasor data term (weighted by magnitude * mask) plus lam * TV. No
    discriminator and no chi labels; same sampling, augmentation, halt, and
    checkpoint machinery as the adversarial trainer. Returns the generator
    and the per-step objective trace.
    """
    if cfg.patch_size % gen.divisor:
        raise InputError(
            f"patch_size {cfg.patch_size} must be divisible by {gen.divisor}")
    rng = np.random.default_rng(cfg.seed)
    meta = ds.patch_meta(cfg.patch_size)
    kernel = build_dipole(meta)
    state = AdamState()
    params = list(gen.params.values())
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    trace: list[float] = []
    steps = max(1, cfg.patches_per_epoch // cfg.batch_size)
    for epoch in range(cfg.epochs):
        for _ in range(steps):
            try:
                field_p, _, mask_p = sample_patches(ds, cfg, rng,
                                                    cfg.batch_size)
                total = None
                for (phase, mag), mask in zip(field_p, mask_p):
                    phase, mag, mask = augment([phase, mag, mask], rng,
                                               meta.b0_dir)
                    chi = forward_generator(gen, _to_tensor(phase),
                                            _to_tensor(mag))
                    term = dip_loss(chi, phase, mag * mask, kernel, lam=lam)
                    total = term if total is None else ad.add(total, term)
                total = total * (1.0 / len(field_p))
                ad.zero_grads(params)
                ad.backward(total)
                adam_step(gen.params, _grads(gen.params), state, cfg.lr,
                          cfg.beta1, cfg.beta2)
                ad.zero_grads(params)
            except NumericalError as exc:
                msg = (f"training halted at epoch {epoch}, step "
                       f"{len(trace)}: {exc}")
                if ckdir is not None and _params_finite(gen):
                    save_checkpoint(gen, ckdir / "gen_last_good.dbc1")
                    msg += "; pre-step parameters saved to gen_last_good.dbc1"
                raise NumericalError(msg) from exc
            trace.append(total.item())
        if ckdir is not None:
            save_checkpoint(gen, ckdir / f"gen_epoch{epoch:03d}.dbc1")
    return gen, trace

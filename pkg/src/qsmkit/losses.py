"""Training objectives: cycle consistency, LSGAN, gradient difference, TV,
their weighted combination, and the phasor data-consistency loss used by the
per-volume optimizers.

Reduction convention: every term is a per-voxel mean (then a mean over the
batch), so loss values and the default weights are comparable across patch
sizes. L1 is the default residual norm; "l2" (mean of squares) is selectable.

Generators are applied through a single indirection so tests can substitute
an oracle callable (phase, magnitude) -> Tensor for the real U-Net.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dipole import DipoleKernel
from .errors import InputError
from .network import Discriminator, forward_discriminator, forward_generator
from .volume import RealVolume

DIP_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Term weights for the generator objective
    gamma*cycle + gan*gan_g + eta*grad + rho*tv; gan=0 trains on the
    non-adversarial terms alone."""
    gamma: float = 10.0
    eta: float = 1.0
    rho: float = 0.1
    gan: float = 1.0

    def __post_init__(self):
        for name in ("gamma", "eta", "rho", "gan"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InputError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossReport:
    """Float snapshot of one generator step; total is rebuilt from the terms
    so the Eq-style identity holds exactly."""
    cycle: float
    gan_g: float
    gan_d: float
    grad: float
    tv: float
    total: float

    def row(self) -> tuple[float, ...]:
        return (self.cycle, self.gan_g, self.gan_d, self.grad, self.tv, self.total)


def _norm_mean(t: Tensor, norm: str) -> Tensor:
    if norm == "l1":
        return ad.tmean(ad.absolute(t))
    if norm == "l2":
        return ad.tmean(ad.mul(t, t))
    raise InputError(f"norm must be 'l1' or 'l2', got {norm!r}")


def _batch_mean(terms: list[Tensor]) -> Tensor:
    if not terms:
        raise InputError("empty batch")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total * (1.0 / len(terms))


def _check_patch(t: Tensor, kernel: DipoleKernel, what: str) -> None:
    if t.shape[0] != 1 or t.shape[1:] != kernel.meta.dims:
        raise InputError(
            f"{what} shape {t.shape} does not match kernel grid {kernel.meta.dims}")


def apply_generator(gen, phase: Tensor, magnitude: Tensor | None) -> Tensor:
    """Run ``gen`` on (phase, magnitude); a missing magnitude becomes ones.

    ``gen`` may be a Generator or any callable (phase, magnitude) -> Tensor,
    which is how tests substitute closed-form oracles for the U-Net."""
    if magnitude is None:
        magnitude = Tensor(np.ones(phase.shape, dtype=phase.dtype))
    if callable(gen):
        return gen(phase, magnitude)
    return forward_generator(gen, phase, magnitude)


def _apply_disc(disc, x: Tensor, mask: Tensor | None) -> Tensor:
    if callable(disc):
        return disc(_masked(x, mask))
    return forward_discriminator(disc, x, mask)


def _m(mask_batch, i):
    return None if mask_batch is None else mask_batch[i]


def _check_masks(mask_batch, *batches) -> None:
    if mask_batch is None:
        return
    for batch in batches:
        if len(batch) != len(mask_batch):
            raise InputError(
                f"mask batch length {len(mask_batch)} does not match "
                f"patch batch length {len(batch)}")


def _grad_terms(t: Tensor, norm: str, mask: Tensor | None) -> Tensor:
    total = None
    for axis in range(3):
        d = ad.shift_diff(t, axis)
        if mask is not None:
            d = ad.mul(d, mask)
        term = _norm_mean(d, norm)
        total = term if total is None else ad.add(total, term)
    return total


def _masked(t: Tensor, mask: Tensor | None) -> Tensor:
    return t if mask is None else ad.mul(t, mask)


def _roundtrips(chi_batch, b_batch, gen, kernel, mag_batch):
    """Shared activations: (chi, G(H chi)) pairs and (b, G(b), H G(b)) triples."""
    if mag_batch is not None and len(mag_batch) != len(b_batch):
        raise InputError("mag_batch length must match b_batch")
    chi_side = []
    for chi in chi_batch:
        _check_patch(chi, kernel, "chi patch")
        h_chi = ad.spectral_filter(chi, kernel.spectrum)
        chi_side.append((chi, apply_generator(gen, h_chi, None)))
    b_side = []
    for i, b in enumerate(b_batch):
        _check_patch(b, kernel, "field patch")
        g_b = apply_generator(gen, b, None if mag_batch is None else mag_batch[i])
        b_side.append((b, g_b, ad.spectral_filter(g_b, kernel.spectrum)))
    return chi_side, b_side


def cycle_loss(chi_batch: list[Tensor], b_batch: list[Tensor], gen,
               kernel: DipoleKernel, mag_batch: list[Tensor] | None = None,
               norm: str = "l1", mask_batch: list[Tensor] | None = None) -> Tensor:
    """chi -> H chi -> G round trip plus b -> G(b) -> H round trip."""
    _check_masks(mask_batch, chi_batch, b_batch)
    chi_side, b_side = _roundtrips(chi_batch, b_batch, gen, kernel, mag_batch)
    chi_terms = [_norm_mean(_masked(ad.sub(chi, g), _m(mask_batch, i)), norm)
                 for i, (chi, g) in enumerate(chi_side)]
    b_terms = [_norm_mean(_masked(ad.sub(b, hg), _m(mask_batch, i)), norm)
               for i, (b, _, hg) in enumerate(b_side)]
    return ad.add(_batch_mean(chi_terms), _batch_mean(b_terms))


def lsgan_losses(disc: Discriminator, real_batch: list[Tensor],
                 fake_batch: list[Tensor],
                 mask_batch: list[Tensor] | None = None) -> tuple[Tensor, Tensor]:
    """Least-squares GAN pair (gan_d, gan_g) with 0/1 targets.

    The fake is detached inside gan_d, so discriminator training never pushes
    gradients into the generator. Masks (when given) multiply the
    discriminator inputs, fulfilling the mask-before-discriminator contract.
    ``disc`` may be a Discriminator or a callable Tensor -> Tensor.
    """
    _check_masks(mask_batch, real_batch, fake_batch)
    d_real = [_apply_disc(disc, r, _m(mask_batch, i))
              for i, r in enumerate(real_batch)]
    d_fake_detached = [_apply_disc(disc, f.detach(), _m(mask_batch, i))
                       for i, f in enumerate(fake_batch)]
    d_fake = [_apply_disc(disc, f, _m(mask_batch, i))
              for i, f in enumerate(fake_batch)]
    gan_d = ad.add(
        _batch_mean([ad.tmean(ad.mul(d - 1.0, d - 1.0)) for d in d_real]),
        _batch_mean([ad.tmean(ad.mul(d, d)) for d in d_fake_detached])) * 0.5
    gan_g = _batch_mean([ad.tmean(ad.mul(d - 1.0, d - 1.0)) for d in d_fake])
    return gan_d, gan_g


def grad_diff_loss(chi_batch: list[Tensor], b_batch: list[Tensor], gen,
                   kernel: DipoleKernel, mag_batch: list[Tensor] | None = None,
                   norm: str = "l1",
                   mask_batch: list[Tensor] | None = None) -> Tensor:
    """Finite-difference mismatch of both cycle branches, to keep edges."""
    _check_masks(mask_batch, chi_batch, b_batch)
    chi_side, b_side = _roundtrips(chi_batch, b_batch, gen, kernel, mag_batch)
    chi_terms = [_grad_terms(ad.sub(chi, g), norm, _m(mask_batch, i))
                 for i, (chi, g) in enumerate(chi_side)]
    b_terms = [_grad_terms(ad.sub(b, hg), norm, _m(mask_batch, i))
               for i, (b, _, hg) in enumerate(b_side)]
    return ad.add(_batch_mean(chi_terms), _batch_mean(b_terms))


def tv_loss(out_batch: list[Tensor], norm: str = "l1",
            mask_batch: list[Tensor] | None = None) -> Tensor:
    """Anisotropic total variation of generator outputs, per-voxel mean."""
    _check_masks(mask_batch, out_batch)
    return _batch_mean([_grad_terms(t, norm, _m(mask_batch, i))
                        for i, t in enumerate(out_batch)])


def total_generator_loss(chi_batch: list[Tensor], b_batch: list[Tensor], gen,
                         disc: Discriminator, kernel: DipoleKernel,
                         weights: LossWeights = LossWeights(),
                         mag_batch: list[Tensor] | None = None,
                         mask_batch: list[Tensor] | None = None,
                         norm: str = "l1",
                         mask_losses: bool = False) -> tuple[LossReport, Tensor, Tensor]:
    """One full objective evaluation sharing every generator application.

    Returns (report, total_g, gan_d): ``total_g`` is the differentiable
    generator objective gamma*cycle + gan*gan_g + eta*grad + rho*tv and ``gan_d``
    the discriminator objective. Masks always gate the discriminator input;
    they enter the cycle/grad/tv terms only when ``mask_losses`` is set.
    """
    _check_masks(mask_batch, chi_batch, b_batch)
    loss_masks = mask_batch if mask_losses else None
    chi_side, b_side = _roundtrips(chi_batch, b_batch, gen, kernel, mag_batch)

    chi_res = [_masked(ad.sub(chi, g), _m(loss_masks, i))
               for i, (chi, g) in enumerate(chi_side)]
    b_res = [_masked(ad.sub(b, hg), _m(loss_masks, i))
             for i, (b, _, hg) in enumerate(b_side)]
    cycle = ad.add(_batch_mean([_norm_mean(r, norm) for r in chi_res]),
                   _batch_mean([_norm_mean(r, norm) for r in b_res]))

    grad = ad.add(
        _batch_mean([_grad_terms(ad.sub(chi, g), norm, _m(loss_masks, i))
                     for i, (chi, g) in enumerate(chi_side)]),
        _batch_mean([_grad_terms(ad.sub(b, hg), norm, _m(loss_masks, i))
                     for i, (b, _, hg) in enumerate(b_side)]))

    fakes = [g_b for (_, g_b, _) in b_side]
    tv = _batch_mean([_grad_terms(g_b, norm, _m(loss_masks, i))
                      for i, g_b in enumerate(fakes)])
    gan_d, gan_g = lsgan_losses(disc, chi_batch, fakes, mask_batch)

    total = ad.add(ad.add(cycle * weights.gamma, gan_g * weights.gan),
                   ad.add(grad * weights.eta, tv * weights.rho))

    cycle_f, gan_g_f, gan_d_f = cycle.item(), gan_g.item(), gan_d.item()
    grad_f, tv_f = grad.item(), tv.item()
    report = LossReport(
        cycle=cycle_f, gan_g=gan_g_f, gan_d=gan_d_f, grad=grad_f, tv=tv_f,
        total=weights.gamma * cycle_f + weights.gan * gan_g_f
        + weights.eta * grad_f + weights.rho * tv_f)
    return report, total, gan_d


def _as_array(v, dims, what: str) -> np.ndarray:
    arr = v.data if isinstance(v, RealVolume) else np.asarray(v, dtype=np.float64)
    if arr.shape != dims:
        raise InputError(f"{what} shape {arr.shape} does not match grid {dims}")
    return arr


def dip_loss(chi: Tensor, b, weight, kernel: DipoleKernel,
             lam: float = 1e-3) -> Tensor:
    """Phasor data consistency |e^(jH chi) - e^(jb)| with magnitude weighting
    plus lambda * anisotropic TV; the phasor distance is computed as
    sqrt(2 - 2 cos(H chi - b) + eps) which keeps it differentiable at 0."""
    _check_patch(chi, kernel, "chi")
    if not np.isfinite(lam) or lam < 0:
        raise InputError(f"lam must be finite and >= 0, got {lam}")
    dims = kernel.meta.dims
    b_arr = _as_array(b, dims, "field")[None].astype(np.float64)
    w_arr = _as_array(weight, dims, "weight")[None].astype(np.float64)
    h_chi = ad.spectral_filter(chi, kernel.spectrum)
    delta = ad.sub(h_chi, Tensor(b_arr, dtype=h_chi.dtype))
    dist = ad.sqrt(2.0 - ad.cos(delta) * 2.0 + DIP_EPS)
    data = ad.tmean(ad.mul(dist, Tensor(w_arr, dtype=h_chi.dtype)))
    return ad.add(data, _grad_terms(chi, "l1", None) * lam)

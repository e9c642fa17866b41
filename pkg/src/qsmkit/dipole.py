"""Unit dipole kernel in k-space and the spectral forward/inverse field maps.

The kernel value at frequency k is ``1/3 - (k.b0)^2 / |k|^2`` with the k = 0
sample pinned to 0 (demodulated field has no DC). Frequencies are physical:
``k_i = f_i / voxel_size_i`` with f the standard FFT frequency grid, so
anisotropic voxels and oblique b0 produce the correct magic-angle cone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError
from .volume import ComplexVolume, RealVolume, VolumeMeta

SPECTRUM_MIN = -2.0 / 3.0
SPECTRUM_MAX = 1.0 / 3.0


@dataclass(frozen=True)
class DipoleKernel:
    """Real even spectrum of the unit dipole on a concrete grid."""

    meta: VolumeMeta
    spectrum: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.spectrum, dtype=np.float64)
        if arr.shape != self.meta.dims:
            raise InputError("kernel spectrum shape does not match meta dims")
        arr = np.array(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "spectrum", arr)


def build_dipole(meta: VolumeMeta) -> DipoleKernel:
    """Sample the dipole spectrum on the FFT grid of ``meta``.

    Written as ``(|k|^2 - 3 (k.b0)^2) / (3 |k|^2)`` so grid points that land
    exactly on the magic cone evaluate to exactly 0 in floating point. On even
    grid sizes the Nyquist bin aliases both +-1/2: an oblique b0 mixes axes
    there and breaks evenness, so the spectrum is averaged with its k -> -k
    mirror (a no-op everywhere already even). The result is clipped to the
    analytic range [-2/3, 1/3].
    """
    freqs = [np.fft.fftfreq(n, d=s) for n, s in zip(meta.dims, meta.voxel_size)]
    kx = freqs[0][:, None, None]
    ky = freqs[1][None, :, None]
    kz = freqs[2][None, None, :]
    bx, by, bz = meta.b0_dir
    k2 = kx * kx + ky * ky + kz * kz
    dot = kx * bx + ky * by + kz * bz
    num = k2 - 3.0 * (dot * dot)
    with np.errstate(divide="ignore", invalid="ignore"):
        spec = num / (3.0 * k2)
    spec[0, 0, 0] = 0.0  # demodulated field: no DC response
    mirror = [(-np.arange(n)) % n for n in meta.dims]
    spec = 0.5 * (spec + spec[np.ix_(*mirror)])
    np.clip(spec, SPECTRUM_MIN, SPECTRUM_MAX, out=spec)
    return DipoleKernel(meta, spec)


def _require_same_grid(meta: VolumeMeta, kernel: DipoleKernel) -> None:
    if meta != kernel.meta:
        raise InputError(
            f"volume geometry {meta} does not match kernel geometry {kernel.meta}")


def apply_spectrum(data: np.ndarray, spectrum: np.ndarray) -> np.ndarray:
    """real(ifft(spectrum * fft(data))) without the container plumbing."""
    return np.real(np.fft.ifftn(spectrum * np.fft.fftn(data)))


def forward_field(chi: RealVolume, kernel: DipoleKernel) -> RealVolume:
    """Field perturbation of a susceptibility map: ifft3(d * fft3(chi)).

    The imaginary residue of the inverse transform must be negligible
    (|imag|_inf <= 1e-8 * |real|_inf); anything larger is a numerical fault.
    """
    _require_same_grid(chi.meta, kernel)
    full = np.fft.ifftn(kernel.spectrum * np.fft.fftn(chi.data))
    re = np.real(full)
    imag_peak = float(np.max(np.abs(np.imag(full))))
    if imag_peak > 1e-8 * float(np.max(np.abs(re))):
        raise NumericalError(f"imaginary leakage {imag_peak:g} in forward field")
    return RealVolume(chi.meta, re)


def naive_inverse(field: RealVolume, kernel: DipoleKernel, eps: float = 1e-6) -> RealVolume:
    """Direct spectral division chi_hat = b_hat / d, zeroed where |d| <= eps.

    Unstable near the magic cone by construction; kept as the reference
    worst-case baseline.
    """
    if not eps > 0:
        raise InputError(f"eps must be positive, got {eps}")
    _require_same_grid(field.meta, kernel)
    d = kernel.spectrum
    keep = np.abs(d) > eps
    bhat = np.fft.fftn(field.data)
    chihat = np.zeros_like(bhat)
    np.divide(bhat, d, out=chihat, where=keep)
    return RealVolume(field.meta, np.real(np.fft.ifftn(chihat)))

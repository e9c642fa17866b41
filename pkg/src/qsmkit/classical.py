"""Classical dipole inversions: TKD, edge-weighted L1 regularization, CGLS.

All three consume a demodulated field volume plus a precomputed kernel and
return susceptibility estimates; none of them touch the learned machinery.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dipole import DipoleKernel, apply_spectrum
from .errors import InputError, NumericalError
from .volume import Mask, RealVolume, VolumeMeta

log = logging.getLogger(__name__)

SMOOTH_EPS = 1e-6  # smoothing of |t| as sqrt(t^2 + eps^2) in the regularizer


@dataclass(frozen=True)
class TkdParams:
    a: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 < self.a < 2.0 / 3.0:
            raise InputError(f"threshold a must lie in (0, 2/3), got {self.a}")


@dataclass(frozen=True)
class MediParams:
    lam: float = 600.0
    edge_fraction: float = 0.3
    iters: int = 300
    step: float = 1.0

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise InputError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.edge_fraction < 1.0:
            raise InputError(f"edge_fraction must be in [0, 1), got {self.edge_fraction}")
        if self.iters < 1:
            raise InputError(f"iters must be >= 1, got {self.iters}")
        if not self.step > 0:
            raise InputError(f"step must be positive, got {self.step}")


@dataclass(frozen=True)
class MediWeights:
    """Data weighting W (mean 1 over the magnitude support) and per-axis
    gradient masks M that release the strongest magnitude edges."""

    w: RealVolume
    m: tuple[Mask, Mask, Mask]


def _check_grid(meta: VolumeMeta, kernel: DipoleKernel) -> None:
    if meta != kernel.meta:
        raise InputError("volume and kernel geometry differ")


def tkd_invert(field: RealVolume, kernel: DipoleKernel,
               params: TkdParams = TkdParams()) -> RealVolume:
    """Thresholded k-space division.

    The divisor keeps d where |d| > a and substitutes a * sign(d) elsewhere,
    with sign(0) taken as +1 so the cone itself divides by +a.
    """
    _check_grid(field.meta, kernel)
    d = kernel.spectrum
    sign = np.where(d >= 0.0, 1.0, -1.0)
    da = np.where(np.abs(d) > params.a, d, params.a * sign)
    chihat = np.fft.fftn(field.data) / da
    return RealVolume(field.meta, np.real(np.fft.ifftn(chihat)))


def _axis_diff(arr: np.ndarray, axis: int) -> np.ndarray:
    out = np.zeros_like(arr)
    sl = [slice(None)] * 3
    sl[axis] = slice(0, arr.shape[axis] - 1)
    out[tuple(sl)] = np.diff(arr, axis=axis)
    return out


def _axis_diff_adjoint(arr: np.ndarray, axis: int) -> np.ndarray:
    # transpose of _axis_diff: out[i] = arr[i-1] - arr[i] with clamped ends
    out = np.zeros_like(arr)
    body = [slice(None)] * 3
    body[axis] = slice(0, arr.shape[axis] - 1)
    shifted = [slice(None)] * 3
    shifted[axis] = slice(1, arr.shape[axis])
    out[tuple(body)] -= arr[tuple(body)]
    out[tuple(shifted)] += arr[tuple(body)]
    return out


def build_medi_weights(magnitude: RealVolume, edge_fraction: float = 0.3) -> MediWeights:
    """Derive W and M from a magnitude image.

    W is the magnitude scaled to mean 1 over its positive support (the
    support doubles as the data mask: zero magnitude contributes nothing).
    M_c zeroes the voxels whose |forward difference| along axis c falls in the
    top ``edge_fraction`` quantile, so strong anatomy edges go unpenalized.
    """
    if not 0.0 <= edge_fraction < 1.0:
        raise InputError(f"edge_fraction must be in [0, 1), got {edge_fraction}")
    mag = magnitude.data
    if np.any(mag < 0):
        raise InputError("magnitude must be nonnegative")
    support = mag > 0
    if not np.any(support):
        raise InputError("magnitude has empty support")
    w = mag / np.mean(mag[support])
    masks = []
    for ax in range(3):
        g = np.abs(_axis_diff(mag, ax))
        thr = np.quantile(g, 1.0 - edge_fraction)
        if thr == 0.0 and g.max() == 0.0:
            log.warning("constant magnitude along axis %d: edge mask is all ones", ax)
        masks.append(Mask(magnitude.meta, (g <= thr).astype(np.float64)))
    return MediWeights(w=RealVolume(magnitude.meta, w), m=tuple(masks))


def _medi_objective(x: np.ndarray, b: np.ndarray, spec: np.ndarray,
                    w2: np.ndarray, m: tuple, lam: float) -> tuple[float, float, float]:
    resid = b - apply_spectrum(x, spec)
    data = float(np.sum(w2 * resid * resid))
    reg = 0.0
    for ax in range(3):
        g = _axis_diff(x, ax)
        reg += float(np.sum(m[ax] * np.sqrt(g * g + SMOOTH_EPS ** 2)))
    return data + lam * reg, data, lam * reg


def medi_invert(field: RealVolume, kernel: DipoleKernel, weights: MediWeights,
                params: MediParams = MediParams()) -> tuple[RealVolume, list[tuple]]:
    """Minimize ||W(b - Hx)||^2 + lam * sum_c ||M_c grad_c(x)||_1 by descent.

    The L1 factors are smoothed as sqrt(t^2 + eps^2) so the objective is
    differentiable; an Armijo backtracking line search keeps the recorded
    objective trace non-increasing. Trace rows are
    (iteration, objective, data_term, reg_term).
    """
    _check_grid(field.meta, kernel)
    if weights.w.meta != field.meta:
        raise InputError("weights geometry differs from field")
    b = field.data
    spec = kernel.spectrum
    w2 = weights.w.data ** 2
    m = tuple(mk.data for mk in weights.m)
    lam = params.lam

    x = np.zeros_like(b)
    f, data, reg = _medi_objective(x, b, spec, w2, m, lam)
    trace = [(0, f, data, reg)]
    f0 = f
    t = params.step
    for it in range(1, params.iters + 1):
        resid = apply_spectrum(x, spec) - b
        grad = 2.0 * apply_spectrum(w2 * resid, spec)
        for ax in range(3):
            g = _axis_diff(x, ax)
            psi = m[ax] * g / np.sqrt(g * g + SMOOTH_EPS ** 2)
            grad += lam * _axis_diff_adjoint(psi, ax)
        gnorm2 = float(np.sum(grad * grad))
        if gnorm2 == 0.0:
            break
        t = min(t * 2.0, params.step)
        while True:
            cand = x - t * grad
            f_new, data_new, reg_new = _medi_objective(cand, b, spec, w2, m, lam)
            if np.isfinite(f_new) and f_new <= f - 1e-4 * t * gnorm2:
                break
            t *= 0.5
            if t < 1e-20:  # stalled: keep current iterate
                cand, f_new, data_new, reg_new = x, f, data, reg
                break
        x, f, data, reg = cand, f_new, data_new, reg_new
        if not np.isfinite(f) or f > 10.0 * f0:
            raise NumericalError(f"objective diverged at iteration {it}: {f:g}")
        trace.append((it, f, data, reg))
        if t < 1e-20:
            break
    return RealVolume(field.meta, x), trace


def cg_least_squares(field: RealVolume, kernel: DipoleKernel,
                     weights: RealVolume | None = None, iters: int = 50,
                     tol: float = 1e-10) -> tuple[RealVolume, list[float]]:
    """CGLS for min ||W(b - Hx)||_2, the lam -> 0 reference for medi_invert.

    Works on the normal equations implicitly (never forms H^T W^2 H). The
    returned residual list holds ||W(b - Hx_k)||_2, which is non-increasing
    because each CG step minimizes it over a nested Krylov subspace.
    """
    _check_grid(field.meta, kernel)
    if iters < 1:
        raise InputError(f"iters must be >= 1, got {iters}")
    spec = kernel.spectrum
    if weights is None:
        wd = np.ones(field.meta.dims)
    else:
        if weights.meta != field.meta:
            raise InputError("weights geometry differs from field")
        wd = weights.data

    def a_fwd(v):
        return wd * apply_spectrum(v, spec)

    def a_adj(v):
        return apply_spectrum(wd * v, spec)

    x = np.zeros(field.meta.dims)
    r = wd * field.data
    s = a_adj(r)
    p = s.copy()
    gamma = float(np.sum(s * s))
    residuals = [float(np.linalg.norm(r))]
    r0 = residuals[0]
    for _ in range(iters):
        q = a_fwd(p)
        qq = float(np.sum(q * q))
        if qq == 0.0 or gamma == 0.0:
            break
        alpha = gamma / qq
        x += alpha * p
        r -= alpha * q
        residuals.append(float(np.linalg.norm(r)))
        s = a_adj(r)
        gamma_new = float(np.sum(s * s))
        if not np.isfinite(gamma_new):
            raise NumericalError("CGLS produced non-finite iterates")
        if r0 > 0 and residuals[-1] <= tol * r0:
            break
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return RealVolume(field.meta, x), residuals

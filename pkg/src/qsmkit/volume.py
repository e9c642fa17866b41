"""3D volume containers, spectral/finite-difference operators, DBV1 file I/O.

Arrays are indexed ``[x, y, z]`` with shape ``(nx, ny, nz)``. The serialized
layout is x-fastest (a Fortran-order ravel of that indexing), so voxel
``(x, y, z)`` sits at flat offset ``x + nx*(y + ny*z)``. Physics paths run in
float64 throughout; files store float32.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    InputError,
    MalformedHeaderError,
    NonFinitePayloadError,
    PayloadSizeError,
)

DBV1_MAGIC = "DBV1"


@dataclass(frozen=True)
class VolumeMeta:
    """Grid geometry: dims in voxels, voxel size in mm, unit main-field direction.

    ``b0_dir`` is normalized at construction; a zero or non-finite vector is
    rejected. Instances are hashable and usable as cache keys.
    """

    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    b0_dir: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self) -> None:
        try:
            dims = tuple(int(d) for d in self.dims)
            voxel = tuple(float(s) for s in self.voxel_size)
            b0 = np.asarray(self.b0_dir, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise InputError(f"bad volume geometry: {exc}") from exc
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise InputError(f"dims must be three positive integers, got {self.dims}")
        if len(voxel) != 3 or any(not (np.isfinite(s) and s > 0) for s in voxel):
            raise InputError(f"voxel_size must be three positive reals, got {self.voxel_size}")
        if b0.shape != (3,) or not np.all(np.isfinite(b0)):
            raise InputError(f"b0_dir must be a finite 3-vector, got {self.b0_dir}")
        norm = float(np.linalg.norm(b0))
        if norm == 0.0:
            raise InputError("b0_dir must be nonzero")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", voxel)
        object.__setattr__(self, "b0_dir", tuple(float(c) for c in b0 / norm))

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def fov_mm(self) -> tuple[float, float, float]:
        return tuple(n * s for n, s in zip(self.dims, self.voxel_size))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _check_shape(meta: VolumeMeta, arr: np.ndarray) -> None:
    if arr.shape != meta.dims:
        raise InputError(f"data shape {arr.shape} does not match dims {meta.dims}")


@dataclass(frozen=True)
class RealVolume:
    """Immutable float64 scalar field on the grid described by ``meta``."""

    meta: VolumeMeta
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64)
        _check_shape(self.meta, arr)
        if not np.all(np.isfinite(arr)):
            raise InputError("volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(arr))


@dataclass(frozen=True)
class ComplexVolume:
    """Immutable complex128 field, used for spectra and intermediate transforms."""

    meta: VolumeMeta
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.complex128)
        _check_shape(self.meta, arr)
        if not np.all(np.isfinite(arr)):
            raise InputError("volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(arr))


@dataclass(frozen=True)
class Mask(RealVolume):
    """Binary region of interest; every voxel exactly 0 or 1, at least one set."""

    def __post_init__(self) -> None:
        super().__post_init__()
        arr = self.data
        if not np.all((arr == 0.0) | (arr == 1.0)):
            raise InputError("mask voxels must be exactly 0 or 1")
        if not np.any(arr):
            raise InputError("mask is empty")

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))


def fft3(v: RealVolume | ComplexVolume) -> ComplexVolume:
    """Unnormalized forward 3D DFT (Parseval: ||F v||^2 = N ||v||^2)."""
    return ComplexVolume(v.meta, np.fft.fftn(v.data))


def ifft3(v: ComplexVolume) -> ComplexVolume:
    """Inverse 3D DFT carrying the 1/N factor, so ifft3(fft3(v)) == v."""
    return ComplexVolume(v.meta, np.fft.ifftn(v.data))


def _axis_diff(arr: np.ndarray, axis: int) -> np.ndarray:
    # forward difference, replicate (Neumann) boundary: last slice is 0
    out = np.zeros_like(arr)
    head = [slice(None)] * 3
    head[axis] = slice(0, arr.shape[axis] - 1)
    out[tuple(head)] = np.diff(arr, axis=axis)
    return out


def grad3(v: RealVolume) -> tuple[RealVolume, RealVolume, RealVolume]:
    """Forward-difference gradient per axis with zero last slice."""
    return tuple(RealVolume(v.meta, _axis_diff(v.data, ax)) for ax in range(3))


def div3(gx: RealVolume, gy: RealVolume, gz: RealVolume) -> RealVolume:
    """Negative adjoint of grad3: <grad3(u), g> == <u, -div3(g)> exactly."""
    if not (gx.meta == gy.meta == gz.meta):
        raise InputError("div3 components must share geometry")
    out = np.zeros(gx.meta.dims, dtype=np.float64)
    for ax, g in enumerate((gx, gy, gz)):
        body = [slice(None)] * 3
        body[ax] = slice(0, g.data.shape[ax] - 1)
        shifted = [slice(None)] * 3
        shifted[ax] = slice(1, g.data.shape[ax])
        out[tuple(body)] += g.data[tuple(body)]
        out[tuple(shifted)] -= g.data[tuple(body)]
    return RealVolume(gx.meta, out)


def _header_dict(meta: VolumeMeta) -> dict:
    return {
        "magic": DBV1_MAGIC,
        "dims": list(meta.dims),
        "voxel_size_mm": [float(s) for s in meta.voxel_size],
        "b0_dir": [float(c) for c in meta.b0_dir],
        "dtype": "f32",
    }


def write_volume(v: RealVolume, path: str | Path) -> None:
    """Serialize to DBV1: one-line JSON header, newline, raw little-endian f32."""
    payload = np.asarray(v.data, dtype="<f4").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(_header_dict(v.meta)).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def read_volume(path: str | Path) -> RealVolume:
    """Parse a DBV1 file.

    Raises MalformedHeaderError, PayloadSizeError, or NonFinitePayloadError
    for the three documented failure classes.
    """
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise MalformedHeaderError(f"{path}: no header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: unparseable header: {exc}") from exc
    if not isinstance(header, dict) or header.get("magic") != DBV1_MAGIC:
        raise MalformedHeaderError(f"{path}: missing or wrong magic")
    for key in ("dims", "voxel_size_mm", "b0_dir", "dtype"):
        if key not in header:
            raise MalformedHeaderError(f"{path}: header missing field {key!r}")
    if header["dtype"] != "f32":
        raise MalformedHeaderError(f"{path}: unsupported dtype {header['dtype']!r}")
    try:
        meta = VolumeMeta(tuple(header["dims"]), tuple(header["voxel_size_mm"]),
                          tuple(header["b0_dir"]))
    except (InputError, TypeError) as exc:
        raise MalformedHeaderError(f"{path}: bad geometry fields: {exc}") from exc
    payload = raw[nl + 1:]
    expected = meta.voxel_count * 4
    if len(payload) != expected:
        raise PayloadSizeError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise NonFinitePayloadError(f"{path}: payload contains non-finite values")
    data = arr.astype(np.float64).reshape(meta.dims, order="F")
    return RealVolume(meta, data)


def read_mask(path: str | Path) -> Mask:
    v = read_volume(path)
    return Mask(v.meta, v.data)

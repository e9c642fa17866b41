"""Network architectures, optimizer, and the DBC1 checkpoint format.

The generator is a 3D U-Net over two input channels (local field phase and
magnitude) producing one susceptibility channel; the discriminator is a 3D
patchGAN emitting a patch map of realness scores. Both are parameter
dictionaries of Tensors driven by the ops in autodiff.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    InputError,
    MalformedHeaderError,
    NonFinitePayloadError,
    PayloadSizeError,
)

DBC1_MAGIC = "DBC1"
LEAKY_SLOPE = 0.2
INIT_STD = 0.02


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    # resample anything beyond two sigma
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class _ParamBuilder:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}

    def conv(self, name: str, c_in: int, c_out: int, k: int) -> None:
        w = _trunc_normal(self.rng, (c_out, c_in, k, k, k))
        self.params[f"{name}.w"] = Tensor(w.astype(self.dtype), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=self.dtype),
                                          requires_grad=True)

    def norm(self, name: str, c: int) -> None:
        self.params[f"{name}.gamma"] = Tensor(np.ones((c, 1, 1, 1), dtype=self.dtype),
                                              requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros((c, 1, 1, 1), dtype=self.dtype),
                                             requires_grad=True)


@dataclass
class Generator:
    depth: int
    base_channels: int
    in_channels: int
    params: dict[str, Tensor]

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def config(self) -> dict:
        return {"depth": self.depth, "base_channels": self.base_channels,
                "in_channels": self.in_channels}


@dataclass
class Discriminator:
    n_layers: int
    base_channels: int
    in_channels: int
    params: dict[str, Tensor]

    def config(self) -> dict:
        return {"n_layers": self.n_layers, "base_channels": self.base_channels,
                "in_channels": self.in_channels}


def build_generator(depth: int = 3, base_channels: int = 16, in_channels: int = 2,
                    seed: int = 0, dtype=np.float32) -> Generator:
    """U-Net: two 3x3x3 conv+IN+lrelu per level, stride-2 conv down,
    nearest-neighbour up with skip concatenation, 1x1x1 linear head."""
    if depth < 1 or base_channels < 1 or in_channels < 1:
        raise InputError("depth, base_channels, in_channels must be >= 1")
    rng = np.random.default_rng(seed)
    pb = _ParamBuilder(rng, dtype)
    ch = [base_channels * 2 ** l for l in range(depth)]
    for l in range(depth):
        if l > 0:
            pb.conv(f"down{l}", ch[l - 1], ch[l], 3)
            pb.norm(f"down{l}", ch[l])
        c_in = in_channels if l == 0 else ch[l]
        pb.conv(f"enc{l}.c1", c_in, ch[l], 3)
        pb.norm(f"enc{l}.c1", ch[l])
        pb.conv(f"enc{l}.c2", ch[l], ch[l], 3)
        pb.norm(f"enc{l}.c2", ch[l])
    for l in range(depth - 2, -1, -1):
        pb.conv(f"dec{l}.c1", ch[l + 1] + ch[l], ch[l], 3)
        pb.norm(f"dec{l}.c1", ch[l])
        pb.conv(f"dec{l}.c2", ch[l], ch[l], 3)
        pb.norm(f"dec{l}.c2", ch[l])
    pb.conv("out", ch[0], 1, 1)
    return Generator(depth, base_channels, in_channels, pb.params)


def build_discriminator(n_layers: int = 3, base_channels: int = 16,
                        in_channels: int = 1, seed: int = 0,
                        dtype=np.float32) -> Discriminator:
    """PatchGAN: stride-2 4x4x4 conv+IN+lrelu stack, then a linear 4x4x4 head
    producing a 1-channel patch map."""
    if n_layers < 1 or base_channels < 1 or in_channels < 1:
        raise InputError("n_layers, base_channels, in_channels must be >= 1")
    rng = np.random.default_rng(seed)
    pb = _ParamBuilder(rng, dtype)
    c_prev = in_channels
    for l in range(n_layers):
        c = base_channels * 2 ** l
        pb.conv(f"layer{l}", c_prev, c, 4)
        pb.norm(f"layer{l}", c)
        c_prev = c
    pb.conv("out", c_prev, 1, 4)
    return Discriminator(n_layers, base_channels, in_channels, pb.params)


def _conv_in_lrelu(p: dict[str, Tensor], name: str, x: Tensor,
                   stride: int = 1, pad: int = 1) -> Tensor:
    x = ad.conv3d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, pad=pad)
    x = ad.instance_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"])
    return ad.leaky_relu(x, LEAKY_SLOPE)


def forward_generator(gen: Generator, phase: Tensor, magnitude: Tensor) -> Tensor:
    """Run the U-Net; inputs are (1, X, Y, Z) tensors sharing a grid."""
    if phase.shape != magnitude.shape or phase.shape[0] != 1:
        raise InputError("phase and magnitude must both be (1, X, Y, Z)")
    div = gen.divisor
    bad = [n for n in phase.shape[1:] if n % div]
    if bad:
        raise InputError(
            f"spatial dims {phase.shape[1:]} must be divisible by {div} "
            f"(pad each offending axis up to the next multiple of {div})")
    p = gen.params
    x = ad.concat([phase, magnitude])
    skips = []
    for l in range(gen.depth):
        if l > 0:
            skips.append(x)
            x = _conv_in_lrelu(p, f"down{l}", x, stride=2, pad=1)
        x = _conv_in_lrelu(p, f"enc{l}.c1", x)
        x = _conv_in_lrelu(p, f"enc{l}.c2", x)
    for l in range(gen.depth - 2, -1, -1):
        x = ad.nn_upsample(x, 2)
        x = ad.concat([x, skips[l]])
        x = _conv_in_lrelu(p, f"dec{l}.c1", x)
        x = _conv_in_lrelu(p, f"dec{l}.c2", x)
    return ad.conv3d(x, p["out.w"], p["out.b"], stride=1, pad=0)


def forward_discriminator(disc: Discriminator, x: Tensor,
                          mask: Tensor | None = None) -> Tensor:
    """Score a patch; the brain mask is applied to the input when given, so
    voxels outside it can never influence the output."""
    if x.shape[0] != disc.in_channels:
        raise InputError(f"expected {disc.in_channels} channel(s), got {x.shape[0]}")
    if mask is not None:
        x = ad.mul(x, mask)
    p = disc.params
    for l in range(disc.n_layers):
        x = _conv_in_lrelu(p, f"layer{l}", x, stride=2, pad=1)
    return ad.conv3d(x, p["out.w"], p["out.b"], stride=1, pad=1)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.5,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter tensors.

    Parameters without an entry in ``grads`` (or with None) are left alone.
    """
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= update.astype(p.data.dtype)
    return state


def _model_kind(model) -> str:
    if isinstance(model, Generator):
        return "generator"
    if isinstance(model, Discriminator):
        return "discriminator"
    raise InputError(f"cannot checkpoint object of type {type(model).__name__}")


def save_checkpoint(model: Generator | Discriminator, path: str | Path) -> None:
    """DBC1: one-line JSON header (kind, config, named shapes), newline, then
    the parameter blobs as little-endian float32 in header order."""
    header = {
        "magic": DBC1_MAGIC,
        "kind": _model_kind(model),
        "config": model.config(),
        "params": [{"name": n, "shape": list(t.data.shape)}
                   for n, t in model.params.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for t in model.params.values():
            fh.write(np.asarray(t.data, dtype="<f4").ravel().tobytes())


def load_checkpoint(path: str | Path) -> Generator | Discriminator:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise MalformedHeaderError(f"{path}: no header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: unparseable header: {exc}") from exc
    if not isinstance(header, dict) or header.get("magic") != DBC1_MAGIC:
        raise MalformedHeaderError(f"{path}: missing or wrong magic")
    for key in ("kind", "config", "params"):
        if key not in header:
            raise MalformedHeaderError(f"{path}: header missing field {key!r}")
    kind = header["kind"]
    cfg = header["config"]
    try:
        if kind == "generator":
            model = build_generator(**cfg)
        elif kind == "discriminator":
            model = build_discriminator(**cfg)
        else:
            raise MalformedHeaderError(f"{path}: unknown kind {kind!r}")
        entries = [(e["name"], tuple(e["shape"])) for e in header["params"]]
    except (TypeError, KeyError) as exc:
        raise MalformedHeaderError(f"{path}: bad config or params: {exc}") from exc
    if [n for n, _ in entries] != list(model.params.keys()):
        raise MalformedHeaderError(f"{path}: parameter names do not match {kind} config")
    total = sum(int(np.prod(s)) for _, s in entries)
    payload = raw[nl + 1:]
    if len(payload) != total * 4:
        raise PayloadSizeError(
            f"{path}: payload is {len(payload)} bytes, header implies {total * 4}")
    flat = np.frombuffer(payload, dtype="<f4")
    if not np.all(np.isfinite(flat)):
        raise NonFinitePayloadError(f"{path}: payload contains non-finite values")
    offset = 0
    for name, shape in entries:
        if model.params[name].data.shape != shape:
            raise MalformedHeaderError(
                f"{path}: shape {shape} for {name} does not match architecture")
        count = int(np.prod(shape))
        block = flat[offset:offset + count].reshape(shape).astype(np.float32)
        model.params[name] = Tensor(block, requires_grad=True)
        offset += count
    return model

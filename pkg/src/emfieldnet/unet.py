"""Compact 3D U-Net on top of :mod:`emfieldnet.autodiff`.

Layer list for depth ``D``, base width ``w`` (level widths ``w * 2**l``) and
``n`` convolutions per block, every conv followed by leaky ReLU::

    enc{l}.conv{j}   l = 0..D-1     then 2x average pooling
    mid.conv{j}      at level D
    dec{l}.up        l = D-1..0     nearest 2x upsample, conv to level width
    dec{l}.conv{j}                  on concat(up, skip)
    head             1x1x1 conv to 12 channels, no activation
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .container import BadMagicError, HeaderError, LengthMismatchError, TruncatedError, UnsupportedVersionError
from .fieldgrid import TARGET_CHANNELS

OUT_CHANNELS = len(TARGET_CHANNELS)


@dataclass(frozen=True)
class ArchSpec:
    in_channels: int = 19
    out_channels: int = OUT_CHANNELS
    depth: int = 2
    base_width: int = 8
    kernel: int = 3
    convs_per_block: int = 2
    slope: float = 0.01

    def __post_init__(self):
        if self.out_channels != OUT_CHANNELS:
            raise ValueError(f"out_channels must be {OUT_CHANNELS}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")
        if self.depth < 0 or self.base_width < 1 or self.in_channels < 1:
            raise ValueError("depth >= 0, base_width >= 1 and in_channels >= 1 required")
        if self.convs_per_block < 1:
            raise ValueError("convs_per_block must be >= 1")

    def width(self, level: int) -> int:
        return self.base_width * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)


def layer_specs(arch: ArchSpec) -> list[tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, kernel) for every conv, in execution order."""
    k, n = arch.kernel, arch.convs_per_block
    specs = []
    cin = arch.in_channels
    for lvl in range(arch.depth):
        for j in range(n):
            specs.append((f"enc{lvl}.conv{j}", cin, arch.width(lvl), k))
            cin = arch.width(lvl)
    for j in range(n):
        specs.append((f"mid.conv{j}", cin, arch.width(arch.depth), k))
        cin = arch.width(arch.depth)
    for lvl in reversed(range(arch.depth)):
        specs.append((f"dec{lvl}.up", cin, arch.width(lvl), k))
        cin = 2 * arch.width(lvl)
        for j in range(n):
            specs.append((f"dec{lvl}.conv{j}", cin, arch.width(lvl), k))
            cin = arch.width(lvl)
    specs.append(("head", cin, arch.out_channels, 1))
    return specs


@dataclass(frozen=True)
class Slot:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def param_layout(arch: ArchSpec) -> list[Slot]:
    slots, off = [], 0
    for name, cin, cout, k in layer_specs(arch):
        for suffix, shape in ((".w", (cout, cin, k, k, k)), (".b", (cout,))):
            slot = Slot(name + suffix, shape, off)
            slots.append(slot)
            off += slot.size
    return slots


def param_count(arch: ArchSpec) -> int:
    return sum(s.size for s in param_layout(arch))


@dataclass(eq=False)
class UNetParams:
    arch: ArchSpec
    vector: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (param_count(self.arch),):
            raise ValueError(f"parameter vector has {self.vector.size} entries, "
                             f"arch needs {param_count(self.arch)}")

    @property
    def layout(self) -> list[Slot]:
        return param_layout(self.arch)

    def tensors(self) -> dict[str, np.ndarray]:
        return {s.name: self.vector[s.offset:s.offset + s.size].reshape(s.shape)
                for s in self.layout}

    def copy(self) -> "UNetParams":
        return UNetParams(self.arch, self.vector.copy(), self.seed)


def init_params(arch: ArchSpec, seed: int = 0) -> UNetParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    vec = np.zeros(param_count(arch))
    for s in param_layout(arch):
        if s.name.endswith(".w"):
            fan_in = math.prod(s.shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            vec[s.offset:s.offset + s.size] = rng.uniform(-bound, bound, s.size)
    return UNetParams(arch, vec, seed)


def check_input(arch: ArchSpec, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ValueError(f"input must have shape (C, nx, ny, nz), got {x.shape}")
    if x.shape[0] != arch.in_channels:
        raise ValueError(f"input has {x.shape[0]} channels, arch expects {arch.in_channels}")
    m = 2 ** arch.depth
    bad = [n for n in x.shape[1:] if n % m]
    if bad:
        raise ValueError(f"grid dims {x.shape[1:]} must be divisible by 2**depth = {m}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")


def forward(params: UNetParams, x: np.ndarray) -> tuple[np.ndarray, ad.Tape]:
    """Run the network on one ``(in_channels, nx, ny, nz)`` input.

    Returns the 12-channel prediction and the tape needed by :func:`backward`.
    """
    arch = params.arch
    x = np.asarray(x, dtype=np.float64)
    check_input(arch, x)
    tape = ad.Tape()
    tape.layout = params.layout
    P = {name: tape.leaf(t, name) for name, t in params.tensors().items()}

    def conv(h, name, act=True):
        h = ad.conv3d(h, P[name + ".w"], P[name + ".b"])
        return ad.leaky_relu(h, arch.slope) if act else h

    h = tape.leaf(x)
    skips = []
    for lvl in range(arch.depth):
        for j in range(arch.convs_per_block):
            h = conv(h, f"enc{lvl}.conv{j}")
        skips.append(h)
        h = ad.avg_pool2(h)
    for j in range(arch.convs_per_block):
        h = conv(h, f"mid.conv{j}")
    for lvl in reversed(range(arch.depth)):
        h = conv(ad.upsample2(h), f"dec{lvl}.up")
        h = ad.concat([h, skips[lvl]])
        for j in range(arch.convs_per_block):
            h = conv(h, f"dec{lvl}.conv{j}")
    out = conv(h, "head", act=False)
    tape.output = out
    return out.value, tape


def backward(tape: ad.Tape, loss_grad: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the flat parameter vector, given d loss / d output."""
    grads = tape.backward(tape.output, np.asarray(loss_grad, dtype=np.float64))
    flat = np.zeros(sum(s.size for s in tape.layout))
    for s in tape.layout:
        g = grads.get(tape.leaves[s.name].id)
        if g is not None:
            flat[s.offset:s.offset + s.size] = g.ravel()
    return flat


def count_receptive_field(arch: ArchSpec) -> int:
    """Largest voxel offset (per axis) an output voxel can depend on.

    With q = (kernel - 1) / 2 and n convs per block::

        R(depth) = n*q
        R(l)     = n*q + (2*R(l+1) + 1) + q + n*q

    The ``+1`` is the parity slack of pooling followed by nearest upsampling.
    """
    q, n = (arch.kernel - 1) // 2, arch.convs_per_block
    r = n * q
    for _ in range(arch.depth):
        r = n * q + 2 * r + 1 + q + n * q
    return r


# -- checkpoint file -----------------------------------------------------------------------

CKPT_MAGIC = b"EMW1"
CKPT_VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    params: UNetParams
    step: int = 0
    moments: tuple[np.ndarray, np.ndarray] | None = None
    extra: dict | None = None


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    p = ckpt.params
    header = {
        "version": CKPT_VERSION,
        "arch": p.arch.to_dict(),
        "seed": p.seed,
        "step": int(ckpt.step),
        "param_count": int(p.vector.size),
        "has_optimizer": ckpt.moments is not None,
        "extra": ckpt.extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = [p.vector] + (list(ckpt.moments) if ckpt.moments is not None else [])
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for a in arrays:
            f.write(np.asarray(a, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    buf = Path(path).read_bytes()
    return _parse_ckpt_header(buf)[0]


def _parse_ckpt_header(buf: bytes) -> tuple[dict, int]:
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(buf) < 8:
        raise TruncatedError("file ends inside the header length field")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + hlen:
        raise TruncatedError("file ends inside the header")
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"checkpoint header is not valid JSON: {exc}") from exc
    if header.get("version") != CKPT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {header.get('version')!r}")
    return header, 8 + hlen


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    header, off = _parse_ckpt_header(buf)
    arch = ArchSpec(**header["arch"])
    n = param_count(arch)
    if header["param_count"] != n:
        raise HeaderError(f"header param_count {header['param_count']} != arch count {n}")
    n_arrays = 3 if header["has_optimizer"] else 1
    expected = off + 8 * n * n_arrays
    if len(buf) < expected:
        raise TruncatedError("checkpoint payload is truncated")
    if len(buf) > expected:
        raise LengthMismatchError("checkpoint has trailing bytes")
    data = np.frombuffer(buf, dtype="<f8", offset=off).reshape(n_arrays, n).astype(np.float64)
    moments = (data[1].copy(), data[2].copy()) if n_arrays == 3 else None
    return Checkpoint(UNetParams(arch, data[0].copy(), header.get("seed")),
                      header["step"], moments, header.get("extra", {}))

"""Voxel-grid data model: geometry, phasor fields, materials, coil drives and samples.

Arrays are stored as numpy arrays of shape ``(nx, ny, nz)`` in C order, i.e.
x-major / y-middle / z-fastest.  Multi-channel quantities put the channel axis
first.  Complex phasors are kept as separate real and imaginary channels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

# Physical constants (SI).  Time convention is exp(+i*omega*t) throughout.
MU0 = 4e-7 * math.pi
EPS0 = 8.8541878128e-12
C0 = 1.0 / math.sqrt(MU0 * EPS0)
TIME_CONVENTION = "exp(+iwt)"

DEFAULT_FREQUENCY_HZ = 297.2e6
TESLA_PER_MICROTESLA = 1e-6

# Input normalisation scales.
DENSITY_SCALE = 1000.0  # kg/m^3
PERMITTIVITY_SCALE = 100.0 * EPS0  # relative permittivity / 100
CONDUCTIVITY_SCALE = 1.0  # S/m

DEFAULT_SIGMA_MIN = 0.05

# Single source of truth for target channel ordering.
COMPONENT_CHANNELS = ("re_x", "im_x", "re_y", "im_y", "re_z", "im_z")
TARGET_CHANNELS = tuple(f"E_{c}" for c in COMPONENT_CHANNELS) + tuple(
    f"B_{c}" for c in COMPONENT_CHANNELS
)
E_SLICE = slice(0, 6)
B_SLICE = slice(6, 12)
MATERIAL_CHANNELS = ("density", "permittivity", "conductivity")


def omega_of(frequency_hz: float) -> float:
    return 2.0 * math.pi * frequency_hz


class GeometryMismatchError(ValueError):
    """Raised when members of a sample do not share one grid geometry."""

    def __init__(self, member: str, expected: "GridGeom", got: "GridGeom | tuple"):
        self.member = member
        super().__init__(f"geometry mismatch in {member!r}: expected {expected}, got {got}")


class DegenerateMaskError(ValueError):
    pass


@dataclass(frozen=True)
class GridGeom:
    nx: int
    ny: int
    nz: int
    hx: float
    hy: float
    hz: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            n = getattr(self, name)
            if int(n) != n or n < 3:
                raise ValueError(f"{name} must be an integer >= 3, got {n}")
            object.__setattr__(self, name, int(n))
        for name in ("hx", "hy", "hz"):
            h = float(getattr(self, name))
            if not (math.isfinite(h) and h > 0):
                raise ValueError(f"{name} must be positive and finite, got {h}")
            object.__setattr__(self, name, h)
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError("origin must be a 3-vector")
        object.__setattr__(self, "origin", origin)

    @classmethod
    def cube(cls, n: int, h: float, origin=(0.0, 0.0, 0.0)) -> "GridGeom":
        return cls(n, n, n, h, h, h, origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (self.hx, self.hy, self.hz)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Voxel-centre coordinates along each axis, in metres."""
        return tuple(
            o + h * np.arange(n)
            for o, h, n in zip(self.origin, self.spacing, self.shape)
        )

    def mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.meshgrid(*self.axes(), indexing="ij")

    def to_dict(self) -> dict:
        return {
            "nx": self.nx, "ny": self.ny, "nz": self.nz,
            "hx": self.hx, "hy": self.hy, "hz": self.hz,
            "origin": list(self.origin),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridGeom":
        return cls(d["nx"], d["ny"], d["nz"], d["hx"], d["hy"], d["hz"],
                   tuple(d.get("origin", (0.0, 0.0, 0.0))))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, order="C", copy=True)
    a.setflags(write=False)
    return a


def _check_grid(member: str, geom: GridGeom, a, leading: tuple = ()) -> np.ndarray:
    a = np.asarray(a)
    if a.shape != leading + geom.shape:
        raise GeometryMismatchError(member, geom, a.shape)
    if a.dtype.kind != "b" and not np.all(np.isfinite(a)):
        raise ValueError(f"{member} contains non-finite values")
    return _frozen(a)


@dataclass(frozen=True, eq=False)
class ScalarGrid:
    """One real quantity sampled on the grid."""

    geom: GridGeom
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _check_grid("values", self.geom, self.values))


@dataclass(frozen=True, eq=False)
class VectorPhasorField:
    """Complex 3-vector field stored as six real channels.

    Channel order is ``COMPONENT_CHANNELS``: (Re x, Im x, Re y, Im y, Re z, Im z).
    E is in V/m and B in microtesla by convention.
    """

    geom: GridGeom
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _check_grid("data", self.geom, self.data, (6,)))

    @classmethod
    def from_complex(cls, geom: GridGeom, F: np.ndarray, dtype=np.float64) -> "VectorPhasorField":
        F = np.asarray(F)
        if F.shape != (3,) + geom.shape:
            raise GeometryMismatchError("field", geom, F.shape)
        data = np.empty((6,) + geom.shape, dtype=dtype)
        data[0::2] = F.real
        data[1::2] = F.imag
        return cls(geom, data)

    @classmethod
    def zeros(cls, geom: GridGeom) -> "VectorPhasorField":
        return cls(geom, np.zeros((6,) + geom.shape))

    def to_complex(self) -> np.ndarray:
        """Return the (3, nx, ny, nz) complex128 array."""
        d = self.data.astype(np.float64)
        return d[0::2] + 1j * d[1::2]

    def channel(self, name: str) -> ScalarGrid:
        return ScalarGrid(self.geom, self.data[COMPONENT_CHANNELS.index(name)])


@dataclass(frozen=True, eq=False)
class MaterialVolume:
    """Density (kg/m^3), absolute permittivity (F/m) and conductivity (S/m)."""

    geom: GridGeom
    density: np.ndarray
    permittivity: np.ndarray
    conductivity: np.ndarray

    def __post_init__(self):
        for name in MATERIAL_CHANNELS:
            object.__setattr__(self, name, _check_grid(name, self.geom, getattr(self, name)))
        if np.any(self.density < 0):
            raise ValueError("density must be >= 0")
        if np.any(self.conductivity < 0):
            raise ValueError("conductivity must be >= 0")
        if np.any(self.permittivity < EPS0 * 0.999):
            raise ValueError("permittivity below the vacuum floor")

    @classmethod
    def homogeneous(cls, geom: GridGeom, eps_r: float = 1.0, sigma: float = 0.0,
                    density: float = 0.0) -> "MaterialVolume":
        full = lambda v: np.full(geom.shape, float(v))
        return cls(geom, full(density), full(EPS0 * eps_r), full(sigma))


@dataclass(frozen=True, eq=False)
class CoilExcitation:
    """Per-element drive amplitude, phase (rad) and spatial occupancy in [0, 1]."""

    geom: GridGeom
    amplitude: np.ndarray
    phase: np.ndarray
    occupancy: np.ndarray

    def __post_init__(self):
        amp = _frozen(np.asarray(self.amplitude, dtype=np.float64).reshape(-1))
        ph = _frozen(np.asarray(self.phase, dtype=np.float64).reshape(-1))
        n = amp.size
        if n < 1 or ph.size != n:
            raise ValueError("amplitude and phase must be nonempty and equally long")
        if np.any(~np.isfinite(amp)) or np.any(amp < 0):
            raise ValueError("amplitudes must be finite and >= 0")
        if np.any(~np.isfinite(ph)) or np.any(ph < 0) or np.any(ph >= 2 * math.pi):
            raise ValueError("phases must lie in [0, 2*pi)")
        occ = _check_grid("occupancy", self.geom, self.occupancy, (n,))
        if np.any(occ < 0) or np.any(occ > 1):
            raise ValueError("occupancy must lie in [0, 1]")
        empty = [i for i in range(n) if not np.any(occ[i] > 0)]
        if empty:
            raise ValueError(f"coil occupancy is empty for channels {empty}")
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "phase", ph)
        object.__setattr__(self, "occupancy", occ)

    @property
    def channel_count(self) -> int:
        return self.amplitude.size


@dataclass(frozen=True, eq=False)
class SubjectMask:
    geom: GridGeom
    inside: np.ndarray

    def __post_init__(self):
        inside = _check_grid("inside", self.geom, np.asarray(self.inside, dtype=bool))
        if inside.all() or not inside.any():
            raise DegenerateMaskError(
                "subject mask must contain both inside and outside voxels")
        object.__setattr__(self, "inside", inside)


@dataclass(frozen=True, eq=False)
class SampleRecord:
    geom: GridGeom
    materials: MaterialVolume
    excitation: CoilExcitation
    target_E: VectorPhasorField
    target_B: VectorPhasorField
    mask: SubjectMask
    frequency_hz: float = DEFAULT_FREQUENCY_HZ
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("materials", "excitation", "target_E", "target_B", "mask"):
            g = getattr(self, name).geom
            if g != self.geom:
                raise GeometryMismatchError(name, self.geom, g)
        if not (math.isfinite(self.frequency_hz) and self.frequency_hz > 0):
            raise ValueError("frequency_hz must be positive")

    @property
    def omega(self) -> float:
        return omega_of(self.frequency_hz)

    def input_stack(self) -> np.ndarray:
        return build_input_stack(self.materials, self.excitation)

    def target_stack(self) -> np.ndarray:
        return pack_targets(self.target_E, self.target_B)


def build_input_stack(materials: MaterialVolume, excitation: CoilExcitation) -> np.ndarray:
    """Network input channels: 3 normalised materials then cos/sin drive maps per coil.

    Returns a float64 array of shape ``(3 + 2 * channel_count, nx, ny, nz)``.
    """
    if excitation.geom != materials.geom:
        raise GeometryMismatchError("excitation", materials.geom, excitation.geom)
    n = excitation.channel_count
    out = np.empty((3 + 2 * n,) + materials.geom.shape)
    out[0] = materials.density / DENSITY_SCALE
    out[1] = materials.permittivity / PERMITTIVITY_SCALE
    out[2] = materials.conductivity / CONDUCTIVITY_SCALE
    occ = excitation.occupancy.astype(np.float64)
    for c in range(n):
        a, ph = excitation.amplitude[c], excitation.phase[c]
        out[3 + 2 * c] = occ[c] * (a * math.cos(ph))
        out[4 + 2 * c] = occ[c] * (a * math.sin(ph))
    if not np.all(np.isfinite(out)):
        raise ValueError("input stack contains non-finite values")
    return out


def input_channel_names(channel_count: int) -> list[str]:
    names = [f"{m}_norm" for m in MATERIAL_CHANNELS]
    for c in range(channel_count):
        names += [f"coil{c}_cos", f"coil{c}_sin"]
    return names


def pack_targets(E: VectorPhasorField, B: VectorPhasorField) -> np.ndarray:
    if E.geom != B.geom:
        raise GeometryMismatchError("B", E.geom, B.geom)
    return np.concatenate([E.data, B.data], axis=0)


def unpack_targets(stack: np.ndarray, geom: GridGeom) -> tuple[VectorPhasorField, VectorPhasorField]:
    stack = np.asarray(stack)
    if stack.ndim != 4 or stack.shape[0] != len(TARGET_CHANNELS):
        raise ValueError(
            f"expected {len(TARGET_CHANNELS)} target channels, got array of shape {stack.shape}")
    return (VectorPhasorField(geom, stack[E_SLICE].copy()),
            VectorPhasorField(geom, stack[B_SLICE].copy()))


def subject_mask_from_materials(materials: MaterialVolume,
                                sigma_min: float = DEFAULT_SIGMA_MIN) -> SubjectMask:
    """Subject voxels are those with conductivity strictly above ``sigma_min``."""
    if not sigma_min >= 0:
        raise ValueError("sigma_min must be >= 0")
    inside = materials.conductivity > sigma_min
    if inside.all():
        raise DegenerateMaskError(
            f"every voxel has conductivity > {sigma_min} S/m; raise sigma_min")
    if not inside.any():
        raise DegenerateMaskError(
            f"no voxel has conductivity > {sigma_min} S/m; lower sigma_min")
    return SubjectMask(materials.geom, inside)

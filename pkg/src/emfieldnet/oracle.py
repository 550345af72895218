"""Exact time-harmonic Maxwell solutions used as synthetic ground truth.

Two families are provided: superposed plane waves in a homogeneous (possibly
lossy) medium, and arrays of radiating magnetic dipoles in a homogeneous
lossless medium.  Both satisfy the continuous Maxwell equations exactly, so
any discrete residual is pure truncation error of the difference stencil.

Fields follow the exp(+i*omega*t) convention: outgoing waves vary as
exp(-i*k*r) and ``Im(k) <= 0`` in lossy media.
"""
from __future__ import annotations

import cmath
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .container import write_container
from .fieldgrid import (
    DEFAULT_FREQUENCY_HZ,
    DEFAULT_SIGMA_MIN,
    EPS0,
    MU0,
    CoilExcitation,
    GridGeom,
    MaterialVolume,
    SampleRecord,
    VectorPhasorField,
    omega_of,
    subject_mask_from_materials,
)

_UT = 1e6  # tesla -> microtesla


@dataclass(frozen=True)
class Medium:
    eps_r: float = 1.0
    sigma: float = 0.0

    def __post_init__(self):
        if not self.eps_r >= 1:
            raise ValueError("eps_r must be >= 1")
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")


def complex_wavenumber(omega: float, medium: Medium = Medium()) -> complex:
    """k = omega * sqrt(mu0 * (eps0*eps_r - i*sigma/omega)), Re(k) > 0, Im(k) <= 0."""
    if not omega > 0:
        raise ValueError("omega must be positive")
    eps_c = EPS0 * medium.eps_r - 1j * medium.sigma / omega
    k = omega * cmath.sqrt(MU0 * eps_c)
    # principal sqrt of a 4th-quadrant number already lies in the 4th quadrant
    return complex(k.real, min(k.imag, 0.0))


def wavelength(omega: float, medium: Medium = Medium()) -> float:
    return 2 * math.pi / complex_wavenumber(omega, medium).real


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class PlaneWaveSpec:
    direction: tuple
    polarization: tuple
    amplitude: complex = 1.0
    medium: Medium = Medium()
    reference: tuple = (0.0, 0.0, 0.0)  # point where the phase is zero and |E| = |amplitude|

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        p = np.asarray(self.polarization, dtype=np.complex128)
        if d.shape != (3,) or p.shape != (3,):
            raise ValueError("direction and polarization must be 3-vectors")
        if abs(np.linalg.norm(d) - 1) > 1e-12:
            raise ValueError("direction must be a unit vector")
        if abs(np.dot(d, p)) > 1e-10 * np.linalg.norm(p):
            raise ValueError("polarization must be perpendicular to direction")


def eval_plane_wave(spec: PlaneWaveSpec | Sequence[PlaneWaveSpec], geom: GridGeom,
                    omega: float) -> tuple[VectorPhasorField, VectorPhasorField]:
    """E = p*a*exp(-i k d.(r-r0)), B = (k/omega) (d x p) E/p; B in microtesla.

    A sequence of specs is evaluated as their superposition.
    """
    specs = [spec] if isinstance(spec, PlaneWaveSpec) else list(spec)
    if not specs:
        raise ValueError("need at least one plane wave")
    X, Y, Z = geom.mesh()
    E = np.zeros((3,) + geom.shape, dtype=np.complex128)
    B = np.zeros_like(E)
    for s in specs:
        k = complex_wavenumber(omega, s.medium)
        d = np.asarray(s.direction, dtype=np.float64)
        p = np.asarray(s.polarization, dtype=np.complex128)
        r0 = np.asarray(s.reference, dtype=np.float64)
        phase = s.amplitude * np.exp(-1j * k * (d[0] * (X - r0[0]) + d[1] * (Y - r0[1])
                                                + d[2] * (Z - r0[2])))
        q = np.cross(d, p) * (k / omega) * _UT
        for a in range(3):
            E[a] += p[a] * phase
            B[a] += q[a] * phase
    return VectorPhasorField.from_complex(geom, E), VectorPhasorField.from_complex(geom, B)


@dataclass(frozen=True)
class DipoleElement:
    center: tuple
    moment_dir: tuple = (0.0, 0.0, 1.0)
    moment: complex = 0.01  # A*m^2
    amplitude: float = 1.0
    phase: float = 0.0

    @property
    def drive(self) -> complex:
        return self.moment * self.amplitude * cmath.exp(1j * self.phase)


@dataclass(frozen=True)
class DipoleArraySpec:
    elements: tuple
    medium: Medium = Medium()

    def __post_init__(self):
        if len(self.elements) < 1:
            raise ValueError("a dipole array needs at least one element")
        if self.medium.sigma != 0:
            raise ValueError("dipole oracle supports lossless media only")


def singular_radius(geom: GridGeom) -> float:
    return 2.0 * max(geom.spacing)


def _check_inside(geom: GridGeom, center) -> None:
    lo = np.asarray(geom.origin)
    hi = lo + (np.asarray(geom.shape) - 1) * np.asarray(geom.spacing)
    pad = 0.1 * (hi - lo)
    c = np.asarray(center, dtype=np.float64)
    if np.any(c < lo - pad) or np.any(c > hi + pad):
        raise ValueError(f"dipole center {center} outside the inflated grid box")


def dipole_fields_at(points: np.ndarray, center, m: np.ndarray, k: complex,
                     impedance: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact E (V/m) and B (tesla) of a time-harmonic magnetic dipole.

    ``points`` has shape (3, ...); ``m`` is the complex moment vector.
    """
    rel = points - np.asarray(center, dtype=np.float64).reshape((3,) + (1,) * (points.ndim - 1))
    r = np.sqrt(np.sum(rel ** 2, axis=0))
    n = rel / r
    m = np.asarray(m, dtype=np.complex128).reshape((3,) + (1,) * (points.ndim - 1))
    ndotm = np.sum(n * m, axis=0)
    nxm = np.cross(n, m, axis=0)
    g = np.exp(-1j * k * r)
    far = k ** 2 * np.cross(nxm, n, axis=0) / r
    near = (3 * n * ndotm - m) * (1 / r ** 3 + 1j * k / r ** 2)
    H = (far + near) * g / (4 * math.pi)
    E = -(impedance * k ** 2 / (4 * math.pi)) * nxm * g / r * (1 + 1 / (1j * k * r))
    return E, MU0 * H


def eval_dipole_array(spec: DipoleArraySpec, geom: GridGeom, omega: float
                      ) -> tuple[VectorPhasorField, VectorPhasorField, np.ndarray]:
    """Summed dipole fields (B in microtesla) and the boolean singular-voxel mask.

    Voxels closer than ``singular_radius(geom)`` to any element center are set
    to zero in both fields and flagged in the returned mask.
    """
    k = complex_wavenumber(omega, spec.medium)
    impedance = math.sqrt(MU0 / (EPS0 * spec.medium.eps_r))
    pts = np.stack(geom.mesh())
    r_min = singular_radius(geom)
    E = np.zeros((3,) + geom.shape, dtype=np.complex128)
    B = np.zeros_like(E)
    masked = np.zeros(geom.shape, dtype=bool)
    for el in spec.elements:
        _check_inside(geom, el.center)
        c = np.asarray(el.center, dtype=np.float64).reshape(3, 1, 1, 1)
        near = np.sqrt(np.sum((pts - c) ** 2, axis=0)) < r_min
        masked |= near
        m = _unit(el.moment_dir) * el.drive
        with np.errstate(divide="ignore", invalid="ignore"):
            e, b = dipole_fields_at(pts, el.center, m, k, impedance)
        e[:, near] = 0
        b[:, near] = 0
        E += e
        B += b * _UT
    E[:, masked] = 0
    B[:, masked] = 0
    return (VectorPhasorField.from_complex(geom, E), VectorPhasorField.from_complex(geom, B),
            masked)


# -- synthetic datasets ---------------------------------------------------------------------

FAMILIES = ("plane_waves", "dipole_array")


@dataclass
class DatasetSpec:
    family: str = "dipole_array"
    sample_count: int = 24
    n: tuple = (32, 32, 32)
    h: float | None = None  # default: shortest wavelength over the medium ranges / 40
    frequency_hz: float = DEFAULT_FREQUENCY_HZ
    seed: int = 0
    eps_r_range: tuple = (1.0, 1.0)
    sigma_range: tuple = (0.0, 0.0)
    train_fraction: float = 19 / 24
    test_fraction: float = 5 / 24
    coil_count: int = 8
    waves_range: tuple = (1, 4)
    ring_radius: float = 0.35  # fraction of the smallest grid extent
    moment: float = 0.01  # A*m^2 per dipole element
    amplitude_range: tuple = (0.5, 1.5)
    subject_sigma: float = 0.5
    subject_density: float = 1000.0
    subject_semi_axes: tuple = (0.15, 0.3)  # fraction of extent, per axis

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        if self.sample_count < 2:
            raise ValueError("sample_count must be >= 2")
        if not (self.train_fraction > 0 and self.test_fraction > 0
                and abs(self.train_fraction + self.test_fraction - 1) < 1e-9):
            raise ValueError("split fractions must be positive and sum to 1")
        if self.family == "dipole_array" and max(self.sigma_range) > 0:
            raise ValueError("dipole_array family requires a lossless medium")
        if self.coil_count < 1:
            raise ValueError("coil_count must be >= 1")
        self.n = tuple(int(v) for v in (self.n if np.ndim(self.n) else (self.n,) * 3))

    @property
    def geom(self) -> GridGeom:
        h = self.h if self.h is not None else self.default_spacing()
        nx, ny, nz = self.n
        # centre the grid on the origin
        origin = tuple(-0.5 * (m - 1) * h for m in self.n)
        return GridGeom(nx, ny, nz, h, h, h, origin)

    def default_spacing(self) -> float:
        # Re(k) grows with both eps_r and sigma, so the densest medium sets the resolution
        densest = Medium(max(self.eps_r_range), max(self.sigma_range))
        return wavelength(omega_of(self.frequency_hz), densest) / 40

    def split_sizes(self) -> tuple[int, int]:
        n_test = max(1, math.floor(self.test_fraction * self.sample_count + 1e-9))
        return self.sample_count - n_test, n_test

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        for key in ("n", "eps_r_range", "sigma_range", "waves_range", "amplitude_range",
                    "subject_semi_axes"):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "DatasetSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _subject(geom: GridGeom, spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    X, Y, Z = geom.mesh()
    extent = (np.asarray(geom.shape) - 1) * np.asarray(geom.spacing)
    lo, hi = spec.subject_semi_axes
    semi = rng.uniform(lo, hi, size=3) * extent
    shift = rng.uniform(-0.05, 0.05, size=3) * extent
    return (((X - shift[0]) / semi[0]) ** 2 + ((Y - shift[1]) / semi[1]) ** 2
            + ((Z - shift[2]) / semi[2]) ** 2) <= 1.0


def _materials(geom, spec, medium, inside) -> tuple[MaterialVolume, float]:
    density = np.where(inside, spec.subject_density, 0.0)
    sigma = np.where(inside, medium.sigma + spec.subject_sigma, medium.sigma)
    mats = MaterialVolume(geom, density, np.full(geom.shape, EPS0 * medium.eps_r), sigma)
    return mats, medium.sigma + DEFAULT_SIGMA_MIN


def _ring_centers(geom: GridGeom, spec: DatasetSpec) -> list[tuple]:
    extent = min((np.asarray(geom.shape) - 1) * np.asarray(geom.spacing))
    R = spec.ring_radius * extent
    return [(R * math.cos(2 * math.pi * c / spec.coil_count),
             R * math.sin(2 * math.pi * c / spec.coil_count), 0.0)
            for c in range(spec.coil_count)]


def _ball(geom: GridGeom, center, radius) -> np.ndarray:
    X, Y, Z = geom.mesh()
    return ((X - center[0]) ** 2 + (Y - center[1]) ** 2 + (Z - center[2]) ** 2) < radius ** 2


def _entry_face(geom: GridGeom, d: np.ndarray) -> np.ndarray:
    """One-voxel layer on the face the wave enters through."""
    occ = np.zeros(geom.shape)
    a = int(np.argmax(np.abs(d)))
    idx = [slice(None)] * 3
    idx[a] = 0 if d[a] > 0 else -1
    occ[tuple(idx)] = 1.0
    return occ


def _entry_corner(geom: GridGeom, d: np.ndarray) -> tuple:
    """Grid corner the wave reaches first, so lossy waves decay into the box."""
    lo = np.asarray(geom.origin)
    hi = lo + (np.asarray(geom.shape) - 1) * np.asarray(geom.spacing)
    return tuple(float(v) for v in np.where(d >= 0, lo, hi))


def _random_wave(rng, medium) -> PlaneWaveSpec:
    d = _unit(rng.standard_normal(3))
    t1 = _unit(np.cross(d, [1.0, 0.0, 0.0] if abs(d[0]) < 0.9 else [0.0, 1.0, 0.0]))
    t2 = np.cross(d, t1)
    psi = rng.uniform(0, 2 * math.pi)
    p = math.cos(psi) * t1 + math.sin(psi) * t2
    return PlaneWaveSpec(tuple(d), tuple(p), 1.0, medium)


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32)


def make_sample(spec: DatasetSpec, rng: np.random.Generator) -> SampleRecord:
    """Draw one sample; all array payloads are rounded to float32."""
    geom = spec.geom
    omega = omega_of(spec.frequency_hz)
    medium = Medium(float(rng.uniform(*spec.eps_r_range)), float(rng.uniform(*spec.sigma_range)))
    inside = _subject(geom, spec, rng)
    mats, sigma_min = _materials(geom, spec, medium, inside)
    mask = subject_mask_from_materials(mats, sigma_min)
    amps = rng.uniform(*spec.amplitude_range, size=spec.coil_count)
    phases = rng.uniform(0, 2 * math.pi, size=spec.coil_count)
    meta = {"family": spec.family, "medium": {"eps_r": medium.eps_r, "sigma": medium.sigma}}

    if spec.family == "dipole_array":
        r_min = singular_radius(geom)
        centers = _ring_centers(geom, spec)
        elements = tuple(DipoleElement(c, (0, 0, 1), spec.moment, float(a), float(p))
                         for c, a, p in zip(centers, amps, phases))
        E, B, masked = eval_dipole_array(DipoleArraySpec(elements, medium), geom, omega)
        occupancy = np.stack([_ball(geom, c, r_min) for c in centers]).astype(np.float64)
        meta["singular_radius"] = r_min
        meta["masked_voxels"] = int(masked.sum())
    else:
        n_waves = int(rng.integers(spec.waves_range[0], spec.waves_range[1] + 1))
        if n_waves > spec.coil_count:
            raise ValueError("coil_count must be >= the maximum number of waves")
        waves = [_random_wave(rng, medium) for _ in range(spec.coil_count)]
        amps[n_waves:] = 0.0
        drives = [PlaneWaveSpec(w.direction, w.polarization, a * cmath.exp(1j * p), medium,
                                _entry_corner(geom, np.asarray(w.direction)))
                  for w, a, p in zip(waves[:n_waves], amps, phases)]
        E, B = eval_plane_wave(drives, geom, omega)
        occupancy = np.stack([_entry_face(geom, np.asarray(w.direction)) for w in waves])
        meta["directions"] = [list(w.direction) for w in waves[:n_waves]]

    mats32 = MaterialVolume(geom, _f32(mats.density), _f32(mats.permittivity),
                            _f32(mats.conductivity))
    return SampleRecord(
        geom=geom,
        materials=mats32,
        excitation=CoilExcitation(geom, amps, phases, _f32(occupancy)),
        target_E=VectorPhasorField(geom, _f32(E.data)),
        target_B=VectorPhasorField(geom, _f32(B.data)),
        mask=mask,
        frequency_hz=spec.frequency_hz,
        meta=meta,
    )


def make_samples(spec: DatasetSpec) -> list[SampleRecord]:
    rng = np.random.default_rng(spec.seed)
    return [make_sample(spec, rng) for _ in range(spec.sample_count)]


def generate_dataset(spec: DatasetSpec, out_dir, prefix: str = "") -> tuple[Path, Path]:
    """Write ``train.emg`` and ``test.emg`` into ``out_dir``; train gets the first samples."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = make_samples(spec)
    n_train, _ = spec.split_sizes()
    train_path = out_dir / f"{prefix}train.emg"
    test_path = out_dir / f"{prefix}test.emg"
    write_container(train_path, samples[:n_train])
    write_container(test_path, samples[n_train:])
    return train_path, test_path

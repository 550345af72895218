"""Second-order central-difference vector calculus on collocated voxel grids.

All operators act on arrays whose last three axes are (x, y, z) and return
values only on the interior (one voxel layer removed from every face); the
boundary layer of every output is exactly zero.  Inputs may be real or
complex; real and imaginary parts are differenced independently since the
stencil coefficients are real.

Each operator ``D`` has an exact transpose ``D^T`` satisfying
``<D f, g> = <f, D^T g>`` for ``g`` supported on the interior, which is what
the reverse pass of the physics losses uses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fieldgrid import (
    MU0,
    TESLA_PER_MICROTESLA,
    GeometryMismatchError,
    MaterialVolume,
    VectorPhasorField,
)

_INNER = (slice(1, -1),) * 3


@dataclass(frozen=True)
class StencilSpec:
    scheme: str = "central2"
    boundary: str = "interior-only"

    def __post_init__(self):
        if self.scheme != "central2" or self.boundary != "interior-only":
            raise ValueError(f"unsupported stencil {self.scheme}/{self.boundary}")


CENTRAL2 = StencilSpec()

RESIDUAL_KINDS = ("gauss_B", "faraday", "ampere")


@dataclass(frozen=True, eq=False)
class ResidualField:
    """Complex residual on the grid; zero outside the interior."""

    geom: object
    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in RESIDUAL_KINDS:
            raise ValueError(f"unknown residual kind {self.kind!r}")
        outside = ~interior_mask(np.shape(self.values))
        if np.any(np.asarray(self.values)[..., outside]):
            raise ValueError("residual values must be zero outside the interior")


def _check_shape(shape):
    if len(shape) < 3 or min(shape[-3:]) < 3:
        raise ValueError(f"every grid dimension must be >= 3 for central differences, got {shape[-3:]}")


def interior_mask(shape) -> np.ndarray:
    m = np.zeros(shape[-3:], dtype=bool)
    m[_INNER] = True
    return m


def _d(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Central difference along one spatial axis, evaluated on the interior block."""
    lead = (Ellipsis,)
    sl = [slice(1, -1)] * 3
    sl[axis] = slice(2, None)
    fwd = f[lead + tuple(sl)]
    sl[axis] = slice(None, -2)
    bwd = f[lead + tuple(sl)]
    return (fwd - bwd) / (2.0 * h)


def _d_adjoint_add(out: np.ndarray, g: np.ndarray, axis: int, h: float) -> None:
    """Accumulate the transpose of ``_d`` applied to interior block ``g`` into ``out``."""
    sl = [slice(1, -1)] * 3
    gh = g / (2.0 * h)
    sl[axis] = slice(2, None)
    out[(Ellipsis,) + tuple(sl)] += gh
    sl[axis] = slice(None, -2)
    out[(Ellipsis,) + tuple(sl)] -= gh


def divergence(F: np.ndarray, h, stencil: StencilSpec = CENTRAL2) -> np.ndarray:
    """Divergence of ``F`` with shape ``(..., 3, nx, ny, nz)``."""
    F = np.asarray(F)
    _check_shape(F.shape)
    hx, hy, hz = h
    out = np.zeros(F.shape[:-4] + F.shape[-3:], dtype=np.result_type(F.dtype, np.float64))
    out[(Ellipsis,) + _INNER] = (_d(F[..., 0, :, :, :], 0, hx)
                                 + _d(F[..., 1, :, :, :], 1, hy)
                                 + _d(F[..., 2, :, :, :], 2, hz))
    return out


def divergence_adjoint(G: np.ndarray, h, stencil: StencilSpec = CENTRAL2) -> np.ndarray:
    G = np.asarray(G)
    _check_shape(G.shape)
    g = G[(Ellipsis,) + _INNER]
    out = np.zeros(G.shape[:-3] + (3,) + G.shape[-3:], dtype=np.result_type(G.dtype, np.float64))
    for a in range(3):
        _d_adjoint_add(out[..., a, :, :, :], g, a, h[a])
    return out


def curl(F: np.ndarray, h, stencil: StencilSpec = CENTRAL2) -> np.ndarray:
    """Curl of ``F`` with shape ``(..., 3, nx, ny, nz)``."""
    F = np.asarray(F)
    _check_shape(F.shape)
    hx, hy, hz = h
    Fx, Fy, Fz = (F[..., a, :, :, :] for a in range(3))
    out = np.zeros(F.shape, dtype=np.result_type(F.dtype, np.float64))
    out[(Ellipsis, 0) + _INNER] = _d(Fz, 1, hy) - _d(Fy, 2, hz)
    out[(Ellipsis, 1) + _INNER] = _d(Fx, 2, hz) - _d(Fz, 0, hx)
    out[(Ellipsis, 2) + _INNER] = _d(Fy, 0, hx) - _d(Fx, 1, hy)
    return out


def curl_adjoint(G: np.ndarray, h, stencil: StencilSpec = CENTRAL2) -> np.ndarray:
    G = np.asarray(G)
    _check_shape(G.shape)
    hx, hy, hz = h
    gx, gy, gz = (G[(Ellipsis, a) + _INNER] for a in range(3))
    out = np.zeros(G.shape, dtype=np.result_type(G.dtype, np.float64))
    _d_adjoint_add(out[..., 2, :, :, :], gx, 1, hy)
    _d_adjoint_add(out[..., 1, :, :, :], -gx, 2, hz)
    _d_adjoint_add(out[..., 0, :, :, :], gy, 2, hz)
    _d_adjoint_add(out[..., 2, :, :, :], -gy, 0, hx)
    _d_adjoint_add(out[..., 1, :, :, :], gz, 0, hx)
    _d_adjoint_add(out[..., 0, :, :, :], -gz, 1, hy)
    return out


def to_complex(channels: np.ndarray) -> np.ndarray:
    """(..., 6, nx, ny, nz) Re/Im channels -> (..., 3, nx, ny, nz) complex."""
    channels = np.asarray(channels, dtype=np.float64)
    return channels[..., 0::2, :, :, :] + 1j * channels[..., 1::2, :, :, :]


def to_channels(F: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_complex`."""
    out = np.empty(F.shape[:-4] + (6,) + F.shape[-3:])
    out[..., 0::2, :, :, :] = F.real
    out[..., 1::2, :, :, :] = F.imag
    return out


def _same_geom(E: VectorPhasorField, B: VectorPhasorField):
    if E.geom != B.geom:
        raise GeometryMismatchError("B", E.geom, B.geom)


def gauss_residual_B(B: VectorPhasorField, stencil: StencilSpec = CENTRAL2) -> ResidualField:
    return ResidualField(B.geom, divergence(B.to_complex(), B.geom.spacing), "gauss_B")


def faraday_residual(E: VectorPhasorField, B: VectorPhasorField, omega: float,
                     stencil: StencilSpec = CENTRAL2) -> ResidualField:
    """curl E + i*omega*B, with B converted from microtesla to tesla."""
    _same_geom(E, B)
    return ResidualField(E.geom, _faraday(E.to_complex(), B.to_complex(), E.geom.spacing, omega),
                         "faraday")


def ampere_residual(E: VectorPhasorField, B: VectorPhasorField, materials: MaterialVolume,
                    omega: float, stencil: StencilSpec = CENTRAL2) -> ResidualField:
    """curl B / mu0 - (sigma + i*omega*eps) E, with B converted to tesla."""
    _same_geom(E, B)
    if materials.geom != E.geom:
        raise GeometryMismatchError("materials", E.geom, materials.geom)
    r = _ampere(E.to_complex(), B.to_complex(), E.geom.spacing, omega,
                materials.permittivity.astype(np.float64),
                materials.conductivity.astype(np.float64))
    return ResidualField(E.geom, r, "ampere")


def _faraday(E, B, h, omega):
    r = curl(E, h)
    r[(Ellipsis,) + _INNER] += (1j * omega * TESLA_PER_MICROTESLA) * B[(Ellipsis,) + _INNER]
    return r


def _admittivity(omega, eps, sigma):
    return np.asarray(sigma) + 1j * omega * np.asarray(eps)


def _ampere(E, B, h, omega, eps, sigma):
    r = curl(B, h) * (TESLA_PER_MICROTESLA / MU0)
    y = np.broadcast_to(_admittivity(omega, eps, sigma), E.shape[-3:])
    r[(Ellipsis,) + _INNER] -= y[_INNER] * E[(Ellipsis,) + _INNER]
    return r


def _interior_count(shape) -> int:
    return (shape[-3] - 2) * (shape[-2] - 2) * (shape[-1] - 2)


def physics_loss(residual) -> float:
    """Mean over interior voxels of |r|^2, summed over vector components."""
    r = residual.values if isinstance(residual, ResidualField) else np.asarray(residual)
    inner = r[(Ellipsis,) + _INNER]
    return float(np.sum(inner.real ** 2 + inner.imag ** 2) / _interior_count(r.shape))


# Loss-and-gradient helpers on the 6-channel real layout used by the network.
# Gradients are with respect to the real Re/Im channels.

def gauss_loss_and_grad(B6: np.ndarray, h) -> tuple[float, np.ndarray]:
    r = divergence(to_complex(B6), h)
    n = _interior_count(r.shape)
    loss = float(np.sum(r.real ** 2 + r.imag ** 2) / n)
    g = divergence_adjoint(r * (2.0 / n), h)
    return loss, to_channels(g)


def faraday_loss_and_grad(E6, B6, h, omega) -> tuple[float, np.ndarray, np.ndarray]:
    E, B = to_complex(E6), to_complex(B6)
    r = _faraday(E, B, h, omega)
    n = _interior_count(r.shape)
    loss = float(np.sum(r.real ** 2 + r.imag ** 2) / n)
    gr = r * (2.0 / n)
    gE = curl_adjoint(gr, h)
    gB = np.conj(1j * omega * TESLA_PER_MICROTESLA) * gr
    return loss, to_channels(gE), to_channels(gB)


def ampere_loss_and_grad(E6, B6, h, omega, eps, sigma) -> tuple[float, np.ndarray, np.ndarray]:
    E, B = to_complex(E6), to_complex(B6)
    r = _ampere(E, B, h, omega, eps, sigma)
    n = _interior_count(r.shape)
    loss = float(np.sum(r.real ** 2 + r.imag ** 2) / n)
    gr = r * (2.0 / n)
    gB = curl_adjoint(gr, h) * (TESLA_PER_MICROTESLA / MU0)
    y = np.broadcast_to(_admittivity(omega, eps, sigma), E.shape[-3:])
    gE = -np.conj(y) * gr
    return loss, to_channels(gE), to_channels(gB)

"""Discrete divergence and curl on a collocated grid.

Walks through the central-difference operators: what they return, where
they are defined, the identities they satisfy exactly, and how their error
on a travelling wave shrinks as the grid is refined.
"""
import math

import numpy as np

from emfieldnet import diffops
from emfieldnet.fieldgrid import GridGeom, omega_of
from emfieldnet.oracle import PlaneWaveSpec, complex_wavenumber, eval_plane_wave

rng = np.random.default_rng(0)

# Operators return full-size arrays that are zero on the outermost layer.
h = (0.01, 0.012, 0.009)
F = rng.standard_normal((3, 12, 11, 10)) + 1j * rng.standard_normal((3, 12, 11, 10))
div = diffops.divergence(F, h)
print("divergence shape", div.shape, "| boundary all zero:", not div[0].any())

# div(curl F) vanishes on the doubly-interior block, to roundoff.
dc = diffops.divergence(diffops.curl(F, h), h)[2:-2, 2:-2, 2:-2]
print(f"max |div curl F| = {np.max(np.abs(dc)):.2e}")

# The adjoints are exact transposes: <s, div F> = <div* s, F>.
s = rng.standard_normal(F.shape[1:])
lhs = np.vdot(s, div)
rhs = np.vdot(diffops.divergence_adjoint(s, h), F)
print(f"adjoint mismatch {abs(lhs - rhs) / abs(lhs):.1e}")

# Faraday residual of an exact plane wave: pure truncation error, second order.
omega = omega_of(297.2e6)
k = complex_wavenumber(omega)
lam = 2 * math.pi / k.real
print("\nper-wavelength  normalised Faraday residual")
for n in (20, 40, 80):
    g = GridGeom(5, 5, 24, lam / n, lam / n, lam / n)
    E, B = eval_plane_wave(PlaneWaveSpec((0, 0, 1), (1, 0, 0)), g, omega)
    r = diffops.faraday_residual(E, B, omega).values[:, 1:-1, 1:-1, 1:-1]
    ref = omega * 1e-6 * np.max(np.abs(B.to_complex()))
    kh = 2 * math.pi / n
    print(f"  lambda/{n:<3d}      {np.max(np.abs(r)) / ref:.4e}   (1 - sin(kh)/kh = {1 - math.sin(kh) / kh:.4e})")

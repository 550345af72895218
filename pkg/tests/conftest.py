import math

import numpy as np
import pytest

from emfieldnet.fieldgrid import (
    EPS0, CoilExcitation, GridGeom, MaterialVolume, SampleRecord, SubjectMask, VectorPhasorField,
)

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(name: str, passed: bool, detail: str = ""):
        line = f"{'PASS' if passed else 'FAIL'}  {name}  {detail}"
        _ACCEPTANCE.append((name, passed, detail))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for name, passed, detail in _ACCEPTANCE:
            terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_record(n=8, coils=2, seed=0, dtype=np.float32) -> SampleRecord:
    """Small random record whose payloads are float32-exact."""
    r = np.random.default_rng(seed)
    geom = GridGeom.cube(n, 0.01)
    f = lambda *shape: r.standard_normal(shape).astype(dtype)
    sigma = np.zeros(geom.shape, dtype=dtype)
    sigma[1:-1, 1:-1, 1:-1] = 0.5
    mats = MaterialVolume(geom, np.abs(f(n, n, n)) * 1000,
                          (EPS0 * (1 + np.abs(f(n, n, n)))).astype(dtype), sigma)
    occ = (r.uniform(size=(coils, n, n, n)) > 0.7).astype(dtype)
    exc = CoilExcitation(geom, r.uniform(0, 2, coils), r.uniform(0, 2 * math.pi, coils), occ)
    return SampleRecord(geom, mats, exc, VectorPhasorField(geom, f(6, n, n, n)),
                        VectorPhasorField(geom, f(6, n, n, n)), SubjectMask(geom, sigma > 0.05),
                        meta={"note": "random"})

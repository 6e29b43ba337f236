import numpy as np
import pytest

from sixwave.biphoton import SpatialWavefunction
from sixwave.geometry import (
    BeamField,
    BeamLabel,
    EnsembleGeometry,
    excited_spinwave,
    signal_wavelength,
    spinwave_from_transverse,
    wavevector_of,
)

_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str = ""):
        _ACCEPTANCE.append((number, title, bool(ok), detail))
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}  {detail}"
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {number}. {title}  {detail}")


def make_wavefunction(K_perp=(0.0, 0.0), geometry=None, lambda_i=795.0):
    """Collinear axial pumps, Seed along z, Write tilted to give K_perp."""
    sw = spinwave_from_transverse(K_perp)
    p1 = wavevector_of(BeamField.axial(780.0, BeamLabel.PUMP1))
    p2 = wavevector_of(BeamField.axial(776.0, BeamLabel.PUMP2))
    esw = excited_spinwave(sw, p1, p2)
    return SpatialWavefunction(geometry or EnsembleGeometry(), esw.K, signal_wavelength(), lambda_i)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

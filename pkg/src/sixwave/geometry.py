"""Wavevector algebra, spin-wave construction and phase mismatch.

Units are fixed across the package: rad/mm for wavevectors, nm for
wavelengths, mm for lengths, ns for times and 1/us for rates.

The 6.8 GHz ground-state hyperfine splitting between the Write and Seed
fields is ignored when converting wavelengths to |k| (a 1e-5 relative
effect).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import constants

RB87_MASS = 86.909180527 * constants.atomic_mass  # kg

DEFAULT_WAVELENGTHS = {
    "write": 795.0,
    "seed": 795.0,
    "pump1": 780.0,
    "pump2": 776.0,
    "idler": 795.0,
}


class GeometryError(ValueError):
    """Invalid beam, spin-wave or ensemble parameters."""


class AmplitudeOutOfRange(GeometryError):
    pass


class WrongSpinWaveKind(GeometryError):
    pass


class EvanescentModeError(GeometryError):
    """Transverse wavevector exceeds the total wavenumber."""


class BeamLabel(enum.Enum):
    WRITE = "write"
    SEED = "seed"
    PUMP1 = "pump1"
    PUMP2 = "pump2"
    SIGNAL = "signal"
    IDLER = "idler"


class SpinWaveKind(enum.Enum):
    GROUND = "ground"  # rho_hg
    EXCITED = "excited"  # rho_cg


@dataclass(frozen=True)
class Wavevector:
    kx: float
    ky: float
    kz: float

    def __add__(self, other: "Wavevector") -> "Wavevector":
        return Wavevector(self.kx + other.kx, self.ky + other.ky, self.kz + other.kz)

    def __sub__(self, other: "Wavevector") -> "Wavevector":
        return Wavevector(self.kx - other.kx, self.ky - other.ky, self.kz - other.kz)

    def __neg__(self) -> "Wavevector":
        return Wavevector(-self.kx, -self.ky, -self.kz)

    @property
    def perp(self) -> np.ndarray:
        return np.array([self.kx, self.ky])

    @property
    def norm(self) -> float:
        return math.sqrt(self.kx**2 + self.ky**2 + self.kz**2)

    def as_array(self) -> np.ndarray:
        return np.array([self.kx, self.ky, self.kz])

    @classmethod
    def zero(cls) -> "Wavevector":
        return cls(0.0, 0.0, 0.0)


def wavenumber(wavelength_nm: float) -> float:
    """2*pi/lambda in rad/mm."""
    return 2.0 * math.pi / (wavelength_nm * 1e-6)


def direction_from_angles(angle_x_mrad: float, angle_y_mrad: float) -> tuple[float, float, float]:
    """Unit vector whose transverse components are sin of the two angles."""
    sx = math.sin(angle_x_mrad * 1e-3)
    sy = math.sin(angle_y_mrad * 1e-3)
    rest = 1.0 - sx * sx - sy * sy
    if rest <= 0.0:
        raise GeometryError("transverse angles do not describe a forward-propagating beam")
    return (sx, sy, math.sqrt(rest))


@dataclass(frozen=True)
class BeamField:
    wavelength: float  # nm
    direction: tuple[float, float, float]
    label: BeamLabel

    def __post_init__(self):
        if not self.wavelength > 0:
            raise GeometryError(f"wavelength must be positive, got {self.wavelength}")
        d = tuple(float(c) for c in self.direction)
        if len(d) != 3:
            raise GeometryError("direction must be a 3-vector")
        if abs(math.sqrt(sum(c * c for c in d)) - 1.0) > 1e-12:
            raise GeometryError(f"direction {d} is not a unit vector")
        object.__setattr__(self, "direction", d)

    @classmethod
    def from_angles(cls, wavelength: float, angle_x_mrad: float, angle_y_mrad: float,
                    label: BeamLabel) -> "BeamField":
        return cls(wavelength, direction_from_angles(angle_x_mrad, angle_y_mrad), label)

    @classmethod
    def axial(cls, wavelength: float, label: BeamLabel, backward: bool = False) -> "BeamField":
        return cls(wavelength, (0.0, 0.0, -1.0 if backward else 1.0), label)


@dataclass(frozen=True)
class SpinWave:
    K: Wavevector
    beta: complex
    kind: SpinWaveKind

    def __post_init__(self):
        if abs(self.beta) > 1.0:
            raise AmplitudeOutOfRange(f"|beta| = {abs(self.beta):.6g} exceeds 1")


@dataclass(frozen=True)
class EnsembleGeometry:
    sigma_x: float = 0.3  # mm
    sigma_y: float = 0.3
    sigma_z: float = 2.5
    temperature: float = 22.0  # uK
    atomic_mass: float = field(default=RB87_MASS)  # kg

    def __post_init__(self):
        if min(self.sigma_x, self.sigma_y) <= 0:
            raise GeometryError("transverse ensemble widths must be positive")
        if self.sigma_z < 0:
            # zero length switches longitudinal phase matching off
            raise GeometryError("sigma_z must be non-negative")
        if self.temperature < 0:
            raise GeometryError("temperature must be non-negative")
        if self.atomic_mass <= 0:
            raise GeometryError("atomic mass must be positive")


def wavevector_of(beam: BeamField) -> Wavevector:
    k = wavenumber(beam.wavelength)
    dx, dy, dz = beam.direction
    return Wavevector(k * dx, k * dy, k * dz)


def ground_spinwave(kW: Wavevector, kSd: Wavevector, beta: complex = 1.0) -> SpinWave:
    """Ground-state coherence written by the Write/Seed pair: K = kW - kSd."""
    return SpinWave(kW - kSd, complex(beta), SpinWaveKind.GROUND)


def excited_spinwave(sw: SpinWave, kP1: Wavevector, kP2: Wavevector,
                     transfer_efficiency: float = 1.0) -> SpinWave:
    """Transfer a ground-state spin wave to the upper excited state with the two pumps."""
    if sw.kind is not SpinWaveKind.GROUND:
        raise WrongSpinWaveKind("excited_spinwave expects a ground-state spin wave")
    if not 0.0 <= transfer_efficiency <= 1.0:
        raise GeometryError("transfer efficiency must lie in [0, 1]")
    K = Wavevector(sw.K.kx + kP1.kx + kP2.kx,
                   sw.K.ky + kP1.ky + kP2.ky,
                   sw.K.kz + kP1.kz + kP2.kz)
    return SpinWave(K, sw.beta * transfer_efficiency, SpinWaveKind.EXCITED)


def longitudinal(k: float, k_perp_sq):
    """sqrt(k^2 - |k_perp|^2), evaluated exactly (no paraxial expansion)."""
    arg = k * k - np.asarray(k_perp_sq, dtype=float)
    if np.any(arg < 0):
        raise EvanescentModeError("transverse wavevector exceeds |k|")
    return np.sqrt(arg)


def delta_k(K_esw: Wavevector, ks_perp, ki_perp, lambda_s: float, lambda_i: float):
    """Transverse and longitudinal phase mismatch for a signal/idler pair.

    ``K_esw`` is the excited-state spin-wave wavevector, i.e. it already
    includes both pump wavevectors. ``ks_perp`` and ``ki_perp`` are arrays
    whose last axis has length 2 and broadcast against each other.

    Returns ``(dk_perp, dk_z)`` with ``dk_perp`` of shape ``(..., 2)``.
    """
    ks_perp = np.asarray(ks_perp, dtype=float)
    ki_perp = np.asarray(ki_perp, dtype=float)
    ks = wavenumber(lambda_s)
    ki = wavenumber(lambda_i)
    dk_perp = K_esw.perp - ks_perp - ki_perp
    ksz = longitudinal(ks, np.sum(ks_perp**2, axis=-1))
    kiz = longitudinal(ki, np.sum(ki_perp**2, axis=-1))
    dk_z = K_esw.kz - ksz - kiz
    return dk_perp, dk_z


def signal_wavelength(lambda_w: float = 795.0, lambda_sd: float = 795.0,
                      lambda_p1: float = 780.0, lambda_p2: float = 776.0,
                      lambda_i: float = 795.0) -> float:
    """Signal wavelength fixed by energy conservation over the whole cycle."""
    inv = 1.0 / lambda_w - 1.0 / lambda_sd + 1.0 / lambda_p1 + 1.0 / lambda_p2 - 1.0 / lambda_i
    if inv <= 0:
        raise GeometryError("wavelengths leave no energy for the signal photon")
    return 1.0 / inv


def motional_decay_rate(K: Wavevector, geom: EnsembleGeometry) -> float:
    """Thermal dephasing rate |K| sqrt(kB T / m) of a spin wave, in 1/us.

    Atoms moving ballistically with a Maxwell velocity distribution wash out
    the phase exp(iK.r) and the coherence decays as a Gaussian in time;
    ``1/rate`` is its characteristic decay time.
    """
    v_thermal = math.sqrt(constants.k * geom.temperature * 1e-6 / geom.atomic_mass)  # m/s
    k_per_m = K.norm * 1e3
    return k_per_m * v_thermal * 1e-6


def write_beam_for(K_perp, lambda_w: float = 795.0) -> BeamField:
    """Write beam tilted so that, with an axial Seed, K_perp = kW_perp."""
    kx, ky = (float(c) for c in K_perp)
    k = wavenumber(lambda_w)
    dx, dy = kx / k, ky / k
    rest = 1.0 - dx * dx - dy * dy
    if rest <= 0:
        raise EvanescentModeError("requested |K_perp| exceeds the Write wavenumber")
    return BeamField(lambda_w, (dx, dy, math.sqrt(rest)), BeamLabel.WRITE)


def spinwave_from_transverse(K_perp, lambda_w: float = 795.0, lambda_sd: float = 795.0,
                             beta: complex = 1.0) -> SpinWave:
    """Ground-state spin wave with prescribed transverse part, Seed along z.

    The longitudinal component follows from the beam geometry and is
    slightly negative, K_z = sqrt(kW^2 - |K_perp|^2) - kSd.
    """
    kW = wavevector_of(write_beam_for(K_perp, lambda_w))
    kSd = wavevector_of(BeamField.axial(lambda_sd, BeamLabel.SEED))
    return ground_spinwave(kW, kSd, beta)

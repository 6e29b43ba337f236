"""Closed-form biphoton predictions.

Spatial part: peak-normalised psi_k built from the transverse Fourier
transform of a Gaussian cloud and the longitudinal mismatch factor
exp(-dk_z^2 sigma_z^2).  Temporal part: single-sided exponential psi_t and
the detector-smeared cross-correlation model used for fitting.  Also the
phase-matched idler pattern integral, the Cauchy-Schwarz parameter and the
linear/nonlinear susceptibilities of the two-photon cascade.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import constants

from .geometry import (
    EnsembleGeometry,
    Wavevector,
    delta_k,
    wavenumber,
)

NATURAL_LIFETIME_D = 27.7  # ns, intermediate state |d>
DEFAULT_DT = 3.85  # ns, time-tagger resolution


class DomainTooSmallWarning(UserWarning):
    """The signal-wavevector integration domain truncates the integrand."""


# ---------------------------------------------------------------------------
# temporal part
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TemporalWavefunction:
    tau0: float  # ns

    def __post_init__(self):
        if not self.tau0 > 0:
            raise ValueError("tau0 must be positive")

    @property
    def norm(self) -> float:
        """N such that the integral of |psi_t|^2 over tau >= 0 is one."""
        return self.tau0 ** -0.5


def psi_t(tau, p: TemporalWavefunction):
    tau = np.asarray(tau, dtype=float)
    out = np.where(tau >= 0, p.norm * np.exp(-np.where(tau >= 0, tau, 0.0) / (2 * p.tau0)), 0.0)
    return out.astype(complex) if out.ndim else complex(out)


@dataclass(frozen=True)
class FitModelParams:
    alpha: float
    tau0: float  # ns
    dt: float = DEFAULT_DT  # ns

    def __post_init__(self):
        if self.alpha < 0 or not self.tau0 > 0 or not self.dt > 0:
            raise ValueError(f"invalid fit-model parameters {self}")


def _box_response(tau, tau0, dt):
    # (1/dt) * integral_0^dt exp(-(tau-u)/tau0) Theta(tau-u) du
    tau = np.asarray(tau, dtype=float)
    x = tau / tau0
    a = dt / tau0
    rising = -np.expm1(-np.clip(x, 0.0, None))
    falling = np.exp(-np.clip(x, a, None)) * np.expm1(a)
    val = np.where(tau >= dt, falling, np.where(tau > 0, rising, 0.0))
    return val * tau0 / dt


def g2_cross_model(tau, p: FitModelParams, tf: TemporalWavefunction | None = None):
    """1 + alpha |psi_t|^2 * h evaluated at lag(s) ``tau`` (ns).

    |psi_t|^2 enters peak-normalised, so the dt -> 0 limit of the peak is
    1 + alpha.  ``tf`` overrides the correlation time of ``p`` when given.
    """
    tau0 = tf.tau0 if tf is not None else p.tau0
    return 1.0 + p.alpha * _box_response(tau, tau0, p.dt)


def _edge_primitive(x, tau0, dt):
    # D(x) = integral_{-inf}^{x} of the box response times dt, split as
    # tau0*clip(x,0,dt) - tau0^2*e(x) so bin differences do not cancel.
    x = np.asarray(x, dtype=float)
    a = dt / tau0
    rising = -np.expm1(-np.clip(x, 0.0, dt) / tau0)
    falling = np.exp(-np.clip(x, dt, None) / tau0) * np.expm1(a)
    e = np.where(x >= dt, falling, np.where(x > 0, rising, 0.0))
    return tau0 * np.clip(x, 0.0, dt), tau0 * tau0 * e


def g2_binned_model(lag_left, bin_width: float, p: FitModelParams):
    """Cross-correlation model averaged over histogram bins [lag, lag+bin_width).

    Quantising both photons' arrival times to the detector clock smears the
    continuous lag by a triangle of half-width dt; for bins on that clock the
    expected histogram equals the box-smeared model averaged over each bin.
    """
    a = np.asarray(lag_left, dtype=float)
    b = a + bin_width
    ca, ea = _edge_primitive(a, p.tau0, p.dt)
    cb, eb = _edge_primitive(b, p.tau0, p.dt)
    integral = ((cb - ca) - (eb - ea)) / p.dt
    return 1.0 + p.alpha * integral / bin_width


def peak_bin_attenuation(tau0: float, dt: float) -> float:
    """Peak of the box-smeared |psi_t|^2 relative to its dt -> 0 value."""
    return (tau0 / dt) * -math.expm1(-dt / tau0)


def binned_peak(tau0: float, dt: float, bin_width: float | None = None, n_bins: int = 64):
    """Largest bin-averaged kernel value and the left edge of that bin."""
    bw = dt if bin_width is None else bin_width
    lags = np.arange(-2, n_bins) * bw
    vals = g2_binned_model(lags, bw, FitModelParams(1.0, tau0, dt)) - 1.0
    i = int(np.argmax(vals))
    return float(vals[i]), float(lags[i])


def superradiance_ratio(tau0: float, natural_lifetime: float = NATURAL_LIFETIME_D) -> float:
    """Measured correlation time relative to the bare lifetime; < 1 means enhanced decay."""
    return tau0 / natural_lifetime


def cauchy_schwarz_R(gsi: float, gss: float, gii: float) -> float:
    if not (gss > 0 and gii > 0):
        raise ValueError("auto-correlations must be positive")
    return gsi * gsi / (gss * gii)


# ---------------------------------------------------------------------------
# spatial part
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpatialWavefunction:
    geometry: EnsembleGeometry
    K_esw: Wavevector
    lambda_s: float  # nm
    lambda_i: float  # nm

    @property
    def pump_offset(self) -> np.ndarray:
        """Transverse part of K_esw: where the sum-coordinate peak sits."""
        return self.K_esw.perp

    def transverse_factor(self, dk_perp):
        g = self.geometry
        dk_perp = np.asarray(dk_perp, dtype=float)
        return np.exp(-0.5 * (dk_perp[..., 0] ** 2 * g.sigma_x ** 2 + dk_perp[..., 1] ** 2 * g.sigma_y ** 2))


def psi_k(ks_perp, ki_perp, w: SpatialWavefunction):
    """Peak-normalised spatial biphoton amplitude.

    The transverse factor is the Fourier transform of the Gaussian cloud,
    exp(-(q_x^2 sx^2 + q_y^2 sy^2)/2); the longitudinal factor is
    exp(-dk_z^2 sz^2).
    """
    dk_perp, dk_z = delta_k(w.K_esw, ks_perp, ki_perp, w.lambda_s, w.lambda_i)
    val = w.transverse_factor(dk_perp) * np.exp(-(dk_z ** 2) * w.geometry.sigma_z ** 2)
    return val.astype(complex) if np.ndim(val) else complex(val)


@dataclass
class PatternMap:
    """Values on a regular grid of transverse wavevectors (pixel centres).

    ``values[i, j]`` belongs to ``(kx[i], ky[j])``.
    """

    values: np.ndarray
    kx: np.ndarray
    ky: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> tuple[float, float]:
        return (float(self.kx[1] - self.kx[0]) if len(self.kx) > 1 else 1.0,
                float(self.ky[1] - self.ky[0]) if len(self.ky) > 1 else 1.0)

    def mesh(self):
        return np.meshgrid(self.kx, self.ky, indexing="ij")


def grid_axis(lo: float, hi: float, step: float) -> np.ndarray:
    """Midpoints of the cells of width ``step`` tiling [lo, hi]."""
    n = int(round((hi - lo) / step))
    if n < 1 or abs(n * step - (hi - lo)) > 1e-9 * max(1.0, abs(hi - lo)):
        raise ValueError(f"[{lo}, {hi}] is not tiled by steps of {step}")
    return lo + (np.arange(n) + 0.5) * step


# Integrand below exp(-_TAIL) of its peak is skipped when the transverse
# factor localises the signal wavevector.
_TAIL = 40.0


def _pattern_chunk(ki, w, ks_axes, transverse, stencil):
    """Integrate the pattern for a block of idler pixels.

    Returns (sums, largest integrand value found outside the domain,
    largest integrand value overall).
    """
    ksx, ksy = ks_axes
    h = (ksx[1] - ksx[0], ksy[1] - ksy[0])
    sz2 = w.geometry.sigma_z ** 2
    if transverse:
        sx, sy = stencil
        centre = w.pump_offset - ki  # signal wavevector with no transverse mismatch
        jx0 = np.rint((centre[:, 0] - ksx[0]) / h[0]).astype(np.int64)
        jy0 = np.rint((centre[:, 1] - ksy[0]) / h[1]).astype(np.int64)
        ox, oy = np.meshgrid(np.arange(-sx, sx + 1), np.arange(-sy, sy + 1), indexing="ij")
        jx = jx0[:, None] + ox.ravel()[None, :]
        jy = jy0[:, None] + oy.ravel()[None, :]
        kxs = ksx[0] + jx * h[0]
        kys = ksy[0] + jy * h[1]
        inside = (jx >= 0) & (jx < len(ksx)) & (jy >= 0) & (jy < len(ksy))
        ks = np.stack([kxs, kys], axis=-1)
        dk_perp, dk_z = delta_k(w.K_esw, ks, ki[:, None, :], w.lambda_s, w.lambda_i)
        f = w.transverse_factor(dk_perp) ** 2 * np.exp(-2.0 * dk_z ** 2 * sz2)
        outside_max = float(np.max(np.where(inside, 0.0, f), initial=0.0))
        f = np.where(inside, f, 0.0)
    else:
        KX, KY = np.meshgrid(ksx, ksy, indexing="ij")
        ks = np.stack([KX.ravel(), KY.ravel()], axis=-1)
        _, dk_z = delta_k(w.K_esw, ks[None, :, :], ki[:, None, :], w.lambda_s, w.lambda_i)
        f = np.exp(-2.0 * dk_z ** 2 * sz2)
        edge = np.zeros(KX.shape, dtype=bool)
        edge[[0, -1], :] = True
        edge[:, [0, -1]] = True
        outside_max = float(np.max(f[:, edge.ravel()], initial=0.0))
    f = np.ascontiguousarray(f)
    return np.add.reduce(f, axis=1) * (h[0] * h[1]), outside_max, float(f.max(initial=0.0))


def coherent_pattern(ki_axes, w: SpatialWavefunction, ks_domain=((-80.0, 80.0), (-80.0, 80.0)),
                     grid_step: float = 1.0, transverse: bool = True, threads: int = 1,
                     chunk: int = 256) -> PatternMap:
    """Expected coherent idler emission versus idler transverse wavevector.

    For every idler pixel the squared longitudinal factor
    exp(-2 dk_z^2 sz^2) is integrated over signal wavevectors with the
    midpoint rule on a uniform grid of ``grid_step`` covering ``ks_domain``.
    With ``transverse=True`` (default) the integrand also carries the squared
    transverse factor |n~(dk_perp)|^2, i.e. the integrand is |psi_k|^2; this
    is what ties the pattern to the spin-wave direction.  ``transverse=False``
    integrates the longitudinal factor alone.

    The map is normalised to a maximum of one.  If the integrand exceeds
    1e-4 of its peak on the domain boundary a ``DomainTooSmallWarning`` is
    issued and ``meta['domain_truncated']`` is set.
    """
    if not grid_step > 0:
        raise ValueError("grid_step must be positive")
    kx_axis = np.asarray(ki_axes[0], dtype=float)
    ky_axis = np.asarray(ki_axes[1], dtype=float)
    (xlo, xhi), (ylo, yhi) = ks_domain
    ksx = grid_axis(xlo, xhi, grid_step)
    ksy = grid_axis(ylo, yhi, grid_step)
    g = w.geometry
    stencil = (int(math.ceil(math.sqrt(_TAIL) / g.sigma_x / grid_step)) + 1,
               int(math.ceil(math.sqrt(_TAIL) / g.sigma_y / grid_step)) + 1)

    KX, KY = np.meshgrid(kx_axis, ky_axis, indexing="ij")
    ki = np.stack([KX.ravel(), KY.ravel()], axis=-1)
    if not transverse:
        chunk = max(1, min(chunk, int(4e6 // max(1, ksx.size * ksy.size))))
    blocks = [ki[i:i + chunk] for i in range(0, len(ki), chunk)]

    def run(block):
        return _pattern_chunk(block, w, (ksx, ksy), transverse, stencil)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(b) for b in blocks]

    sums = np.concatenate([r[0] for r in results]).reshape(KX.shape)
    outside = max(r[1] for r in results)
    peak = max(r[2] for r in results)
    truncated = bool(peak > 0 and outside > 1e-4 * peak)
    if truncated:
        warnings.warn("signal integration domain truncates the phase-matching integrand "
                      f"({outside / peak:.2e} of peak at the boundary)", DomainTooSmallWarning,
                      stacklevel=2)
    smax = sums.max()
    values = sums / smax if smax > 0 else sums
    meta = {
        "ks_domain": [list(map(float, ks_domain[0])), list(map(float, ks_domain[1]))],
        "grid_step": float(grid_step),
        "transverse": bool(transverse),
        "K_esw": [w.K_esw.kx, w.K_esw.ky, w.K_esw.kz],
        "lambda_s": w.lambda_s,
        "lambda_i": w.lambda_i,
        "sigma": [g.sigma_x, g.sigma_y, g.sigma_z],
        "normalization": "max=1",
        "raw_max": float(smax),
        "domain_truncated": truncated,
    }
    return PatternMap(values, kx_axis, ky_axis, meta)


def paraxial_ring_centre(w: SpatialWavefunction) -> np.ndarray:
    """Centre of the idler phase-matching pattern in the paraxial limit.

    With ks_perp = K_perp - ki_perp, dk_z is quadratic in ki_perp with its
    extremum at K_perp * k_i / (k_s + k_i).
    """
    ks, ki = wavenumber(w.lambda_s), wavenumber(w.lambda_i)
    return w.pump_offset * ki / (ks + ki)


# ---------------------------------------------------------------------------
# susceptibilities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SusceptibilitySet:
    chi_s: complex
    chi_i: complex
    chi_s_NL: complex
    chi_i_NL: complex


def susceptibilities(n: float, d_dc: complex, d_gd: complex, Gamma_d: float,
                     Delta: float) -> SusceptibilitySet:
    """Linear and nonlinear susceptibilities of the signal/idler transitions.

    Parameters
    ----------
    n : atom density, m^-3
    d_dc, d_gd : dipole matrix elements <d|er|c> and <g|er|d>, C m
    Gamma_d : decay rate of |d>, 1/s
    Delta : omega_gd - omega_i, 1/s

    Valid for few excitations (|rho_hg| << 1) and Gamma_c << Gamma_d.
    """
    if not Gamma_d > 0:
        raise ValueError("Gamma_d must be positive")
    pref = n / (constants.epsilon_0 * constants.hbar)
    d_dc = complex(d_dc)
    d_gd = complex(d_gd)
    d_dg = d_gd.conjugate()
    d_cd = d_dc.conjugate()
    plus = 1j * Gamma_d + 2 * Delta
    minus = 1j * Gamma_d - 2 * Delta
    return SusceptibilitySet(
        chi_s=0j,
        chi_i=pref * abs(d_gd) ** 2 / plus,
        chi_s_NL=pref * d_dc * d_dg / minus,
        chi_i_NL=pref * d_gd * d_cd / plus,
    )

"""Recover correlation observables from raw time tags and camera frames.

All counting is done by mergeable accumulators: feeding the data in
partitions and merging the partial results gives exactly the single-pass
answer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage, optimize
from scipy.signal import fftconvolve, savgol_filter

from .biphoton import (
    NATURAL_LIFETIME_D,
    FitModelParams,
    PatternMap,
    cauchy_schwarz_R,
    g2_binned_model,
    superradiance_ratio,
)
from .synthesis import Channel, PhotonFrameSet, TimeTagStream


class DataError(ValueError):
    """Input data violate an estimator's preconditions."""


class FitConvergenceError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# time-domain correlations
# ---------------------------------------------------------------------------

@dataclass
class CoincidenceAccumulator:
    """Counts of tag pairs (a, b) with b - a falling into integer lag bins.

    ``edges`` are bin edges in tag units; bin j holds lags in
    [edges[j], edges[j+1]).  With ``exclude_self`` the pair of a tag with
    itself (same index in the same stream) is not counted.
    """

    edges: np.ndarray
    counts: np.ndarray = None
    n_a: int = 0

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64)
        if self.counts is None:
            self.counts = np.zeros(self.edges.size - 1, dtype=np.int64)

    def add(self, a: np.ndarray, b: np.ndarray, exclude_self: bool = False, a_offset: int = 0,
            chunk: int = 1 << 20):
        """Accumulate all pairs between tags ``a`` and sorted tags ``b``.

        For an auto-correlation pass the chunk of the stream as ``a`` and the
        whole stream as ``b``, with ``a_offset`` the index of ``a[0]`` in
        ``b`` so that self-pairs can be recognised.
        """
        lo, hi = int(self.edges[0]), int(self.edges[-1])
        width = np.diff(self.edges)
        uniform = bool(np.all(width == width[0]))
        for s in range(0, a.size, chunk):
            aa = a[s:s + chunk]
            start = np.searchsorted(b, aa + lo, side="left")
            stop = np.searchsorted(b, aa + hi, side="left")
            n = stop - start
            total = int(n.sum())
            if total == 0:
                continue
            ia = np.repeat(np.arange(aa.size), n)
            first = np.repeat(np.cumsum(n) - n, n)
            ib = np.repeat(start, n) + (np.arange(total) - first)
            lag = b[ib] - aa[ia]
            if exclude_self:
                keep = ib != (ia + s + a_offset)
                lag = lag[keep]
            if uniform:
                j = (lag - lo) // int(width[0])
            else:
                j = np.searchsorted(self.edges, lag, side="right") - 1
            self.counts += np.bincount(j, minlength=self.counts.size)
        self.n_a += int(a.size)
        return self

    def merge(self, other: "CoincidenceAccumulator") -> "CoincidenceAccumulator":
        if not np.array_equal(self.edges, other.edges):
            raise ValueError("cannot merge accumulators with different bins")
        return CoincidenceAccumulator(self.edges, self.counts + other.counts, self.n_a + other.n_a)


@dataclass
class G2Histogram:
    bin_width: float  # ns
    lags: np.ndarray  # left bin edges, ns
    counts: np.ndarray
    baseline: float  # expected accidental counts per bin
    g2: np.ndarray
    normalization: str = "singles-product"
    dt: float = 3.85
    duration: float = 0.0
    n_a: int = 0
    n_b: int = 0
    auto: bool = False

    def value_at(self, lag_ns: float) -> float:
        """g2 of the bin containing ``lag_ns``."""
        j = int(np.floor((lag_ns - self.lags[0]) / self.bin_width + 1e-9))
        if not 0 <= j < self.g2.size:
            raise IndexError(f"lag {lag_ns} ns outside the histogram")
        return float(self.g2[j])

    def to_rows(self):
        return [(float(l), int(c) if float(c).is_integer() else float(c), float(g))
                for l, c, g in zip(self.lags, self.counts, self.g2)]


def _lag_edges(bin_width: float, max_lag: float, dt: float):
    m = bin_width / dt
    if m < 1 - 1e-9 or abs(m - round(m)) > 1e-6:
        raise DataError("bin_width must be an integer multiple of the tag resolution")
    m = int(round(m))
    nbin = int(math.ceil(max_lag / bin_width - 1e-9))
    if nbin < 1:
        raise DataError("max_lag must be at least one bin")
    return np.arange(-nbin, nbin + 1, dtype=np.int64) * m, m


def g2_histogram(a: TimeTagStream, b: TimeTagStream, bin_width: float | None = None,
                 max_lag: float = 100.0, chunks: int = 1) -> G2Histogram:
    """Second-order correlation of ``b`` relative to ``a`` versus lag t_b - t_a.

    Lags span [-max_lag, max_lag) in bins of ``bin_width`` aligned at zero
    lag.  Passing the same stream twice gives the auto-correlation, which
    counts ordered pairs of distinct photons (same-bin pairs included, the
    photon with itself excluded).

    Counting runs over tags of ``a`` with a binary search into ``b`` for
    the lag window, so the cost scales with the number of tags times the
    window occupancy rather than with N_a * N_b.  ``chunks`` partitions
    ``a`` into that many pieces accumulated separately and merged.

    Normalisation: baseline = rate_a * rate_b * duration * bin_width.
    """
    if a.dt != b.dt:
        raise DataError(f"streams have different tag resolution ({a.dt} vs {b.dt} ns)")
    if a.duration != b.duration:
        raise DataError("streams cover different durations")
    if len(a) == 0 or len(b) == 0:
        raise DataError("empty time-tag stream")
    bw = a.dt if bin_width is None else bin_width
    edges, m = _lag_edges(bw, max_lag, a.dt)
    auto = a is b or (a.channel == b.channel and np.array_equal(a.tags, b.tags))
    acc = None
    bounds = np.linspace(0, len(a), max(1, chunks) + 1).astype(int)
    for i0, i1 in zip(bounds[:-1], bounds[1:]):
        part = CoincidenceAccumulator(edges).add(a.tags[i0:i1], b.tags, exclude_self=auto, a_offset=i0)
        acc = part if acc is None else acc.merge(part)
    baseline = len(a) * len(b) / a.duration * (m * a.dt)
    lags = edges[:-1] * a.dt
    return G2Histogram(bin_width=m * a.dt, lags=lags, counts=acc.counts, baseline=baseline,
                       g2=acc.counts / baseline, dt=a.dt, duration=a.duration,
                       n_a=len(a), n_b=len(b), auto=auto)


def tail_baseline(h: G2Histogram, far_lag: float) -> float:
    """Mean counts of bins with |lag| >= far_lag: the far-lag accidental level."""
    centre = h.lags + h.bin_width / 2
    far = np.abs(centre) >= far_lag
    if not far.any():
        raise DataError("no histogram bins beyond far_lag")
    return float(np.mean(h.counts[far]))


def renormalize(h: G2Histogram, baseline: float, method: str) -> G2Histogram:
    return G2Histogram(h.bin_width, h.lags, h.counts, baseline, h.counts / baseline, method,
                       h.dt, h.duration, h.n_a, h.n_b, h.auto)


@dataclass
class FitResult:
    tau0: float
    tau0_err: float
    alpha: float
    alpha_err: float
    g2_peak: float
    g2_peak_err: float
    chi2: float
    dof: int
    nfev: int
    natural_lifetime: float = NATURAL_LIFETIME_D

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else float("nan")

    @property
    def superradiance_ratio(self) -> float:
        return superradiance_ratio(self.tau0, self.natural_lifetime)

    @property
    def superradiant(self) -> bool:
        return self.superradiance_ratio < 1.0

    def as_dict(self) -> dict:
        return {
            "tau0_ns": self.tau0, "tau0_err_ns": self.tau0_err,
            "alpha": self.alpha, "alpha_err": self.alpha_err,
            "g2_peak": self.g2_peak, "g2_peak_err": self.g2_peak_err,
            "chi2": self.chi2, "dof": self.dof, "reduced_chi2": self.reduced_chi2,
            "natural_lifetime_ns": self.natural_lifetime,
            "superradiance_ratio": self.superradiance_ratio,
            "superradiant": self.superradiant,
        }


def _half_max_lag(h: G2Histogram) -> float:
    g = h.g2 - 1.0
    i = int(np.argmax(g))
    below = np.nonzero(g[i:] <= g[i] / 2)[0]
    if below.size == 0:
        return float(h.lags[-1] - h.lags[i])
    return float(max(h.lags[i + below[0]] - h.lags[i], h.bin_width))


def fit_temporal(h: G2Histogram, dt: float | None = None, max_nfev: int = 200,
                 natural_lifetime: float = NATURAL_LIFETIME_D) -> FitResult:
    """Weighted least-squares fit of the cross-correlation model to a histogram.

    Each bin is compared with the model averaged over the bin, with Poisson
    weights 1/max(counts, 1) and the accidental baseline held at one.
    Uncertainties come from the Gauss-Newton curvature of the objective at
    the optimum, (J^T J)^-1.  ``g2_peak`` is the largest bin of the fitted
    model on the histogram's binning.

    Raises ``FitConvergenceError`` (with ``diagnostics``) when the solver
    stops at ``max_nfev`` evaluations or fails.
    """
    dt = h.dt if dt is None else dt
    populated = int(np.count_nonzero(h.counts))
    if populated < 10:
        raise DataError(f"only {populated} histogram bins have counts; need 10")
    counts = np.asarray(h.counts, dtype=float)
    sigma = np.sqrt(np.maximum(counts, 1.0))
    base = h.baseline
    bw = h.bin_width

    def model(theta):
        return g2_binned_model(h.lags, bw, FitModelParams(theta[0], theta[1], dt))

    def resid(theta):
        return (counts - base * model(theta)) / sigma

    x0 = np.array([max(float(np.max(h.g2)) - 1.0, 1e-3), max(_half_max_lag(h), 0.1 * dt)])
    res = optimize.least_squares(resid, x0, bounds=([0.0, 1e-3 * dt], [np.inf, np.inf]),
                                 method="trf", x_scale="jac", max_nfev=max_nfev,
                                 xtol=1e-12, ftol=1e-12, gtol=1e-12)
    diag = {"status": int(res.status), "message": res.message, "nfev": int(res.nfev),
            "x": res.x.tolist(), "cost": float(res.cost), "x0": x0.tolist()}
    if res.status <= 0:
        raise FitConvergenceError(f"temporal fit did not converge: {res.message}", diag)
    J = res.jac
    try:
        cov = np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError as exc:
        raise FitConvergenceError("singular curvature at the optimum", diag) from exc
    alpha, tau0 = (float(v) for v in res.x)
    err = np.sqrt(np.clip(np.diag(cov), 0.0, None))

    # peak of the fitted model on the histogram's binning and its error
    fine = np.arange(0, int(math.ceil(5 * tau0 / bw)) + 2) * bw
    p = FitModelParams(alpha, tau0, dt)
    vals = g2_binned_model(fine, bw, p)
    k = int(np.argmax(vals))
    g2_peak = float(vals[k])
    eps = 1e-6 * max(tau0, 1.0)
    dpeak_dtau = (g2_binned_model(fine[k], bw, FitModelParams(alpha, tau0 + eps, dt))
                  - g2_binned_model(fine[k], bw, FitModelParams(alpha, tau0 - eps, dt))) / (2 * eps)
    grad = np.array([(g2_peak - 1.0) / alpha if alpha > 0 else 0.0, float(dpeak_dtau)])
    g2_peak_err = float(math.sqrt(max(grad @ cov @ grad, 0.0)))
    chi2 = float(2 * res.cost)
    return FitResult(tau0=tau0, tau0_err=float(err[1]), alpha=alpha, alpha_err=float(err[0]),
                     g2_peak=g2_peak, g2_peak_err=g2_peak_err, chi2=chi2,
                     dof=int(counts.size - 2), nfev=int(res.nfev),
                     natural_lifetime=natural_lifetime)


def zero_lag_g2(h: G2Histogram) -> float:
    return h.value_at(0.0)


def window_g2(a: TimeTagStream, b: TimeTagStream, window: float) -> float:
    """g2 of the single coincidence window [0, window) ns of lag t_b - t_a."""
    return g2_histogram(a, b, window, window).value_at(0.0)


def cauchy_schwarz_from_streams(signal: TimeTagStream, idler: TimeTagStream,
                                window: float | None = None, fit: FitResult | None = None) -> dict:
    """Cauchy-Schwarz parameter R = g_si^2 / (g_ss g_ii) at zero lag.

    With ``fit`` the cross term is the fitted peak and the auto terms use
    single tag-resolution bins; otherwise all three are measured over a
    coincidence window [0, window) (default: the tag resolution).
    """
    w = signal.dt if window is None else window
    gss = window_g2(signal, signal, w)
    gii = window_g2(idler, idler, w)
    gsi = fit.g2_peak if fit is not None else window_g2(signal, idler, w)
    return {"R": cauchy_schwarz_R(gsi, gss, gii), "g2_si": gsi, "g2_ss": gss, "g2_ii": gii,
            "window_ns": w, "cross_source": "fit" if fit is not None else "measured"}


# ---------------------------------------------------------------------------
# wavevector-domain correlations
# ---------------------------------------------------------------------------

def _frame_pairs(frames: PhotonFrameSet):
    """Indices (into the signal and idler hit lists) of all same-frame pairs."""
    fs, _, _ = frames.select(Channel.SIGNAL)
    fi, _, _ = frames.select(Channel.IDLER)
    start = np.searchsorted(fi, fs, side="left")
    stop = np.searchsorted(fi, fs, side="right")
    n = stop - start
    total = int(n.sum())
    isig = np.repeat(np.arange(fs.size), n)
    first = np.repeat(np.cumsum(n) - n, n)
    iidl = np.repeat(start, n) + (np.arange(total) - first)
    return isig, iidl


def _shifted_pairs(frames: PhotonFrameSet, shift: int = 1):
    """Pairs of signal hits in frame f with idler hits in frame (f + shift) mod N."""
    fs, _, _ = frames.select(Channel.SIGNAL)
    fi, _, _ = frames.select(Channel.IDLER)
    target = (fs + shift) % frames.n_frames
    order = np.argsort(target, kind="stable")
    t_sorted = target[order]
    start = np.searchsorted(fi, t_sorted, side="left")
    stop = np.searchsorted(fi, t_sorted, side="right")
    n = stop - start
    total = int(n.sum())
    isig = np.repeat(order, n)
    first = np.repeat(np.cumsum(n) - n, n)
    iidl = np.repeat(start, n) + (np.arange(total) - first)
    return isig, iidl


def singles_map(frames: PhotonFrameSet, channel: Channel) -> np.ndarray:
    """Accumulated counts per pixel for one channel, indexed [ix, iy]."""
    ax, ay = frames.pixel_axes()
    _, kx, ky = frames.select(channel)
    ix, iy = frames.pixel_index(kx, ky)
    return np.bincount(ix * ay.size + iy, minlength=ax.size * ay.size).reshape(ax.size, ay.size)


@dataclass
class CorrelationMap:
    """g2 on cells of the sum coordinate ks + ki - pump_offset.

    The map keeps only additive quantities: same-frame pair counts per
    cell, and either the two channels' pixel singles maps
    (``"singles-product"``) or the shifted-frame pair counts
    (``"shuffled"``).  Accidentals and g2 are derived from them, so maps of
    disjoint frame partitions merge exactly.  Cells with no accidentals
    are invalid and carry NaN.
    """

    kx: np.ndarray  # cell centres
    ky: np.ndarray
    coincidences: np.ndarray
    n_frames: int
    normalization: str = "singles-product"
    signal_singles: np.ndarray | None = None
    idler_singles: np.ndarray | None = None
    shuffled: np.ndarray | None = None
    cell_of_sum: tuple = field(default=None, repr=False)  # (mx, my): pixel-sum index -> cell
    meta: dict = field(default_factory=dict)

    @cached_property
    def singles_product(self) -> np.ndarray:
        """Sum over all signal x idler hit pairs (any frames), per cell."""
        S = self.signal_singles.astype(float)
        I = self.idler_singles.astype(float)
        mx, my = self.cell_of_sum
        if S.any() and I.any():
            # counts are integers; rounding removes FFT round-off exactly
            prod = np.rint(fftconvolve(S, I)).astype(np.int64)
        else:
            prod = np.zeros((mx.size, my.size), dtype=np.int64)
        tmp = np.zeros((self.kx.size, my.size), dtype=np.int64)
        np.add.at(tmp, mx, prod)
        cells = np.zeros((self.kx.size, self.ky.size), dtype=np.int64)
        np.add.at(cells.T, my, tmp.T)
        return cells

    @cached_property
    def accidentals(self) -> np.ndarray:
        if self.normalization == "shuffled":
            return self.shuffled.astype(float)
        return self.singles_product / self.n_frames

    @property
    def valid(self) -> np.ndarray:
        return self.accidentals > 0

    @property
    def values(self) -> np.ndarray:
        acc = self.accidentals
        ok = acc > 0
        return np.where(ok, self.coincidences / np.where(ok, acc, 1.0), np.nan)

    def merge(self, other: "CorrelationMap") -> "CorrelationMap":
        """Combine maps of two disjoint sets of frames."""
        if not (np.array_equal(self.kx, other.kx) and np.array_equal(self.ky, other.ky)):
            raise ValueError("maps have different cells")
        if self.normalization != other.normalization:
            raise ValueError("maps use different normalisations")
        if self.normalization == "shuffled":
            # frame f is paired with frame f+1, which crosses partition edges
            raise ValueError("shuffled-frame normalisation cannot be merged exactly")
        return CorrelationMap(self.kx, self.ky, self.coincidences + other.coincidences,
                              self.n_frames + other.n_frames, self.normalization,
                              self.signal_singles + other.signal_singles,
                              self.idler_singles + other.idler_singles, None,
                              self.cell_of_sum, dict(self.meta))

    def peak(self, min_accidentals: float = 10.0):
        """Cell centre of the largest g2 among cells with enough accidentals,
        its g2, and the Poisson z-score (C - A)/sqrt(A) there."""
        acc = self.accidentals
        ok = acc >= min_accidentals
        if not ok.any():
            raise DataError("no cell has enough accidental counts")
        v = np.where(ok, self.values, -np.inf)
        i, j = np.unravel_index(int(np.argmax(v)), v.shape)
        z = (self.coincidences[i, j] - acc[i, j]) / math.sqrt(acc[i, j])
        return np.array([self.kx[i], self.ky[j]]), float(v[i, j]), float(z)

    def max_zscore(self, min_accidentals: float = 10.0) -> float:
        acc = self.accidentals
        ok = acc >= min_accidentals
        if not ok.any():
            return float("nan")
        a = acc[ok]
        return float(np.max((self.coincidences[ok] - a) / np.sqrt(a)))


def _sum_cells(frames: PhotonFrameSet, pump_offset, cell: float):
    """Cell index along each axis for every pixel-sum index, plus cell centres.

    Cells are centred on integer multiples of ``cell``.
    """
    ax, ay = frames.pixel_axes()
    out = []
    for axis, off in ((ax, pump_offset[0]), (ay, pump_offset[1])):
        s = np.arange(2 * axis.size - 1)
        ksum = 2 * axis[0] + s * frames.calibration - off
        m = np.floor(ksum / cell + 0.5).astype(np.int64)
        out.append((m - m.min(), (np.arange(m.min(), m.max() + 1)) * cell))
    return out


def g2_map_sum_coordinates(frames: PhotonFrameSet, pump_offset=(0.0, 0.0), cell: float = 3.0,
                           normalization: str = "singles-product") -> CorrelationMap:
    """Time-averaged signal-idler g2 in wavevector-sum coordinates.

    ``pump_offset`` is the pumps' transverse wavevector kP1 + kP2.  Hits
    are taken at their pixel centres; every same-frame signal/idler pair is
    accumulated at ks + ki - pump_offset so that the correlation peak sits
    at the ground-state spin-wave K_perp.  The accidental level of each
    cell is either the product of the channels' singles maps accumulated
    over all frames divided by the number of frames
    (``"singles-product"``), or the pair count between each frame's signal
    and the next frame's idler (``"shuffled"``).
    """
    if not cell > 0:
        raise ValueError("cell must be positive")
    if normalization not in ("singles-product", "shuffled"):
        raise ValueError(f"unknown normalization {normalization!r}")
    if frames.n_frames == 0:
        raise DataError("no frames")
    (mx, cx), (my, cy) = _sum_cells(frames, pump_offset, cell)
    _, skx, sky = frames.select(Channel.SIGNAL)
    _, ikx, iky = frames.select(Channel.IDLER)
    six, siy = frames.pixel_index(skx, sky)
    iix, iiy = frames.pixel_index(ikx, iky)

    def pair_hist(isig, iidl):
        sx = six[isig] + iix[iidl]
        sy = siy[isig] + iiy[iidl]
        return np.bincount(mx[sx] * cy.size + my[sy], minlength=cx.size * cy.size).reshape(cx.size, cy.size)

    coinc = pair_hist(*_frame_pairs(frames))
    meta = {"cell": float(cell), "pump_offset": [float(v) for v in pump_offset]}
    if normalization == "shuffled":
        return CorrelationMap(cx, cy, coinc, frames.n_frames, normalization,
                              shuffled=pair_hist(*_shifted_pairs(frames)), cell_of_sum=(mx, my),
                              meta=meta)
    return CorrelationMap(cx, cy, coinc, frames.n_frames, normalization,
                          signal_singles=singles_map(frames, Channel.SIGNAL),
                          idler_singles=singles_map(frames, Channel.IDLER),
                          cell_of_sum=(mx, my), meta=meta)


def filter_coincidences(frames: PhotonFrameSet, K_perp, delta_k: float = 15.0,
                        pump_offset=(0.0, 0.0)):
    """Signal and idler count maps of hits that have a correlated partner.

    A same-frame signal/idler pair is retained when its sum coordinate
    ks + ki - pump_offset lies within ``delta_k`` of ``K_perp``
    (continuous coordinates).  Each hit belonging to at least one retained
    pair is counted once, at its pixel.
    """
    if delta_k < 0:
        raise ValueError("delta_k must be non-negative")
    ax, ay = frames.pixel_axes()
    _, skx, sky = frames.select(Channel.SIGNAL)
    _, ikx, iky = frames.select(Channel.IDLER)
    isig, iidl = _frame_pairs(frames)
    dx = skx[isig] + ikx[iidl] - pump_offset[0] - K_perp[0]
    dy = sky[isig] + iky[iidl] - pump_offset[1] - K_perp[1]
    keep = np.hypot(dx, dy) <= delta_k if delta_k > 0 else np.zeros(isig.size, dtype=bool)
    s_hit = np.zeros(skx.size, dtype=bool)
    i_hit = np.zeros(ikx.size, dtype=bool)
    s_hit[isig[keep]] = True
    i_hit[iidl[keep]] = True

    def count(kx, ky, mask):
        ix, iy = frames.pixel_index(kx[mask], ky[mask])
        return np.bincount(ix * ay.size + iy, minlength=ax.size * ay.size).reshape(ax.size, ay.size)

    return count(skx, sky, s_hit), count(ikx, iky, i_hit)


def enhancement_ratio(idler_map: np.ndarray, pm_region: np.ndarray, guard_pixels: int = 6) -> float:
    """Mean counts inside the phase-matched region over the mean outside it.

    The outside estimate excludes a band of ``guard_pixels`` around the
    region.
    """
    idler_map = np.asarray(idler_map, dtype=float)
    region = np.asarray(pm_region, dtype=bool)
    if region.shape != idler_map.shape:
        raise DataError("mask and map shapes differ")
    grown = ndimage.binary_dilation(region, iterations=guard_pixels) if guard_pixels > 0 else region
    outside = ~grown
    if not region.any() or not outside.any():
        raise DataError("degenerate phase-matching mask")
    out = idler_map[outside].mean()
    if out == 0:
        raise DataError("no counts outside the phase-matched region")
    return float(idler_map[region].mean() / out)


@dataclass
class RadialProfile:
    radius: np.ndarray  # annulus centres
    value: np.ndarray
    n_pixels: np.ndarray
    baseline: float = 1.0


def radial_profile(values: np.ndarray, kx: np.ndarray, ky: np.ndarray, center,
                   ring_width: float = 1.0, normalize: str | None = "far",
                   far_radius: float | None = None) -> RadialProfile:
    """Azimuthal average of a map in annuli of ``ring_width`` about ``center``.

    ``normalize="far"`` divides by the mean over pixels at radius
    >= ``far_radius`` (default: outer 20% of the covered radii) so that
    the far-field background reads one; ``None`` leaves values untouched.
    """
    if not ring_width > 0:
        raise ValueError("ring_width must be positive")
    kx = np.asarray(kx, dtype=float)
    ky = np.asarray(ky, dtype=float)
    c = np.asarray(center, dtype=float)
    hx = (kx[1] - kx[0]) / 2 if kx.size > 1 else 0.5
    hy = (ky[1] - ky[0]) / 2 if ky.size > 1 else 0.5
    if not (kx[0] - hx <= c[0] <= kx[-1] + hx and ky[0] - hy <= c[1] <= ky[-1] + hy):
        raise DataError("profile centre lies outside the map")
    X, Y = np.meshgrid(kx, ky, indexing="ij")
    r = np.hypot(X - c[0], Y - c[1]).ravel()
    v = np.asarray(values, dtype=float).ravel()
    ok = np.isfinite(v)
    r, v = r[ok], v[ok]
    idx = np.floor(r / ring_width).astype(np.int64)
    n = np.bincount(idx)
    s = np.bincount(idx, weights=v)
    present = n > 0
    radius = (np.arange(n.size) + 0.5) * ring_width
    mean = np.where(present, s / np.maximum(n, 1), np.nan)
    baseline = 1.0
    if normalize == "far":
        rf = 0.8 * r.max() if far_radius is None else far_radius
        far = r >= rf
        if not far.any():
            raise DataError("no pixels beyond far_radius")
        baseline = float(v[far].mean())
        if baseline == 0:
            raise DataError("far-field baseline is zero")
        mean = mean / baseline
    elif normalize is not None:
        raise ValueError(f"unknown normalisation {normalize!r}")
    return RadialProfile(radius[present], mean[present], n[present], baseline)


def peak_radius(profile: RadialProfile, smooth: int = 31) -> float:
    """Radius of the profile maximum after a local quadratic smoothing.

    ``smooth`` is the Savitzky-Golay window in annuli (odd; 1 disables
    smoothing).  Broad rings have flat tops on which the raw argmax of a
    noisy profile wanders; the smoothed maximum does not.
    """
    v = np.asarray(profile.value, dtype=float)
    if v.size == 0:
        raise DataError("empty profile")
    win = min(int(smooth) | 1, v.size if v.size % 2 else v.size - 1)
    if win >= 3:
        v = savgol_filter(v, win, 2, mode="interp")
    return float(profile.radius[int(np.argmax(v))])


def _azimuthal_spread(values, kx, ky, c, radii, angles):
    # sample along rings by bilinear interpolation; sum of per-ring variances
    fx = (c[0] + radii[:, None] * np.cos(angles)[None, :] - kx[0]) / (kx[1] - kx[0])
    fy = (c[1] + radii[:, None] * np.sin(angles)[None, :] - ky[0]) / (ky[1] - ky[0])
    samples = ndimage.map_coordinates(values, [fx.ravel(), fy.ravel()], order=1, mode="nearest")
    samples = samples.reshape(fx.shape)
    return float(np.sum(np.var(samples, axis=1)))


def find_ring_center(pattern: PatternMap, search_radius: float | None = None,
                     coarse_step: float | None = None, n_angles: int = 72) -> np.ndarray:
    """Symmetry centre of a 2-D map.

    Minimises the summed azimuthal variance of rings about the candidate
    centre: first on a grid of candidates (first minimum in order of
    increasing kx, then ky, wins ties), then by local refinement.
    """
    v = np.asarray(pattern.values, dtype=float)
    kx, ky = np.asarray(pattern.kx, float), np.asarray(pattern.ky, float)
    if not np.isfinite(v).all():
        v = np.nan_to_num(v)
    if np.ptp(v) == 0:
        raise DataError("flat pattern has no distinguished centre")
    hx, hy = kx[1] - kx[0], ky[1] - ky[0]
    span = min(kx[-1] - kx[0], ky[-1] - ky[0])
    rmax = 0.35 * span
    radii = np.arange(1, int(rmax / min(hx, hy))) * min(hx, hy)
    angles = np.linspace(0, 2 * np.pi, n_angles, endpoint=False)
    mid = np.array([(kx[0] + kx[-1]) / 2, (ky[0] + ky[-1]) / 2])
    sr = 0.15 * span if search_radius is None else search_radius
    st = max(hx, hy) if coarse_step is None else coarse_step
    cxs = np.arange(mid[0] - sr, mid[0] + sr + 1e-9, st)
    cys = np.arange(mid[1] - sr, mid[1] + sr + 1e-9, st)
    best, best_c = np.inf, None
    for x in cxs:  # increasing kx, then ky: strict < keeps the first minimum
        for y in cys:
            s = _azimuthal_spread(v, kx, ky, (x, y), radii, angles)
            if s < best:
                best, best_c = s, np.array([x, y])
    res = optimize.minimize(lambda c: _azimuthal_spread(v, kx, ky, c, radii, angles), best_c,
                            method="Nelder-Mead",
                            options={"xatol": 1e-3 * st, "fatol": 1e-12 * max(best, 1e-300),
                                     "initial_simplex": [best_c, best_c + [st / 2, 0], best_c + [0, st / 2]]})
    c = res.x if res.fun <= best else best_c
    return np.asarray(c, dtype=float)

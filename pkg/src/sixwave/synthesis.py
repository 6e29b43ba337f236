"""Monte-Carlo generation of raw detector data.

Time tags: photon pairs arrive as a Poisson process; the idler follows its
signal after an exponentially distributed delay and is detected with a
fixed conditional efficiency.  Uncorrelated background counts are added on
both channels and everything is quantised to the time-tagger clock.

Camera frames: signal photons land uniformly on the sensor.  Each one may
herald a coherently emitted idler at the transversely phase-matched
position, accepted with the longitudinal phase-matching probability; an
independent uniform population of incoherent idler photons sits on top.

Random numbers come from numpy's PCG64.  Time tags use one generator
seeded with ``seed``; frames are generated in fixed-size blocks, block
``b`` drawing from ``SeedSequence(seed, spawn_key=(b,))``, so results do
not depend on how blocks are scheduled across threads.

Detector dead time and afterpulsing are not modelled.
"""

from __future__ import annotations

import enum
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .biphoton import (
    DEFAULT_DT,
    SpatialWavefunction,
    binned_peak,
    coherent_pattern,
    grid_axis,
)
from .geometry import delta_k


class SparseStreamWarning(UserWarning):
    """Fewer than ten events are expected on a channel."""


class Channel(enum.IntEnum):
    SIGNAL = 0
    IDLER = 1


# ---------------------------------------------------------------------------
# time tags
# ---------------------------------------------------------------------------

@dataclass
class TimeTagStream:
    channel: Channel
    tags: np.ndarray  # int64, units of dt
    dt: float  # ns
    duration: float  # ns
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tags = np.asarray(self.tags, dtype=np.int64)
        self.channel = Channel(self.channel)
        if not (self.dt > 0 and self.duration > 0):
            raise ValueError("dt and duration must be positive")
        if self.tags.size:
            if self.tags[0] < 0 or self.tags[-1] >= self.n_bins:
                raise ValueError("time tags outside [0, duration/dt)")
            if np.any(np.diff(self.tags) < 0):
                raise ValueError("time tags must be sorted")

    @property
    def n_bins(self) -> int:
        return int(math.ceil(self.duration / self.dt - 1e-9))

    @property
    def rate(self) -> float:
        """Mean count rate in 1/ns."""
        return self.tags.size / self.duration

    def __len__(self):
        return int(self.tags.size)


def quantize(times_ns, dt: float) -> np.ndarray:
    return np.floor(np.asarray(times_ns, dtype=float) / dt).astype(np.int64)


@dataclass(frozen=True)
class PulseEnvelope:
    """Repeated pump pulse: flat for ``pulse_ns``, then a Gaussian decay.

    After the pulse the pair rate falls as exp(-(t * decay_rate)^2), the
    thermal dephasing of the excited-state spin wave.
    """

    period_ns: float = 2000.0
    pulse_ns: float = 300.0
    decay_rate_per_us: float = 0.7

    def __call__(self, t_ns):
        phase = np.mod(np.asarray(t_ns, dtype=float), self.period_ns)
        after = np.clip(phase - self.pulse_ns, 0.0, None) * self.decay_rate_per_us * 1e-3
        return np.where(phase < self.pulse_ns, 1.0, np.exp(-after ** 2))

    def mean(self, n: int = 200001) -> float:
        t = (np.arange(n) + 0.5) * self.period_ns / n
        return float(np.mean(self(t)))


@dataclass(frozen=True)
class SynthesisConfig:
    pair_rate: float = 0.5  # 1/us
    signal_bg_rate: float = 0.1  # 1/us
    idler_bg_rate: float = 0.1  # 1/us
    tau0: float = 9.8  # ns
    eta_idler: float = 0.3
    seed: int = 0
    dt: float = DEFAULT_DT  # ns
    pulse_envelope: PulseEnvelope | None = None
    # Optional thermal multimode intensity fluctuations of the pair source:
    # the pair rate is multiplied by a Gamma(M, 1/M) variate held constant
    # over windows of ``thermal_window`` ns.  Off (Poissonian) by default.
    thermal_modes: int | None = None
    thermal_window: float = 50.0  # ns

    def __post_init__(self):
        for name in ("pair_rate", "signal_bg_rate", "idler_bg_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.eta_idler <= 1.0:
            raise ValueError("eta_idler must lie in [0, 1]")
        if not (self.tau0 > 0 and self.dt > 0):
            raise ValueError("tau0 and dt must be positive")
        if self.thermal_modes is not None and self.thermal_modes < 1:
            raise ValueError("thermal_modes must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def expected_alpha(self) -> float:
        """Peak scale of the cross-correlation for stationary Poissonian rates."""
        rp = self.pair_rate * 1e-3
        rs = rp + self.signal_bg_rate * 1e-3
        ri = self.eta_idler * rp + self.idler_bg_rate * 1e-3
        if rs == 0 or ri == 0:
            return 0.0
        return rp * self.eta_idler / (rs * ri * self.tau0)

    def expected_peak_g2(self, bin_width: float | None = None) -> float:
        """Largest expected histogram value at bins of ``bin_width`` (default dt)."""
        peak, _ = binned_peak(self.tau0, self.dt, bin_width)
        return 1.0 + self.expected_alpha() * peak


def background_for_peak_g2(target: float, pair_rate: float = 0.5, eta_idler: float = 0.3,
                           tau0: float = 9.8, dt: float = DEFAULT_DT,
                           bin_width: float | None = None) -> float:
    """Common background rate (1/us) on both channels giving the target peak g2.

    Solves (rp + b)(eta rp + b) = rp eta / (alpha tau0) for b, with alpha
    chosen so that the largest histogram bin equals ``target``.
    """
    peak, _ = binned_peak(tau0, dt, bin_width)
    alpha = (target - 1.0) / peak
    if alpha <= 0:
        raise ValueError("target peak g2 must exceed 1")
    rp = pair_rate * 1e-3
    rhs = rp * eta_idler / (alpha * tau0)
    b1 = rp * (1 + eta_idler)
    c = eta_idler * rp * rp - rhs
    disc = b1 * b1 - 4 * c
    b = (-b1 + math.sqrt(disc)) / 2
    if b < 0:
        raise ValueError("pair rate too high: target g2 unreachable even without background")
    return b * 1e3


def default_timetag_config(seed: int = 0, target_peak_g2: float = 35.3, pair_rate: float = 0.5,
                         eta_idler: float = 0.3, tau0: float = 9.8,
                         dt: float = DEFAULT_DT) -> SynthesisConfig:
    """Default source with backgrounds tuned to the measured peak cross-correlation."""
    bg = background_for_peak_g2(target_peak_g2, pair_rate, eta_idler, tau0, dt)
    return SynthesisConfig(pair_rate=pair_rate, signal_bg_rate=bg, idler_bg_rate=bg,
                           tau0=tau0, eta_idler=eta_idler, seed=seed, dt=dt)


def _poisson_times(rng, rate_per_ns: float, duration: float) -> np.ndarray:
    n = rng.poisson(rate_per_ns * duration)
    return np.sort(rng.uniform(0.0, duration, n))


def generate_pairs(rng, cfg: SynthesisConfig, duration: float):
    """Continuous pair emission times and signal-to-idler delays (ns)."""
    rate = cfg.pair_rate * 1e-3
    if cfg.thermal_modes is None:
        t = _poisson_times(rng, rate, duration)
    else:
        m = cfg.thermal_modes
        n_win = int(math.ceil(duration / cfg.thermal_window))
        intensity = rng.gamma(m, 1.0 / m, n_win)
        counts = rng.poisson(rate * cfg.thermal_window * intensity)
        starts = np.repeat(np.arange(n_win) * cfg.thermal_window, counts)
        t = np.sort(starts + rng.uniform(0.0, cfg.thermal_window, starts.size))
        t = t[t < duration]
    if cfg.pulse_envelope is not None:
        t = t[rng.random(t.size) < cfg.pulse_envelope(t)]
    delay = -cfg.tau0 * np.log1p(-rng.random(t.size))
    return t, delay


def synthesize_timetags(cfg: SynthesisConfig, duration: float):
    """Signal and idler time-tag streams for ``duration`` ns.

    Returns ``(signal, idler)``.  Both streams share one ``meta`` dict with
    the event bookkeeping (pairs, kept idlers, background draws, idlers
    pushed past the end of the record).
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    env_mean = cfg.pulse_envelope.mean() if cfg.pulse_envelope is not None else 1.0
    expect_s = (cfg.pair_rate * env_mean + cfg.signal_bg_rate) * 1e-3 * duration
    expect_i = (cfg.eta_idler * cfg.pair_rate * env_mean + cfg.idler_bg_rate) * 1e-3 * duration
    notes = []
    for name, e in (("signal", expect_s), ("idler", expect_i)):
        if e < 10:
            msg = f"only {e:.3g} {name} events expected"
            warnings.warn(msg, SparseStreamWarning, stacklevel=2)
            notes.append(msg)

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    t_pair, delay = generate_pairs(rng, cfg, duration)
    kept = rng.random(t_pair.size) < cfg.eta_idler
    t_idler_pair = t_pair[kept] + delay[kept]
    in_window = t_idler_pair < duration
    t_idler_pair = t_idler_pair[in_window]
    t_sbg = _poisson_times(rng, cfg.signal_bg_rate * 1e-3, duration)
    t_ibg = _poisson_times(rng, cfg.idler_bg_rate * 1e-3, duration)

    sig = np.sort(np.concatenate([quantize(t_pair, cfg.dt), quantize(t_sbg, cfg.dt)]))
    idl = np.sort(np.concatenate([quantize(t_idler_pair, cfg.dt), quantize(t_ibg, cfg.dt)]))
    meta = {
        "seed": int(cfg.seed),
        "generator": "numpy PCG64",
        "pairs": int(t_pair.size),
        "idler_pairs_kept": int(kept.sum()),
        "idler_pairs_truncated": int((~in_window).sum()),
        "signal_background": int(t_sbg.size),
        "idler_background": int(t_ibg.size),
        "warnings": notes,
    }
    return (TimeTagStream(Channel.SIGNAL, sig, cfg.dt, duration, meta),
            TimeTagStream(Channel.IDLER, idl, cfg.dt, duration, meta))


# ---------------------------------------------------------------------------
# camera frames
# ---------------------------------------------------------------------------

Bounds = tuple[tuple[float, float], tuple[float, float]]


@dataclass
class PhotonFrameSet:
    """Sparse photon hits from ``n_frames`` camera frames.

    Hits are stored column-wise, sorted by frame then channel (signal
    first).  Coordinates are transverse wavevectors in rad/mm;
    ``calibration`` is the pixel pitch in rad/mm and ``bounds`` the sensor
    extent ((kx_lo, kx_hi), (ky_lo, ky_hi)) shared by both channels.
    """

    n_frames: int
    frame: np.ndarray
    channel: np.ndarray
    kx: np.ndarray
    ky: np.ndarray
    calibration: float = 1.0
    bounds: Bounds = ((-80.0, 80.0), (-80.0, 80.0))
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frame = np.asarray(self.frame, dtype=np.int64)
        self.channel = np.asarray(self.channel, dtype=np.int8)
        self.kx = np.asarray(self.kx, dtype=float)
        self.ky = np.asarray(self.ky, dtype=float)
        self.bounds = tuple(tuple(float(v) for v in b) for b in self.bounds)
        n = self.frame.size
        if not (self.channel.size == self.kx.size == self.ky.size == n):
            raise ValueError("hit columns differ in length")
        if self.n_frames < 0 or (n and (self.frame.min() < 0 or self.frame.max() >= self.n_frames)):
            raise ValueError("frame ids outside [0, n_frames)")
        (xlo, xhi), (ylo, yhi) = self.bounds
        if n and (self.kx.min() < xlo or self.kx.max() >= xhi
                  or self.ky.min() < ylo or self.ky.max() >= yhi):
            raise ValueError("hits outside the sensor bounds")
        if n > 1:
            key = self.frame * 2 + self.channel
            if np.any(np.diff(key) < 0):
                raise ValueError("hits must be sorted by frame and channel")

    def __len__(self):
        return int(self.frame.size)

    def select(self, channel: Channel):
        m = self.channel == int(channel)
        return self.frame[m], self.kx[m], self.ky[m]

    def pixel_axes(self):
        (xlo, xhi), (ylo, yhi) = self.bounds
        return grid_axis(xlo, xhi, self.calibration), grid_axis(ylo, yhi, self.calibration)

    def pixel_index(self, kx, ky):
        """Integer pixel coordinates of hits (clipped onto the sensor)."""
        ax, ay = self.pixel_axes()
        (xlo, _), (ylo, _) = self.bounds
        ix = np.clip(np.floor((np.asarray(kx) - xlo) / self.calibration).astype(np.int64), 0, ax.size - 1)
        iy = np.clip(np.floor((np.asarray(ky) - ylo) / self.calibration).astype(np.int64), 0, ay.size - 1)
        return ix, iy

    def concat(self, other: "PhotonFrameSet") -> "PhotonFrameSet":
        """Append ``other``'s frames after this set's frames."""
        if other.calibration != self.calibration or other.bounds != self.bounds:
            raise ValueError("frame sets have different sensor calibration")
        return PhotonFrameSet(self.n_frames + other.n_frames,
                              np.concatenate([self.frame, other.frame + self.n_frames]),
                              np.concatenate([self.channel, other.channel]),
                              np.concatenate([self.kx, other.kx]),
                              np.concatenate([self.ky, other.ky]),
                              self.calibration, self.bounds, dict(self.meta))

    def split(self, at_frame: int):
        """Two frame sets: frames [0, at_frame) and [at_frame, n_frames) renumbered."""
        i = int(np.searchsorted(self.frame, at_frame))
        a = PhotonFrameSet(at_frame, self.frame[:i], self.channel[:i], self.kx[:i], self.ky[:i],
                           self.calibration, self.bounds, dict(self.meta))
        b = PhotonFrameSet(self.n_frames - at_frame, self.frame[i:] - at_frame, self.channel[i:],
                           self.kx[i:], self.ky[i:], self.calibration, self.bounds, dict(self.meta))
        return a, b


@dataclass(frozen=True)
class FrameSynthesisConfig:
    mean_signal_per_frame: float = 0.5
    eta: float = 0.5  # coherent idler probability for a perfectly phase-matched signal
    # Target in/out idler intensity ratio of the phase-matched region; when
    # set, the incoherent idler level is solved from it.
    target_ratio: float | None = 1.4
    mean_incoherent_idler: float | None = None  # per frame, used when target_ratio is None
    kernel_width: float | None = None  # rad/mm; None -> matches the cloud's transverse FT
    bounds: Bounds = ((-80.0, 80.0), (-80.0, 80.0))
    calibration: float = 1.0  # rad/mm per pixel
    pm_threshold: float = 0.5
    guard_band: float = 6.0  # rad/mm
    seed: int = 0
    block_frames: int = 8192

    def __post_init__(self):
        if not self.mean_signal_per_frame > 0:
            raise ValueError("mean_signal_per_frame must be positive")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.kernel_width is not None and not self.kernel_width > 0:
            raise ValueError("kernel_width must be positive")
        if not self.calibration > 0:
            raise ValueError("calibration must be positive")
        if self.target_ratio is None and self.mean_incoherent_idler is None:
            raise ValueError("give either target_ratio or mean_incoherent_idler")
        if self.target_ratio is not None and not self.target_ratio > 1:
            raise ValueError("target_ratio must exceed 1")
        if self.mean_incoherent_idler is not None and self.mean_incoherent_idler < 0:
            raise ValueError("mean_incoherent_idler must be non-negative")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def kernel_sigmas(cfg: FrameSynthesisConfig, w: SpatialWavefunction) -> tuple[float, float]:
    # |n~(q)|^2 = exp(-q^2 sigma^2) is a Gaussian of standard deviation 1/(sqrt(2) sigma)
    if cfg.kernel_width is not None:
        return cfg.kernel_width, cfg.kernel_width
    g = w.geometry
    return 1.0 / (math.sqrt(2.0) * g.sigma_x), 1.0 / (math.sqrt(2.0) * g.sigma_y)


def pm_region_mask(pattern, threshold: float = 0.5) -> np.ndarray:
    return pattern.values >= threshold * pattern.values.max()


def guard_excluded(region: np.ndarray, guard_pixels: int) -> np.ndarray:
    """Complement of ``region`` minus a band of ``guard_pixels`` around it."""
    grown = ndimage.binary_dilation(region, iterations=guard_pixels) if guard_pixels > 0 else region
    return ~grown


def calibrate_frames(cfg: FrameSynthesisConfig, w: SpatialWavefunction, threads: int = 1) -> dict:
    """Phase-matching map on the idler pixels and the incoherent idler level.

    The expected idler density is mu_inc/A + kappa * P(ki) with P the
    unnormalised pattern integral over signal wavevectors on the sensor;
    mu_inc is solved so that the expected in/out ratio hits the target.
    """
    (xlo, xhi), (ylo, yhi) = cfg.bounds
    ax = grid_axis(xlo, xhi, cfg.calibration)
    ay = grid_axis(ylo, yhi, cfg.calibration)
    with warnings.catch_warnings():
        # the sensor is the physical integration domain; truncation is real
        warnings.simplefilter("ignore")
        pattern = coherent_pattern((ax, ay), w, ks_domain=cfg.bounds, grid_step=cfg.calibration,
                                   threads=threads)
    sx, sy = kernel_sigmas(cfg, w)
    # exact for the default kernel; an overridden kernel_width makes the
    # incoherent level approximate
    raw = pattern.values * pattern.meta["raw_max"]
    area = (xhi - xlo) * (yhi - ylo)
    g = w.geometry
    # transverse factor squared integrates to pi/(sx_geom*sy_geom); the
    # sampled kernel is a normalised Gaussian, so rescale accordingly
    norm = math.pi / (g.sigma_x * g.sigma_y)
    density_coh = cfg.mean_signal_per_frame * cfg.eta * raw / (norm * area)  # per frame per (rad/mm)^2
    region = pm_region_mask(pattern, cfg.pm_threshold)
    outside = guard_excluded(region, int(round(cfg.guard_band / cfg.calibration)))
    if not region.any() or not outside.any():
        raise ValueError("phase-matched region or its complement is empty on the sensor")
    c_in = float(density_coh[region].mean())
    c_out = float(density_coh[outside].mean())
    if cfg.target_ratio is not None:
        r = cfg.target_ratio
        d_inc = (c_in - r * c_out) / (r - 1.0)
        if d_inc <= 0:
            raise ValueError(f"target ratio {r} unreachable: coherent emission too weak")
        mu_inc = d_inc * area
    else:
        mu_inc = float(cfg.mean_incoherent_idler)
        d_inc = mu_inc / area
    expected_ratio = (d_inc + c_in) / (d_inc + c_out) if d_inc + c_out > 0 else float("nan")
    return {
        "pattern": pattern,
        "region": region,
        "outside": outside,
        "mean_incoherent_idler": float(mu_inc),
        "expected_ratio": float(expected_ratio),
        "kernel_sigmas": (sx, sy),
    }


def _frame_block(block: int, f0: int, f1: int, cfg: FrameSynthesisConfig,
                 w: SpatialWavefunction, mu_inc: float, sig: tuple[float, float]):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(block,))))
    nf = f1 - f0
    (xlo, xhi), (ylo, yhi) = cfg.bounds
    n_s = rng.poisson(cfg.mean_signal_per_frame, nf)
    fs = np.repeat(np.arange(f0, f1, dtype=np.int64), n_s)
    sx = rng.uniform(xlo, xhi, fs.size)
    sy = rng.uniform(ylo, yhi, fs.size)

    # coherent idler: transversely phase matched up to the cloud's finite size
    off = w.pump_offset
    cx = off[0] - sx + sig[0] * rng.standard_normal(fs.size)
    cy = off[1] - sy + sig[1] * rng.standard_normal(fs.size)
    u = rng.random(fs.size)
    on_sensor = (cx >= xlo) & (cx < xhi) & (cy >= ylo) & (cy < yhi)
    p = np.zeros(fs.size)
    if on_sensor.any():
        ks = np.stack([sx[on_sensor], sy[on_sensor]], axis=-1)
        ki = np.stack([cx[on_sensor], cy[on_sensor]], axis=-1)
        _, dkz = delta_k(w.K_esw, ks, ki, w.lambda_s, w.lambda_i)
        p[on_sensor] = cfg.eta * np.exp(-2.0 * dkz ** 2 * w.geometry.sigma_z ** 2)
    coh = on_sensor & (u < p)

    n_inc = rng.poisson(mu_inc, nf)
    fi = np.repeat(np.arange(f0, f1, dtype=np.int64), n_inc)
    ix = rng.uniform(xlo, xhi, fi.size)
    iy = rng.uniform(ylo, yhi, fi.size)

    frame = np.concatenate([fs, fs[coh], fi])
    channel = np.concatenate([np.zeros(fs.size, np.int8), np.ones(int(coh.sum()), np.int8),
                              np.ones(fi.size, np.int8)])
    kx = np.concatenate([sx, cx[coh], ix])
    ky = np.concatenate([sy, cy[coh], iy])
    order = np.lexsort((channel, frame))
    return frame[order], channel[order], kx[order], ky[order], int(coh.sum()), int(fi.size)


def synthesize_frames(cfg: FrameSynthesisConfig, w: SpatialWavefunction, n_frames: int,
                      threads: int = 1, calibration: dict | None = None) -> PhotonFrameSet:
    """Sparse signal/idler camera frames for the phase-matching model ``w``."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    cal = calibration if calibration is not None else calibrate_frames(cfg, w, threads)
    mu_inc = cal["mean_incoherent_idler"]
    sig = cal["kernel_sigmas"]
    bs = cfg.block_frames
    jobs = [(b, f0, min(f0 + bs, n_frames)) for b, f0 in enumerate(range(0, n_frames, bs))]

    def run(job):
        return _frame_block(*job, cfg, w, mu_inc, sig)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]

    cols = [np.concatenate([p[i] for p in parts]) for i in range(4)]
    meta = {
        "seed": int(cfg.seed),
        "generator": "numpy PCG64, SeedSequence per block",
        "block_frames": int(bs),
        "mean_incoherent_idler": mu_inc,
        "expected_ratio": cal["expected_ratio"],
        "coherent_idlers": int(sum(p[4] for p in parts)),
        "incoherent_idlers": int(sum(p[5] for p in parts)),
        "K_esw_perp": [float(w.K_esw.kx), float(w.K_esw.ky)],
    }
    return PhotonFrameSet(n_frames, *cols, calibration=cfg.calibration, bounds=cfg.bounds, meta=meta)

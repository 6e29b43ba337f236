"""Run configuration: one YAML file drives simulation and analysis.

Every section is optional except ``schema_version``; missing keys take the
defaults below.  Unknown keys are rejected so that typos do not silently
fall back to defaults.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import yaml

from .biphoton import DEFAULT_DT, SpatialWavefunction
from .geometry import (
    BeamField,
    BeamLabel,
    EnsembleGeometry,
    GeometryError,
    SpinWave,
    excited_spinwave,
    ground_spinwave,
    signal_wavelength,
    spinwave_from_transverse,
    wavevector_of,
)
from .synthesis import FrameSynthesisConfig, SynthesisConfig, background_for_peak_g2

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """The configuration file is missing, unparsable or invalid."""


DEFAULTS: dict = {
    "seed": 0,
    "beams": {
        "write": {"wavelength": 795.0, "angle_x_mrad": 0.0, "angle_y_mrad": 0.0},
        "seed": {"wavelength": 795.0, "angle_x_mrad": 0.0, "angle_y_mrad": 0.0},
        "pump1": {"wavelength": 780.0, "angle_x_mrad": 0.0, "angle_y_mrad": 0.0},
        "pump2": {"wavelength": 776.0, "angle_x_mrad": 0.0, "angle_y_mrad": 0.0},
        "idler": {"wavelength": 795.0},
        "signal_wavelength": None,  # null: from energy conservation
    },
    "ensemble": {"sigma_x": 0.3, "sigma_y": 0.3, "sigma_z": 2.5, "temperature_uK": 22.0},
    # K_perp (rad/mm) tilts the Write beam; leave null to use the beam angles
    "spin_wave": {"K_perp": None, "beta": 1.0, "transfer_efficiency": 1.0},
    "timetags": {
        "pair_rate": 0.5,  # 1/us
        "signal_bg_rate": None,  # 1/us; null: solved from target_peak_g2
        "idler_bg_rate": None,
        "target_peak_g2": 35.3,
        "tau0": 9.8,  # ns
        "eta_idler": 0.3,
        "dt": DEFAULT_DT,  # ns
        "duration_ns": 2.0e8,
    },
    "frames": {
        "n_frames": 500000,
        "mean_signal_per_frame": 0.5,
        "eta": 0.5,
        "target_ratio": 1.4,
        "mean_incoherent_idler": None,
        "kernel_width": None,
        "bounds": [[-80.0, 80.0], [-80.0, 80.0]],
        "calibration": 1.0,
        "block_frames": 8192,
    },
    "pattern": {
        "ki_bounds": [[-80.0, 80.0], [-80.0, 80.0]],
        "ki_step": 1.0,
        "ks_domain": [[-160.0, 160.0], [-160.0, 160.0]],
        "grid_step": 1.0,
        "transverse": True,
    },
    "analysis": {
        "bin_width": None,  # ns; null: one tag bin
        "max_lag": 200.0,  # ns
        "auto_max_lag": 50.0,
        "far_lag": 150.0,
        "cs_window": None,  # ns; null: fitted peak and one-bin auto terms
        "map_cell": 3.0,  # rad/mm
        "map_normalization": "singles-product",
        "min_accidentals": 10.0,
        "significance_z": 5.0,
        "delta_k": 15.0,
        "pm_threshold": 0.5,
        "guard_band": 6.0,
        "ring_width": 1.0,
        "peak_smoothing": 31,  # annuli
    },
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown configuration key '{path}{k}'")
        if isinstance(base[k], dict) and base[k]:
            if not isinstance(v, dict):
                raise ConfigError(f"'{path}{k}' must be a mapping")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    data: dict
    sha256: str
    path: Path | None = None

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    # -- derived objects ----------------------------------------------------

    def geometry(self) -> EnsembleGeometry:
        e = self.data["ensemble"]
        try:
            return EnsembleGeometry(float(e["sigma_x"]), float(e["sigma_y"]), float(e["sigma_z"]),
                                    float(e["temperature_uK"]))
        except GeometryError as exc:
            raise ConfigError(str(exc)) from exc

    def _beam(self, name: str, label: BeamLabel) -> BeamField:
        b = self.data["beams"][name]
        return BeamField.from_angles(float(b["wavelength"]), float(b.get("angle_x_mrad", 0.0)),
                                     float(b.get("angle_y_mrad", 0.0)), label)

    def ground_spinwave(self) -> SpinWave:
        sw = self.data["spin_wave"]
        beams = self.data["beams"]
        w = beams["write"]
        if sw["K_perp"] is not None:
            if w.get("angle_x_mrad", 0.0) or w.get("angle_y_mrad", 0.0):
                raise ConfigError("give either spin_wave.K_perp or Write beam angles, not both")
            kp = sw["K_perp"]
            if len(kp) != 2:
                raise ConfigError("spin_wave.K_perp must have two components")
            return spinwave_from_transverse(kp, float(w["wavelength"]),
                                            float(beams["seed"]["wavelength"]),
                                            complex(sw["beta"]))
        return ground_spinwave(wavevector_of(self._beam("write", BeamLabel.WRITE)),
                               wavevector_of(self._beam("seed", BeamLabel.SEED)),
                               complex(sw["beta"]))

    def pump_offset(self) -> tuple[float, float]:
        """Transverse wavevector kP1 + kP2 carried by the two pumps."""
        k1 = wavevector_of(self._beam("pump1", BeamLabel.PUMP1))
        k2 = wavevector_of(self._beam("pump2", BeamLabel.PUMP2))
        return (k1.kx + k2.kx, k1.ky + k2.ky)

    def K_perp(self) -> tuple[float, float]:
        K = self.ground_spinwave().K
        return (K.kx, K.ky)

    def lambda_s(self) -> float:
        b = self.data["beams"]
        if b["signal_wavelength"] is not None:
            return float(b["signal_wavelength"])
        return signal_wavelength(float(b["write"]["wavelength"]), float(b["seed"]["wavelength"]),
                                 float(b["pump1"]["wavelength"]), float(b["pump2"]["wavelength"]),
                                 float(b["idler"]["wavelength"]))

    def wavefunction(self) -> SpatialWavefunction:
        try:
            sw = self.ground_spinwave()
            esw = excited_spinwave(sw, wavevector_of(self._beam("pump1", BeamLabel.PUMP1)),
                                   wavevector_of(self._beam("pump2", BeamLabel.PUMP2)),
                                   float(self.data["spin_wave"]["transfer_efficiency"]))
            return SpatialWavefunction(self.geometry(), esw.K, self.lambda_s(),
                                       float(self.data["beams"]["idler"]["wavelength"]))
        except GeometryError as exc:
            raise ConfigError(str(exc)) from exc

    def synthesis(self, seed: int | None = None) -> SynthesisConfig:
        t = self.data["timetags"]
        sd = self.seed if seed is None else seed
        bg_s, bg_i = t["signal_bg_rate"], t["idler_bg_rate"]
        try:
            if bg_s is None or bg_i is None:
                bg = background_for_peak_g2(float(t["target_peak_g2"]), float(t["pair_rate"]),
                                            float(t["eta_idler"]), float(t["tau0"]), float(t["dt"]),
                                            self.data["analysis"]["bin_width"])
                bg_s = bg if bg_s is None else bg_s
                bg_i = bg if bg_i is None else bg_i
            return SynthesisConfig(pair_rate=float(t["pair_rate"]), signal_bg_rate=float(bg_s),
                                   idler_bg_rate=float(bg_i), tau0=float(t["tau0"]),
                                   eta_idler=float(t["eta_idler"]), seed=int(sd), dt=float(t["dt"]))
        except ValueError as exc:
            raise ConfigError(f"timetags: {exc}") from exc

    def frame_synthesis(self, seed: int | None = None) -> FrameSynthesisConfig:
        f = self.data["frames"]
        a = self.data["analysis"]
        sd = self.seed if seed is None else seed
        try:
            return FrameSynthesisConfig(
                mean_signal_per_frame=float(f["mean_signal_per_frame"]), eta=float(f["eta"]),
                target_ratio=None if f["target_ratio"] is None else float(f["target_ratio"]),
                mean_incoherent_idler=None if f["mean_incoherent_idler"] is None
                else float(f["mean_incoherent_idler"]),
                kernel_width=None if f["kernel_width"] is None else float(f["kernel_width"]),
                bounds=_bounds(f["bounds"]), calibration=float(f["calibration"]),
                pm_threshold=float(a["pm_threshold"]), guard_band=float(a["guard_band"]),
                seed=int(sd), block_frames=int(f["block_frames"]))
        except ValueError as exc:
            raise ConfigError(f"frames: {exc}") from exc


def _bounds(b):
    try:
        (xlo, xhi), (ylo, yhi) = b
    except (TypeError, ValueError) as exc:
        raise ConfigError("bounds must be [[xlo, xhi], [ylo, yhi]]") from exc
    if not (xlo < xhi and ylo < yhi):
        raise ConfigError("bounds must be increasing")
    return ((float(xlo), float(xhi)), (float(ylo), float(yhi)))


def _validate(d: dict):
    if not isinstance(d["seed"], int) or not 0 <= d["seed"] < 2 ** 64:
        raise ConfigError("seed must be an integer in [0, 2^64)")
    t = d["timetags"]
    if not (isinstance(t["duration_ns"], (int, float)) and t["duration_ns"] > 0):
        raise ConfigError("timetags.duration_ns must be positive")
    f = d["frames"]
    if not (isinstance(f["n_frames"], int) and f["n_frames"] >= 1):
        raise ConfigError("frames.n_frames must be a positive integer")
    a = d["analysis"]
    for key in ("max_lag", "map_cell", "ring_width"):
        v = a[key]
        if not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
            raise ConfigError(f"analysis.{key} must be positive")
    if a["map_normalization"] not in ("singles-product", "shuffled"):
        raise ConfigError("analysis.map_normalization must be 'singles-product' or 'shuffled'")
    _bounds(f["bounds"])
    _bounds(d["pattern"]["ki_bounds"])
    _bounds(d["pattern"]["ks_domain"])


def parse_config(text: str, path: Path | None = None) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse configuration: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    raw = dict(raw)
    version = raw.pop("schema_version", None)
    if version is None:
        raise ConfigError("schema_version is required")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version} is not supported (expected {SCHEMA_VERSION})")
    data = _merge(DEFAULTS, raw)
    _validate(data)
    cfg = RunConfig(data, hashlib.sha256(text.encode()).hexdigest(), path)
    try:
        cfg.wavefunction()  # surface geometry errors at load time
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid beam or ensemble settings: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc.strerror}") from exc
    return parse_config(text, path)


def default_config_text(K_perp=(20.0, 0.0)) -> str:
    """A complete configuration with every default spelled out."""
    d = copy.deepcopy(DEFAULTS)
    d["spin_wave"]["K_perp"] = [float(K_perp[0]), float(K_perp[1])]
    return yaml.safe_dump({"schema_version": SCHEMA_VERSION, **d}, sort_keys=False)

"""Command-line entry point: ``sixwave {pm-map,simulate,analyze,report}``.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 data or
format error, 5 fit did not converge.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .biphoton import coherent_pattern, grid_axis
from .config import SCHEMA_VERSION, ConfigError, RunConfig, load_config
from .correlation import (
    DataError,
    FitConvergenceError,
    cauchy_schwarz_from_streams,
    enhancement_ratio,
    filter_coincidences,
    find_ring_center,
    fit_temporal,
    g2_histogram,
    g2_map_sum_coordinates,
    peak_radius,
    radial_profile,
    singles_map,
    tail_baseline,
)
from .io import (
    FormatError,
    read_frames,
    read_timetags,
    write_frames,
    write_pattern,
    write_pgm,
    write_table,
    write_timetags,
)
from .synthesis import Channel, calibrate_frames, synthesize_frames, synthesize_timetags

log = logging.getLogger("sixwave")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_FIT = 0, 2, 3, 4, 5


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Collects outputs, overrides and warnings and writes the manifest."""

    def __init__(self, args, cfg: RunConfig, out: Path):
        self.args = args
        self.cfg = cfg
        self.out = out
        self.outputs: list[Path] = []
        self.overrides: dict = {}
        self.warnings: list[str] = []
        self.started = time.time()
        out.mkdir(parents=True, exist_ok=True)

    @property
    def seed(self) -> int:
        return self.cfg.seed if self.args.seed is None else self.args.seed

    def add(self, *paths):
        self.outputs.extend(Path(p) for p in paths)

    def write_json(self, name: str, obj) -> Path:
        p = self.out / name
        p.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
        self.add(p)
        return p

    def finish(self) -> Path:
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "package_version": __version__,
            "subcommand": self.args.command,
            "config": str(self.cfg.path) if self.cfg.path else None,
            "config_sha256": self.cfg.sha256,
            "seed": self.seed,
            "threads": self.args.threads,
            "overrides": self.overrides,
            "warnings": self.warnings,
            "outputs": [{"path": p.name, "sha256": _sha256(p)} for p in self.outputs],
            "timing": {
                "started_utc": datetime.fromtimestamp(self.started, timezone.utc).isoformat(),
                "elapsed_s": round(time.time() - self.started, 3),
            },
            "host": {"python": platform.python_version(), "numpy": np.__version__},
        }
        p = self.out / "manifest.json"
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return p


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


def _pattern_for(cfg: RunConfig, threads: int):
    p = cfg["pattern"]
    (xlo, xhi), (ylo, yhi) = p["ki_bounds"]
    axes = (grid_axis(xlo, xhi, p["ki_step"]), grid_axis(ylo, yhi, p["ki_step"]))
    return coherent_pattern(axes, cfg.wavefunction(), ks_domain=p["ks_domain"],
                            grid_step=float(p["grid_step"]), transverse=bool(p["transverse"]),
                            threads=threads)


def _analysis_setting(run: Run, name: str, flag):
    value = run.cfg["analysis"][name]
    if flag is not None:
        run.overrides[name] = flag
        return flag
    return value


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_pm_map(run: Run) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pattern = _pattern_for(run.cfg, run.args.threads)
    run.warnings += [str(w.message) for w in caught]
    run.add(*write_pattern(pattern, run.out / "pattern"))
    summary = {"pattern_max_raw": pattern.meta["raw_max"],
               "domain_truncated": pattern.meta["domain_truncated"]}
    if np.ptp(pattern.values) > 0:
        centre = find_ring_center(pattern)
        prof = radial_profile(pattern.values, pattern.kx, pattern.ky, centre,
                              float(run.cfg["analysis"]["ring_width"]), normalize=None)
        write_table(run.out / "pattern_radial.csv", ["radius", "value", "n_pixels"],
                    zip(prof.radius.tolist(), prof.value.tolist(), prof.n_pixels.tolist()))
        run.add(run.out / "pattern_radial.csv")
        summary.update({"ring_center": centre.tolist(),
                        "peak_radius": peak_radius(prof, smooth=1)})
    else:
        summary["flat"] = True
    run.write_json("summary.json", summary)
    return EXIT_OK


def cmd_simulate(run: Run) -> int:
    args = run.args
    seed = run.seed
    if args.kind == "timetags":
        scfg = run.cfg.synthesis(seed)
        duration = float(run.cfg["timetags"]["duration_ns"])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            sig, idl = synthesize_timetags(scfg, duration)
        run.warnings += [str(w.message) for w in caught]
        fmt = args.format or "binary"
        ext = "ttag" if fmt == "binary" else "csv"
        run.add(write_timetags(sig, run.out / f"signal.{ext}", fmt),
                write_timetags(idl, run.out / f"idler.{ext}", fmt))
        meta = dict(sig.meta)
        meta.update({"signal_bg_rate": scfg.signal_bg_rate, "idler_bg_rate": scfg.idler_bg_rate,
                     "expected_peak_g2": scfg.expected_peak_g2(run.cfg["analysis"]["bin_width"])})
        run.write_json("synthesis.json", meta)
    else:
        fcfg = run.cfg.frame_synthesis(seed)
        n = int(run.cfg["frames"]["n_frames"])
        if args.format == "binary":
            run.warnings.append("frames are always written as text; --format binary ignored")
        frames = synthesize_frames(fcfg, run.cfg.wavefunction(), n, threads=args.threads)
        run.add(write_frames(frames, run.out / "frames.txt"))
        run.write_json("synthesis.json", frames.meta)
    return EXIT_OK


def _load_streams(paths):
    if len(paths) != 2:
        raise DataError("g2 analysis needs two time-tag files: signal and idler")
    a, b = (read_timetags(p) for p in paths)
    if a.channel == b.channel:
        raise DataError("both time-tag files carry the same channel")
    return (a, b) if a.channel == Channel.SIGNAL else (b, a)


def analyze_g2(run: Run) -> dict:
    sig, idl = _load_streams(run.args.data)
    bw = _analysis_setting(run, "bin_width", run.args.bin_width)
    max_lag = _analysis_setting(run, "max_lag", run.args.max_lag)
    a_lag = float(run.cfg["analysis"]["auto_max_lag"])
    h = g2_histogram(sig, idl, bw, max_lag)
    hss = g2_histogram(sig, sig, bw, a_lag)
    hii = g2_histogram(idl, idl, bw, a_lag)
    for name, hist in (("g2_cross.csv", h), ("g2_signal_auto.csv", hss), ("g2_idler_auto.csv", hii)):
        write_table(run.out / name, ["lag_ns", "counts", "g2"], hist.to_rows())
        run.add(run.out / name)
    fit = fit_temporal(h)
    window = run.cfg["analysis"]["cs_window"]
    cs = cauchy_schwarz_from_streams(sig, idl, window, None if window else fit)
    far = float(run.cfg["analysis"]["far_lag"])
    summary = fit.as_dict()
    summary.update({
        "normalization": h.normalization,
        "baseline_counts": h.baseline,
        "tail_baseline_counts": tail_baseline(h, far) if far < max_lag else None,
        "g2_max_bin": float(h.g2.max()),
        "g2_zero_lag_bin": h.value_at(0.0),
        "g2_ss_0": cs["g2_ss"], "g2_ii_0": cs["g2_ii"],
        "R": cs["R"], "R_cross_source": cs["cross_source"],
        "n_signal": len(sig), "n_idler": len(idl),
    })
    return summary


def analyze_map(run: Run) -> dict:
    frames = read_frames(run.args.data[0])
    cell = _analysis_setting(run, "map_cell", run.args.cell)
    norm = _analysis_setting(run, "map_normalization", run.args.normalization)
    m = g2_map_sum_coordinates(frames, run.cfg.pump_offset(), cell, norm)
    X, Y = np.meshgrid(m.kx, m.ky, indexing="ij")
    rows = zip(X.ravel().tolist(), Y.ravel().tolist(), m.coincidences.ravel().tolist(),
               m.accidentals.ravel().tolist(), m.values.ravel().tolist(), m.valid.ravel().tolist())
    write_table(run.out / "g2_map.csv", ["kx", "ky", "coincidences", "accidentals", "g2", "valid"],
                ([a, b, c, d, e, int(f)] for a, b, c, d, e, f in rows))
    run.add(run.out / "g2_map.csv", write_pgm(m.values, run.out / "g2_map.pgm"))
    min_acc = float(run.cfg["analysis"]["min_accidentals"])
    zcut = float(run.cfg["analysis"]["significance_z"])
    try:
        peak, value, z = m.peak(min_acc)
        peak = peak.tolist()
    except DataError:
        run.warnings.append(f"no map cell has {min_acc:g} expected accidentals; "
                            "too few frames to test for a peak")
        peak, value, z = None, None, None
    significant = bool(z is not None and z >= zcut)
    return {"normalization": m.normalization, "cell": cell, "peak_K_perp": peak,
            "peak_g2": value, "peak_z": z, "significant": significant,
            "verdict": "significant peak" if significant else "no significant peak",
            "expected_K_perp": list(run.cfg.K_perp()),
            "invalid_cells": int((~m.valid).sum()), "n_frames": m.n_frames}


def analyze_filter(run: Run) -> dict:
    frames = read_frames(run.args.data[0])
    dk = _analysis_setting(run, "delta_k", run.args.delta_k)
    S, I = filter_coincidences(frames, run.cfg.K_perp(), dk, run.cfg.pump_offset())
    for name, arr in (("filtered_signal", S), ("filtered_idler", I)):
        np.savetxt(run.out / f"{name}.txt", arr, fmt="%d")
        run.add(run.out / f"{name}.txt", write_pgm(arr, run.out / f"{name}.pgm"))
    return {"delta_k": dk, "K_perp": list(run.cfg.K_perp()),
            "retained_signal": int(S.sum()), "retained_idler": int(I.sum())}


def _frames_pattern(run: Run, frames):
    cal = calibrate_frames(run.cfg.frame_synthesis(), run.cfg.wavefunction(), run.args.threads)
    if frames.bounds != run.cfg.frame_synthesis().bounds or \
            frames.calibration != run.cfg.frame_synthesis().calibration:
        raise DataError("frame file sensor layout differs from the configuration")
    return cal


def analyze_ratio(run: Run) -> dict:
    frames = read_frames(run.args.data[0])
    cal = _frames_pattern(run, frames)
    I = singles_map(frames, Channel.IDLER)
    guard = int(round(float(run.cfg["analysis"]["guard_band"]) / frames.calibration))
    r = enhancement_ratio(I, cal["region"], guard)
    np.savetxt(run.out / "idler_singles.txt", I, fmt="%d")
    run.add(run.out / "idler_singles.txt")
    return {"enhancement_ratio": r, "expected_ratio": cal["expected_ratio"],
            "region_fraction": float(cal["region"].mean()), "guard_pixels": guard}


def analyze_radial(run: Run) -> dict:
    frames = read_frames(run.args.data[0])
    cal = _frames_pattern(run, frames)
    pattern = cal["pattern"]
    rw = _analysis_setting(run, "ring_width", run.args.ring_width)
    sm = int(run.cfg["analysis"]["peak_smoothing"])
    centre = find_ring_center(pattern)
    I = singles_map(frames, Channel.IDLER)
    ax, ay = frames.pixel_axes()
    meas = radial_profile(I, ax, ay, centre, rw, normalize="far")
    pred = radial_profile(pattern.values, pattern.kx, pattern.ky, centre, rw, normalize=None)
    write_table(run.out / "radial_profile.csv", ["radius", "measured", "predicted", "n_pixels"],
                zip(meas.radius.tolist(), meas.value.tolist(), pred.value.tolist(),
                    meas.n_pixels.tolist()))
    run.add(run.out / "radial_profile.csv")
    return {"center": centre.tolist(), "ring_width": rw,
            "measured_peak_radius": peak_radius(meas, sm),
            "predicted_peak_radius": peak_radius(pred, sm),
            "far_baseline_counts": meas.baseline}


ANALYSES = {"g2": analyze_g2, "map": analyze_map, "filter": analyze_filter,
            "radial": analyze_radial, "ratio": analyze_ratio}


def cmd_analyze(run: Run) -> int:
    summary = ANALYSES[run.args.analysis](run)
    summary["analysis"] = run.args.analysis
    summary["inputs"] = [{"path": str(p), "sha256": _sha256(Path(p))} for p in run.args.data]
    run.write_json("summary.json", summary)
    return EXIT_OK


_REPORT_KEYS = ("tau0_ns", "tau0_err_ns", "g2_peak", "g2_peak_err", "superradiance_ratio", "R",
                "peak_K_perp", "verdict", "enhancement_ratio", "measured_peak_radius",
                "predicted_peak_radius", "peak_radius", "ring_center")


def cmd_report(run: Run) -> int:
    """Collect the key numbers of earlier runs into one table."""
    entries = []
    for d in run.args.runs:
        d = Path(d)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
            name = "summary.json" if (d / "summary.json").exists() else "synthesis.json"
            summary = json.loads((d / name).read_text())
        except (OSError, ValueError) as exc:
            raise DataError(f"{d} is not a completed run directory: {exc}") from exc
        entries.append({"run": d.name, "subcommand": manifest.get("subcommand"),
                        "analysis": summary.get("analysis"),
                        **{k: summary[k] for k in _REPORT_KEYS if k in summary}})
    run.write_json("report.json", entries)
    lines = []
    for e in entries:
        head = f"{e['run']} ({e['subcommand']}{'/' + e['analysis'] if e.get('analysis') else ''})"
        lines.append(head)
        lines += [f"  {k} = {e[k]}" for k in _REPORT_KEYS if k in e]
    (run.out / "report.txt").write_text("\n".join(lines) + "\n")
    run.add(run.out / "report.txt")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--format", choices=("csv", "binary"), default=None,
                        help="time-tag file format (default: binary; frames are always text)")
    common.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sixwave", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pm-map", parents=[common], help="phase-matching map of coherent emission")
    s = sub.add_parser("simulate", parents=[common], help="synthesise detector data")
    s.add_argument("--kind", choices=("timetags", "frames"), required=True)
    a = sub.add_parser("analyze", parents=[common], help="analyse detector data")
    a.add_argument("--analysis", choices=tuple(ANALYSES), required=True)
    a.add_argument("--data", nargs="+", required=True, help="input data file(s)")
    a.add_argument("--bin-width", type=float, default=None, help="g2 bin width, ns")
    a.add_argument("--max-lag", type=float, default=None, help="g2 lag range, ns")
    a.add_argument("--cell", type=float, default=None, help="map cell, rad/mm")
    a.add_argument("--normalization", choices=("singles-product", "shuffled"), default=None)
    a.add_argument("--delta-k", type=float, default=None, help="coincidence filter radius, rad/mm")
    a.add_argument("--ring-width", type=float, default=None, help="radial profile annulus, rad/mm")
    r = sub.add_parser("report", parents=[common], help="summarise earlier runs")
    r.add_argument("runs", nargs="+", help="run output directories")
    return p


COMMANDS = {"pm-map": cmd_pm_map, "simulate": cmd_simulate, "analyze": cmd_analyze,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        cfg = load_config(args.config)
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must lie in [0, 2^64)")
        run = Run(args, cfg, Path(args.out))
        if args.seed is not None:
            run.overrides["seed"] = args.seed
        code = COMMANDS[args.command](run)
        run.finish()
        return code
    except ConfigError as exc:
        print(f"sixwave: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FitConvergenceError as exc:
        print(f"sixwave: fit did not converge: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, default=str), file=sys.stderr)
        return EXIT_FIT
    except (FormatError, DataError, FileNotFoundError) as exc:
        print(f"sixwave: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

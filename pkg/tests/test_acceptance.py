"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import time

import numpy as np
import pytest
import yaml

from conftest import make_wavefunction
from sixwave.biphoton import coherent_pattern, grid_axis
from sixwave.cli import main
from sixwave.correlation import (
    cauchy_schwarz_from_streams,
    enhancement_ratio,
    filter_coincidences,
    find_ring_center,
    fit_temporal,
    g2_histogram,
    g2_map_sum_coordinates,
    radial_profile,
    singles_map,
)
from sixwave.geometry import EnsembleGeometry, Wavevector, delta_k, motional_decay_rate
from sixwave.synthesis import (
    Channel,
    FrameSynthesisConfig,
    SynthesisConfig,
    default_timetag_config,
    synthesize_frames,
    synthesize_timetags,
)
from test_correlation import (
    brute_filter,
    brute_histogram,
    brute_map,
    random_frames,
    random_stream,
)


@pytest.fixture(scope="module")
def temporal_run():
    """2e5 pairs from the default source, histogrammed and fitted."""
    t0 = time.perf_counter()
    cfg = default_timetag_config(seed=2024)
    sig, idl = synthesize_timetags(cfg, 4e8)
    h = g2_histogram(sig, idl, max_lag=200.0)
    fit = fit_temporal(h)
    elapsed = time.perf_counter() - t0
    return sig, idl, fit, elapsed


def test_criterion_1_temporal_round_trip(acceptance, temporal_run):
    sig, _, fit, elapsed = temporal_run
    pairs = sig.meta["pairs"]
    ok = (pairs >= 1e5 and abs(fit.tau0 - 9.8) <= 0.5 and abs(fit.g2_peak - 35.3) <= 0.1 * 35.3
          and elapsed < 60)
    acceptance(1, "temporal round trip", ok,
               f"pairs={pairs} tau0={fit.tau0:.3f}+-{fit.tau0_err:.3f} ns "
               f"g2_peak={fit.g2_peak:.2f} runtime={elapsed:.1f} s")
    assert ok


def test_criterion_2_cauchy_schwarz(acceptance, temporal_run):
    sig, idl, fit, _ = temporal_run
    on = cauchy_schwarz_from_streams(sig, idl, fit=fit)
    # pair channel off, same backgrounds; coincidence window of 100 tag bins
    base = default_timetag_config(seed=77)
    null_cfg = SynthesisConfig(pair_rate=0.0, signal_bg_rate=base.signal_bg_rate,
                               idler_bg_rate=base.idler_bg_rate, seed=77)
    ns, ni = synthesize_timetags(null_cfg, 4e10)
    off = cauchy_schwarz_from_streams(ns, ni, window=100 * null_cfg.dt)
    ok = on["R"] > 100 and abs(off["R"] - 1) <= 0.05
    acceptance(2, "Cauchy-Schwarz", ok, f"R_pairs={on['R']:.0f} R_null={off['R']:.4f}")
    assert ok


def test_criterion_3_superradiance(acceptance, temporal_run):
    _, _, fit, _ = temporal_run
    ratio = fit.superradiance_ratio
    ok = ratio < 0.5 and fit.superradiant and fit.natural_lifetime == 27.7
    acceptance(3, "superradiance flag", ok, f"tau0/27.7 ns = {ratio:.3f}")
    assert ok


def test_criterion_4_motional_decay(acceptance):
    rate = motional_decay_rate(Wavevector(0.0, 0.0, 1.6e4), EnsembleGeometry(temperature=22.0))
    ok = abs(rate - 0.7) <= 0.05 * 0.7
    acceptance(4, "motional decay", ok, f"rate={rate:.4f} /us")
    assert ok


def test_criterion_5_spatial_round_trip(acceptance):
    t0 = time.perf_counter()
    w = make_wavefunction((20.0, 0.0))
    cfg = FrameSynthesisConfig(seed=11)
    frames = synthesize_frames(cfg, w, 500000)
    m = g2_map_sum_coordinates(frames, pump_offset=(0.0, 0.0), cell=3.0)
    peak, _, z = m.peak(10)
    from sixwave.synthesis import calibrate_frames
    region = calibrate_frames(cfg, w)["region"]
    ratio = enhancement_ratio(singles_map(frames, Channel.IDLER), region, 6)
    elapsed = time.perf_counter() - t0
    ok = (np.all(np.abs(peak - np.array([20.0, 0.0])) <= 3.0) and abs(ratio - 1.4) <= 0.05
          and elapsed < 120)
    acceptance(5, "spatial round trip", ok,
               f"argmax={peak.tolist()} z={z:.1f} ratio={ratio:.4f} runtime={elapsed:.1f} s")
    assert ok


def _direct_pattern(w, axes, domain, step):
    # exhaustive sum over the whole signal domain, no stencil
    g = w.geometry
    ks = np.stack(np.meshgrid(grid_axis(*domain[0], step), grid_axis(*domain[1], step),
                              indexing="ij"), -1).reshape(-1, 2)
    raw = np.zeros((axes[0].size, axes[1].size))
    for i, x in enumerate(axes[0]):
        for j, y in enumerate(axes[1]):
            dp, dz = delta_k(w.K_esw, ks, np.array([x, y]), w.lambda_s, w.lambda_i)
            f = np.exp(-(dp[..., 0] ** 2 * g.sigma_x ** 2 + dp[..., 1] ** 2 * g.sigma_y ** 2)
                       - 2.0 * dz ** 2 * g.sigma_z ** 2)
            raw[i, j] = f.sum()
    return raw / raw.max()


def test_criterion_6_pattern_fidelity(acceptance):
    w = make_wavefunction((20.0, 0.0))
    a = grid_axis(-80, 80, 4.0)
    dom = ((-160.0, 160.0), (-160.0, 160.0))
    p = coherent_pattern((a, a), w, dom, grid_step=1.0)
    half = coherent_pattern((a, a), w, dom, grid_step=0.5)
    direct = _direct_pattern(w, (a, a), dom, 1.0)
    c = find_ring_center(p)
    prof = radial_profile(p.values, a, a, c, 4.0, normalize=None)
    ref = radial_profile(direct, a, a, c, 4.0, normalize=None)
    rms = float(np.sqrt(np.mean((prof.value - ref.value) ** 2)))
    raw1 = p.values * p.meta["raw_max"]
    raw2 = half.values * half.meta["raw_max"]
    refine = float(np.max(np.abs(raw1 - raw2)) / raw1.max())
    ok = rms < 1e-3 and refine < 1e-3
    acceptance(6, "pattern fidelity", ok, f"profile rms={rms:.2e} refinement change={refine:.2e}")
    assert ok


def test_criterion_7_oracle_equivalence(acceptance):
    failures = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        span = int(rng.integers(5, 300))
        a = random_stream(rng, int(rng.integers(1, 51)), span)
        b = random_stream(rng, int(rng.integers(1, 51)), span, Channel.IDLER)
        m = int(rng.integers(1, 4))
        nbin = int(rng.integers(1, 15))
        h = g2_histogram(a, b, m * 3.85, nbin * m * 3.85)
        ha = g2_histogram(a, a, m * 3.85, nbin * m * 3.85)
        ok = (np.array_equal(h.counts, brute_histogram(a.tags, b.tags, m, nbin, False))
              and np.array_equal(ha.counts, brute_histogram(a.tags, a.tags, m, nbin, True)))

        frames = random_frames(seed)
        cell = float(rng.choice([1.0, 2.0, 3.0]))
        off = tuple(rng.uniform(-5, 5, 2))
        mp = g2_map_sum_coordinates(frames, off, cell)
        coinc, prod = brute_map(frames, off, cell)
        for (i, j), cnt in np.ndenumerate(mp.coincidences):
            key = (int(round(mp.kx[i] / cell)), int(round(mp.ky[j] / cell)))
            ok &= cnt == coinc.get(key, 0) and mp.singles_product[i, j] == prod.get(key, 0)
        ok &= mp.coincidences.sum() == sum(coinc.values())
        ok &= mp.singles_product.sum() == sum(prod.values())

        K = tuple(rng.uniform(-8, 8, 2))
        dk = float(rng.uniform(0, 20))
        S, I = filter_coincidences(frames, K, dk, off)
        bS, bI = brute_filter(frames, K, dk, off)
        ok &= np.array_equal(S, bS) and np.array_equal(I, bI)
        if not ok:
            failures.append(seed)
    acceptance(7, "oracle equivalence", not failures, f"100 seeds, failing={failures}")
    assert not failures


def _cfg(path):
    data = {"schema_version": 1, "seed": 31, "spin_wave": {"K_perp": [20.0, 0.0]},
            "timetags": {"duration_ns": 5e7}, "frames": {"n_frames": 40000, "block_frames": 4096}}
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_criterion_8_determinism(acceptance, tmp_path):
    cfg = _cfg(tmp_path / "c.yaml")
    data = tmp_path / "data"
    assert main(["simulate", "--kind", "timetags", "--out", str(data / "tt"), "--config", cfg]) == 0
    assert main(["simulate", "--kind", "frames", "--out", str(data / "fr"), "--config", cfg]) == 0
    frames = str(data / "fr" / "frames.txt")
    tags = [str(data / "tt" / "signal.ttag"), str(data / "tt" / "idler.ttag")]
    outputs = {}
    for t in ("1", "4"):
        d = tmp_path / f"t{t}"
        common = ["--config", cfg, "--threads", t]
        codes = [
            main(["simulate", "--kind", "timetags", "--out", str(d / "tt"), *common]),
            main(["simulate", "--kind", "frames", "--out", str(d / "fr"), *common]),
            main(["pm-map", "--out", str(d / "pm"), *common]),
            main(["analyze", "--analysis", "map", "--out", str(d / "map"), "--data", frames, *common]),
            main(["analyze", "--analysis", "ratio", "--out", str(d / "ratio"), "--data", frames, *common]),
            main(["analyze", "--analysis", "g2", "--out", str(d / "g2"), "--data", *tags, *common]),
        ]
        assert codes == [0] * 6
        # manifests differ only in thread count and timing
        outputs[t] = {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*"))
                      if p.is_file() and p.name != "manifest.json"}
    same = outputs["1"].keys() == outputs["4"].keys() and all(
        outputs["1"][k] == outputs["4"][k] for k in outputs["1"])
    # the reference run with default threads matches too
    for rel in ("tt/signal.ttag", "tt/idler.ttag", "fr/frames.txt"):
        same &= (data / rel).read_bytes() == (tmp_path / "t4" / rel).read_bytes()
    acceptance(8, "determinism across --threads", same, f"{len(outputs['1'])} files compared")
    assert same

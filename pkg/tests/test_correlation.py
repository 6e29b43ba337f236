import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_wavefunction
from sixwave.biphoton import FitModelParams, PatternMap, coherent_pattern, g2_binned_model, grid_axis
from sixwave.correlation import (
    CoincidenceAccumulator,
    DataError,
    FitConvergenceError,
    G2Histogram,
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
from sixwave.synthesis import Channel, PhotonFrameSet, TimeTagStream


# -- brute-force oracles -----------------------------------------------------

def brute_histogram(a, b, m, nbin, auto):
    lo, hi = -nbin * m, nbin * m
    counts = np.zeros(2 * nbin, dtype=np.int64)
    for i, ta in enumerate(a):
        for j, tb in enumerate(b):
            if auto and i == j:
                continue
            lag = int(tb) - int(ta)
            if lo <= lag < hi:
                counts[(lag - lo) // m] += 1
    return counts


def brute_map(frames, pump_offset, cell):
    ax, ay = frames.pixel_axes()
    fs, skx, sky = frames.select(Channel.SIGNAL)
    fi, ikx, iky = frames.select(Channel.IDLER)
    six, siy = frames.pixel_index(skx, sky)
    iix, iiy = frames.pixel_index(ikx, iky)
    coinc, prod = {}, {}
    for p in range(fs.size):
        for q in range(fi.size):
            sx = ax[six[p]] + ax[iix[q]] - pump_offset[0]
            sy = ay[siy[p]] + ay[iiy[q]] - pump_offset[1]
            key = (int(math.floor(sx / cell + 0.5)), int(math.floor(sy / cell + 0.5)))
            prod[key] = prod.get(key, 0) + 1
            if fs[p] == fi[q]:
                coinc[key] = coinc.get(key, 0) + 1
    return coinc, prod


def brute_filter(frames, K, delta_k, pump_offset):
    ax, ay = frames.pixel_axes()
    fs, skx, sky = frames.select(Channel.SIGNAL)
    fi, ikx, iky = frames.select(Channel.IDLER)
    s_keep, i_keep = set(), set()
    for p in range(fs.size):
        for q in range(fi.size):
            if fs[p] != fi[q]:
                continue
            d = math.hypot(skx[p] + ikx[q] - pump_offset[0] - K[0], sky[p] + iky[q] - pump_offset[1] - K[1])
            if delta_k > 0 and d <= delta_k:
                s_keep.add(p)
                i_keep.add(q)
    S = np.zeros((ax.size, ay.size), dtype=np.int64)
    I = np.zeros_like(S)
    for p in s_keep:
        ix, iy = frames.pixel_index(skx[p], sky[p])
        S[ix, iy] += 1
    for q in i_keep:
        ix, iy = frames.pixel_index(ikx[q], iky[q])
        I[ix, iy] += 1
    return S, I


def random_frames(seed, max_hits=100, half=10.0, calibration=1.0):
    rng = np.random.default_rng(seed)
    n_frames = int(rng.integers(1, 25))
    n = int(rng.integers(1, max_hits + 1))
    frame = rng.integers(0, n_frames, n)
    channel = rng.integers(0, 2, n)
    kx = rng.uniform(-half, half, n)
    ky = rng.uniform(-half, half, n)
    order = np.lexsort((channel, frame))
    return PhotonFrameSet(n_frames, frame[order], channel[order], kx[order], ky[order],
                          calibration, ((-half, half), (-half, half)))


def random_stream(rng, n, span, channel=Channel.SIGNAL):
    tags = np.sort(rng.integers(0, span, n))
    return TimeTagStream(channel, tags, 3.85, span * 3.85)


# -- histograms --------------------------------------------------------------

@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 60), st.integers(1, 60),
       st.sampled_from([1, 2, 3]), st.integers(1, 12))
@settings(max_examples=100, deadline=None)
def test_histogram_matches_brute_force(seed, na, nb, m, nbin):
    rng = np.random.default_rng(seed)
    span = int(rng.integers(5, 200))
    a = random_stream(rng, na, span)
    b = random_stream(rng, nb, span, Channel.IDLER)
    h = g2_histogram(a, b, bin_width=m * 3.85, max_lag=nbin * m * 3.85)
    np.testing.assert_array_equal(h.counts, brute_histogram(a.tags, b.tags, m, nbin, False))
    h2 = g2_histogram(a, a, bin_width=m * 3.85, max_lag=nbin * m * 3.85)
    assert h2.auto
    np.testing.assert_array_equal(h2.counts, brute_histogram(a.tags, a.tags, m, nbin, True))


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 7))
@settings(max_examples=50, deadline=None)
def test_histogram_chunks_merge(seed, chunks):
    rng = np.random.default_rng(seed)
    a = random_stream(rng, 300, 2000)
    b = random_stream(rng, 300, 2000, Channel.IDLER)
    one = g2_histogram(a, b, max_lag=50)
    many = g2_histogram(a, b, max_lag=50, chunks=chunks)
    np.testing.assert_array_equal(one.counts, many.counts)
    auto1 = g2_histogram(a, a, max_lag=50)
    auto_many = g2_histogram(a, a, max_lag=50, chunks=chunks)
    np.testing.assert_array_equal(auto1.counts, auto_many.counts)


def test_accumulator_merge_over_time_partitions():
    rng = np.random.default_rng(1)
    a = np.sort(rng.integers(0, 10000, 800))
    b = np.sort(rng.integers(0, 10000, 800))
    edges = np.arange(-20, 21, 2)
    whole = CoincidenceAccumulator(edges).add(a, b)
    split = 5000
    left = CoincidenceAccumulator(edges).add(a[a < split], b)
    right = CoincidenceAccumulator(edges).add(a[a >= split], b)
    merged = left.merge(right)
    np.testing.assert_array_equal(whole.counts, merged.counts)
    assert merged.n_a == 800
    with pytest.raises(ValueError):
        left.merge(CoincidenceAccumulator(np.arange(-10, 11)))


def test_independent_streams_are_uncorrelated():
    rng = np.random.default_rng(12)
    span = 10 ** 9
    a = random_stream(rng, 10 ** 6, span)
    b = random_stream(rng, 10 ** 6, span, Channel.IDLER)
    h = g2_histogram(a, b, bin_width=3.85 * 50, max_lag=3.85 * 50 * 20)
    assert abs(h.g2.mean() - 1.0) < 0.01
    assert np.all(np.abs(h.g2 - 1) < 5 / math.sqrt(h.baseline))


def test_histogram_errors_and_lookup():
    rng = np.random.default_rng(0)
    a = random_stream(rng, 20, 100)
    b = TimeTagStream(Channel.IDLER, a.tags, 1.0, a.duration)
    with pytest.raises(DataError):
        g2_histogram(a, b)
    with pytest.raises(DataError):
        g2_histogram(a, a, bin_width=5.0)
    h = g2_histogram(a, a, max_lag=20)
    assert h.value_at(0.0) == h.g2[h.lags.size // 2]
    with pytest.raises(IndexError):
        h.value_at(1e4)
    assert tail_baseline(h, 10.0) >= 0


# -- temporal fit ------------------------------------------------------------

def _noiseless(alpha, tau0, dt=3.85, baseline=1e4, max_lag=200.0):
    edges = np.arange(-int(max_lag / dt), int(max_lag / dt))
    lags = edges * dt
    g = g2_binned_model(lags, dt, FitModelParams(alpha, tau0, dt))
    return G2Histogram(dt, lags, baseline * g, baseline, g, dt=dt, duration=1.0)


@pytest.mark.parametrize("alpha,tau0", [(50.1, 9.8), (5.0, 27.7), (200.0, 4.0)])
def test_fit_recovers_noiseless_model(alpha, tau0):
    r = fit_temporal(_noiseless(alpha, tau0))
    assert r.tau0 == pytest.approx(tau0, rel=1e-6)
    assert r.alpha == pytest.approx(alpha, rel=1e-6)
    assert r.chi2 < 1e-12
    peak = np.max(g2_binned_model(np.arange(0, 20) * 3.85, 3.85, FitModelParams(alpha, tau0)))
    assert r.g2_peak == pytest.approx(peak, rel=1e-6)
    d = r.as_dict()
    assert d["superradiant"] == (tau0 < 27.7)


def test_fit_on_synthetic_data_has_sane_errors():
    from sixwave.synthesis import default_timetag_config, synthesize_timetags
    sig, idl = synthesize_timetags(default_timetag_config(seed=21), 2e8)
    r = fit_temporal(g2_histogram(sig, idl, max_lag=200))
    assert abs(r.tau0 - 9.8) < 4 * r.tau0_err + 0.1
    assert 0.5 < r.reduced_chi2 < 1.5


def test_fit_errors():
    with pytest.raises(FitConvergenceError) as info:
        fit_temporal(_noiseless(50.1, 9.8), max_nfev=1)
    assert "nfev" in info.value.diagnostics
    h = _noiseless(50.1, 9.8)
    sparse = G2Histogram(h.bin_width, h.lags, np.where(np.arange(h.counts.size) < 5, 1.0, 0.0),
                         1.0, h.g2, dt=3.85)
    with pytest.raises(DataError):
        fit_temporal(sparse)


def test_cauchy_schwarz_on_poisson_streams():
    rng = np.random.default_rng(4)
    span = 2 * 10 ** 7
    a = random_stream(rng, 2 * 10 ** 5, span)
    b = random_stream(rng, 2 * 10 ** 5, span, Channel.IDLER)
    out = cauchy_schwarz_from_streams(a, b, window=100 * 3.85)
    assert out["R"] == pytest.approx(1.0, abs=0.1)
    assert out["cross_source"] == "measured"


# -- wavevector maps ---------------------------------------------------------

@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1.0, 2.0, 3.0]),
       st.tuples(st.floats(-5, 5), st.floats(-5, 5)))
@settings(max_examples=100, deadline=None)
def test_map_matches_brute_force(seed, cell, off):
    frames = random_frames(seed)
    m = g2_map_sum_coordinates(frames, off, cell)
    coinc, prod = brute_map(frames, off, cell)
    for (i, j), c in np.ndenumerate(m.coincidences):
        key = (int(round(m.kx[i] / cell)), int(round(m.ky[j] / cell)))
        assert c == coinc.get(key, 0)
        assert m.singles_product[i, j] == prod.get(key, 0)
    assert m.coincidences.sum() == sum(coinc.values())
    assert m.singles_product.sum() == sum(prod.values())


@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 20), st.tuples(st.floats(-8, 8), st.floats(-8, 8)))
@settings(max_examples=100, deadline=None)
def test_filter_matches_brute_force(seed, delta_k, K):
    frames = random_frames(seed)
    S, I = filter_coincidences(frames, K, delta_k)
    bS, bI = brute_filter(frames, K, delta_k, (0.0, 0.0))
    np.testing.assert_array_equal(S, bS)
    np.testing.assert_array_equal(I, bI)


def test_filter_limits():
    frames = random_frames(3)
    S, I = filter_coincidences(frames, (0, 0), 0.0)
    assert S.sum() == 0 and I.sum() == 0
    S, I = filter_coincidences(frames, (0, 0), 1e9)
    fs, _, _ = frames.select(Channel.SIGNAL)
    fi, _, _ = frames.select(Channel.IDLER)
    both = np.intersect1d(fs, fi)
    assert S.sum() == np.isin(fs, both).sum() and I.sum() == np.isin(fi, both).sum()
    with pytest.raises(ValueError):
        filter_coincidences(frames, (0, 0), -1.0)


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 0.9))
@settings(max_examples=50, deadline=None)
def test_map_merge_over_frame_partitions(seed, frac):
    frames = random_frames(seed, max_hits=200)
    if frames.n_frames < 2:
        return
    at = min(max(int(frac * frames.n_frames), 1), frames.n_frames - 1)
    a, b = frames.split(at)
    whole = g2_map_sum_coordinates(frames)
    merged = g2_map_sum_coordinates(a).merge(g2_map_sum_coordinates(b))
    np.testing.assert_array_equal(whole.coincidences, merged.coincidences)
    np.testing.assert_array_equal(whole.singles_product, merged.singles_product)
    assert merged.n_frames == frames.n_frames
    np.testing.assert_array_equal(whole.values, merged.values)


def test_shuffled_normalisation():
    frames = random_frames(5, max_hits=200)
    m = g2_map_sum_coordinates(frames, normalization="shuffled")
    fs, _, _ = frames.select(Channel.SIGNAL)
    fi, _, _ = frames.select(Channel.IDLER)
    expected = sum(int(np.sum(fi == (f + 1) % frames.n_frames)) for f in fs)
    assert m.shuffled.sum() == expected
    with pytest.raises(ValueError):
        m.merge(m)
    with pytest.raises(ValueError):
        g2_map_sum_coordinates(frames, normalization="other")


def test_uncorrelated_frames_have_no_significant_peak():
    rng = np.random.default_rng(8)
    n_frames, n = 20000, 60000
    frame = rng.integers(0, n_frames, n)
    channel = rng.integers(0, 2, n)
    kx = rng.uniform(-30, 30, n)
    ky = rng.uniform(-30, 30, n)
    o = np.lexsort((channel, frame))
    fr = PhotonFrameSet(n_frames, frame[o], channel[o], kx[o], ky[o], 1.0, ((-30, 30), (-30, 30)))
    m = g2_map_sum_coordinates(fr)
    _, g, z = m.peak(10)
    assert z < 5
    assert abs(np.nanmean(m.values[m.accidentals >= 10]) - 1) < 0.02


# -- ratio, profiles, ring centre --------------------------------------------

def test_enhancement_ratio():
    region = np.zeros((40, 40), dtype=bool)
    region[15:25, 15:25] = True
    assert enhancement_ratio(np.full((40, 40), 3.0), region, 6) == pytest.approx(1.0)
    m = np.ones((40, 40))
    m[region] = 1.4
    assert enhancement_ratio(m, region, 6) == pytest.approx(1.4)
    with pytest.raises(DataError):
        enhancement_ratio(m, np.zeros((40, 40), bool))
    with pytest.raises(DataError):
        enhancement_ratio(m, np.ones((40, 40), bool))
    with pytest.raises(DataError):
        enhancement_ratio(m, region[:10])


def test_radial_profile_basics():
    a = grid_axis(-20, 20, 1.0)
    p = radial_profile(np.full((40, 40), 5.0), a, a, (0.0, 0.0))
    np.testing.assert_allclose(p.value, 1.0)
    X, Y = np.meshgrid(a, a, indexing="ij")
    p = radial_profile(np.hypot(X, Y), a, a, (0.0, 0.0), normalize=None)
    assert np.all(np.abs(p.value - p.radius) <= 0.5)
    with pytest.raises(DataError):
        radial_profile(np.ones((40, 40)), a, a, (50.0, 0.0))
    with pytest.raises(ValueError):
        radial_profile(np.ones((40, 40)), a, a, (0.0, 0.0), ring_width=0)


def test_peak_radius_of_synthetic_ring():
    a = grid_axis(-60, 60, 1.0)
    X, Y = np.meshgrid(a, a, indexing="ij")
    ring = np.exp(-((np.hypot(X - 3, Y + 2) - 25.0) ** 2) / (2 * 6.0 ** 2))
    p = radial_profile(ring, a, a, (3.0, -2.0), normalize=None)
    assert peak_radius(p, smooth=1) == pytest.approx(25.0, abs=1.0)
    assert peak_radius(p, smooth=15) == pytest.approx(25.0, abs=1.0)


def test_ring_centre_symmetric_and_rotated():
    a = grid_axis(-80, 80, 2.0)
    dom = ((-180, 180), (-180, 180))
    c0 = find_ring_center(coherent_pattern((a, a), make_wavefunction((0.0, 0.0)), dom))
    assert np.all(np.abs(c0) < 1.0)
    p40 = coherent_pattern((a, a), make_wavefunction((40.0, 0.0)), dom)
    c40 = find_ring_center(p40)
    rot = PatternMap(np.rot90(p40.values, 1), a, a)
    c_rot = find_ring_center(rot)
    np.testing.assert_allclose(c_rot, [-c40[1], c40[0]], atol=2.0)
    assert 0.4 * 40 < c40[0] < 0.6 * 40


def test_ring_centre_of_flat_map_fails():
    a = grid_axis(-10, 10, 1.0)
    with pytest.raises(DataError):
        find_ring_center(PatternMap(np.ones((20, 20)), a, a))


def test_singles_map_counts():
    fr = random_frames(2)
    assert singles_map(fr, Channel.SIGNAL).sum() + singles_map(fr, Channel.IDLER).sum() == len(fr)


# -- statistical invariants --------------------------------------------------

def test_histogram_converges_to_model():
    from sixwave.synthesis import default_timetag_config, synthesize_timetags
    cfg = default_timetag_config(seed=99)
    sig, idl = synthesize_timetags(cfg, 2e9)
    assert sig.meta["pairs"] >= 9.9e5
    p = FitModelParams(cfg.expected_alpha(), cfg.tau0)
    # five tag bins: the flat background holds about 1.2e4 counts per bin
    h = g2_histogram(sig, idl, bin_width=5 * cfg.dt, max_lag=150.0)
    expected = h.baseline * g2_binned_model(h.lags, h.bin_width, p)
    sel = expected >= 100
    assert sel.all()
    dev = np.abs(h.counts[sel] - expected[sel]) / expected[sel]
    assert dev.max() < 0.05
    # native bins: Poisson-consistent with the bin-averaged model
    h1 = g2_histogram(sig, idl, max_lag=150.0)
    e1 = h1.baseline * g2_binned_model(h1.lags, h1.bin_width, p)
    chi2 = float(np.sum((h1.counts - e1) ** 2 / e1))
    n = e1.size
    assert abs(chi2 - n) < 5 * math.sqrt(2 * n)


@pytest.mark.parametrize("q", [(-9.0, 6.0), (12.0, -3.0)])
def test_map_peak_follows_K_perp(q):
    from sixwave.synthesis import FrameSynthesisConfig, synthesize_frames
    peaks = []
    for K in ((20.0, 0.0), (20.0 + q[0], q[1])):
        fr = synthesize_frames(FrameSynthesisConfig(seed=4), make_wavefunction(K), 500000)
        peaks.append(g2_map_sum_coordinates(fr, cell=3.0).peak(10)[0])
    shift = peaks[1] - peaks[0]
    assert np.all(np.abs(shift - np.array(q)) <= 3.0)

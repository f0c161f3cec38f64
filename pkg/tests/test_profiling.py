import numpy as np

from optsync import rng
from optsync.clocks import ClockState, PortModel, uppm
from optsync.profiling import (
    DelayProfile,
    DriftProfile,
    ReprofileSession,
    _int_median,
    drift_samples_to_slice,
    profile_delay,
    profile_drift,
    reprofile_on_trigger,
)

NS = 1000
US = 1_000_000
MS = 10**9
U = 300 * US


def clock(tor, median_ppm=0.0, var_ppm=0.0, seed=3, interval=U):
    return ClockState(
        tor_id=tor,
        drift_median_uppm=uppm(median_ppm),
        drift_variance_uppm=uppm(var_ppm),
        interval_ps=interval,
        seed_key=rng.stream_key(seed, rng.TAG_DRIFT, tor),
    )


def port(tor, ocs=0, tx=0, rx=0, seed=3):
    return PortModel(
        tor_id=tor, port_index=ocs, tx_error_ps=tx, rx_noise_ps=rx,
        resolution_ps=1000, rx_key=rng.stream_key(seed, rng.TAG_RX, tor, ocs),
    )


def test_drift_profile_ideal_two_ppm():
    # +2 ppm at a 1 ms slice is 2 ns per slice
    child = clock(1, median_ppm=2.0, interval=MS)
    master = clock(0, interval=MS)
    d, samples = profile_drift(
        child, master, port(1), port(0), flight_ps=15_000,
        n=50, interval_ps=8 * MS, slice_duration_ps=MS, start_ps=0,
    )
    assert abs(d - 2_000) <= 150
    assert len(samples) == 50


def test_drift_profile_statistical():
    # median robust to 12 ppm per-interval deviations
    child = clock(2, median_ppm=5.0, var_ppm=12.0, interval=MS)
    master = clock(0, interval=MS)
    d, _ = profile_drift(
        child, master, port(2, rx=2000), port(0), flight_ps=15_000,
        n=100, interval_ps=8 * MS, slice_duration_ps=MS, start_ps=0,
    )
    assert abs(d - 5_000) <= 1_000  # within 1 ns per ms


def test_drift_profile_master_self_zero():
    master = clock(0, interval=MS)
    probe = clock(0, interval=MS)
    d, _ = profile_drift(
        probe, master, port(0), port(0, ocs=1), flight_ps=15_000,
        n=20, interval_ps=8 * MS, slice_duration_ps=MS, start_ps=0,
    )
    assert d == 0


def test_drift_samples_rescaling():
    offsets = [0, 16_000, 32_000, 48_000]
    samples = drift_samples_to_slice(offsets, interval_ps=16 * MS, slice_duration_ps=MS)
    assert samples == [1000, 1000, 1000]


def test_delay_profile_three_meter_fiber():
    a, b = clock(0), clock(1)
    d, _ = profile_delay(
        a, b, port(0), port(1), flight_ps=15_000, n=10,
        spacing_ps=10 * US, start_ps=0,
    )
    assert d == 15_000


def test_delay_profile_keeps_tx_bias():
    a, b = clock(0), clock(1)
    d, _ = profile_delay(
        a, b, port(0, tx=10_000), port(1, tx=4_000), flight_ps=100_000,
        n=10, spacing_ps=10 * US, start_ps=0,
    )
    assert d == 107_000


def test_delay_profile_rx_noise_median():
    a, b = clock(0), clock(1)
    d, _ = profile_delay(
        a, b, port(0, rx=2000), port(1, rx=2000), flight_ps=50_000,
        n=100, spacing_ps=10 * US, start_ps=0,
    )
    assert abs(d - 50_000) <= 1_000


def test_median_outlier_robustness():
    # fewer than n/2 arbitrary outliers cannot move the median outside the
    # clean samples' range
    clean = list(range(100, 201))
    outliers = [10**9] * 49
    med = _int_median(clean + outliers)
    assert 100 <= med <= 200
    med = _int_median(clean + [-(10**9)] * 49)
    assert 100 <= med <= 200


def test_profile_matches_scalar_protocol_path():
    """Dual route: the vectorized profiler must agree with per-exchange
    scalar timestamping."""
    child = clock(4, median_ppm=3.0, var_ppm=6.0)
    master = clock(0)
    cport, mport = port(4, rx=2000), port(0)
    flight, n, interval = 95_000, 12, 2 * U
    d_vec, samples_vec = profile_drift(
        child, master, cport, mport, flight, n, interval, U, start_ps=0,
    )
    child2 = clock(4, median_ppm=3.0, var_ppm=6.0)
    master2 = clock(0)
    cport2, mport2 = port(4, rx=2000), port(0)
    offsets = []
    for k in range(n + 1):
        t = k * interval
        t1p = mport2.take_tx_timestamp(master2, t)
        t1c = cport2.take_rx_timestamp(child2, t + flight)
        offsets.append(t1c - flight - t1p)
    samples_scalar = drift_samples_to_slice(offsets, interval, U)
    assert samples_scalar == samples_vec


def test_reprofile_session_decontaminates_corrections():
    sess = ReprofileSession(tor=3, n=4, cycle_duration_ps=16 * U, slice_duration_ps=U)
    # true drift: 32 ns per cycle = 2 ns per slice; syncs keep resetting the
    # measured offset, the session adds the applied corrections back
    offset = 0
    for _ in range(5):
        offset += 32_000
        done = sess.add_offset(offset % 7_000)  # arbitrary post-sync remainder
        sess.note_correction(0)
    # emulate again, properly: offsets observed after corrections
    sess = ReprofileSession(tor=3, n=4, cycle_duration_ps=16 * U, slice_duration_ps=U)
    observed = 0
    done = sess.add_offset(observed)
    for _ in range(4):
        drifted = observed + 32_000
        applied = drifted - 1_000  # sync pulls it back to ~1 us of target
        sess.note_correction(applied)
        observed = drifted - applied
        done = sess.add_offset(observed)
    assert done
    assert sess.result() == 2_000


def test_reprofile_trigger_threshold():
    class Trig:
        tor_id = 5
        delta_c = 3.0

    assert reprofile_on_trigger(Trig(), lambda tor: "open", threshold_c=5.0) is None
    Trig.delta_c = 6.0
    assert reprofile_on_trigger(Trig(), lambda tor: "open", threshold_c=5.0) == "open"
    assert reprofile_on_trigger(None, lambda tor: "open") is None


def test_profile_serialization():
    dp = DriftProfile(U)
    dp.set(0, 0, 10)
    dp.set(3, -2500, 10)
    text = dp.serialize()
    back = DriftProfile.parse(text, U)
    assert back.d_ps == {0: 0, 3: -2500}

    delays = DelayProfile()
    delays.set(1, 0, 2, 15_000, 5)
    assert delays.has(0, 1, 2)
    assert delays.delay_ps(0, 1, 2) == 15_000
    assert "0:2 1:2 15000" in delays.serialize()

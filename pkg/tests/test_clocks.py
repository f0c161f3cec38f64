import numpy as np
import pytest

from optsync import rng
from optsync.clocks import (
    ClockArray,
    ClockState,
    PortModel,
    div_round_half_away,
    quantize,
    uppm,
)

PS_PER_MS = 10**9
PS_PER_S = 10**12


def make_clock(tor=1, median_ppm=0.0, variance_ppm=0.0, interval_ps=PS_PER_MS, seed=7, **kw):
    return ClockState(
        tor_id=tor,
        drift_median_uppm=uppm(median_ppm),
        drift_variance_uppm=uppm(variance_ppm),
        interval_ps=interval_ps,
        seed_key=rng.stream_key(seed, rng.TAG_DRIFT, tor),
        **kw,
    )


def test_div_round_half_away():
    assert div_round_half_away(7, 2) == 4
    assert div_round_half_away(-7, 2) == -4
    assert div_round_half_away(6, 2) == 3
    assert div_round_half_away(5, 3) == 2
    assert div_round_half_away(-5, 3) == -2


def test_quantize():
    assert quantize(5000, 1000) == 5000
    assert quantize(5400, 1000) == 5000
    assert quantize(5500, 1000) == 6000
    assert quantize(-5500, 1000) == -6000
    assert quantize(12345, 1) == 12345


def test_identity_clock():
    clk = make_clock()
    assert clk.local_time(10**9) == 10**9


def test_linear_drift_one_second():
    # 1 ppm drifts 1 ns per ms; +2 ppm over 1 s is +2 us
    clk = make_clock(median_ppm=2.0)
    assert clk.local_time(PS_PER_S) == PS_PER_S + 2 * 10**6


def test_drift_linearity_exact_within_one_quantum():
    clk = make_clock(median_ppm=-3.7)
    for t in [1, 999, PS_PER_MS, 123456789101, PS_PER_S]:
        expect = t * uppm(-3.7) / 1e12
        assert abs((clk.local_time(t) - t) - expect) <= 1


def test_noise_stream_replay_oracle():
    # independent re-implementation of the documented drift recurrence
    median, var, interval, seed, tor = 5.0, 3.0, PS_PER_MS, 99, 3
    clk = make_clock(tor=tor, median_ppm=median, variance_ppm=var, interval_ps=interval, seed=seed)
    key = rng.stream_key(seed, rng.TAG_DRIFT, tor)

    def oracle_local(t):
        k, rem = divmod(t, interval)
        num = 0
        for j in range(k):
            num += interval * (uppm(median) + rng.uniform(key, j, uppm(var)))
        num += rem * (uppm(median) + rng.uniform(key, k, uppm(var)))
        q, r = divmod(num, 10**12)
        return t + q + (1 if 2 * r >= 10**12 else 0)

    for t in [0, 1, interval - 1, interval, 5 * interval + 12345, 50 * interval]:
        assert clk.local_time(t) == oracle_local(t)


def test_determinism_across_instances():
    a = make_clock(median_ppm=1.5, variance_ppm=12.0, seed=5)
    b = make_clock(median_ppm=1.5, variance_ppm=12.0, seed=5)
    ts = [3 * PS_PER_MS + 17, 10 * PS_PER_MS, 123]
    assert [a.local_time(t) for t in ts] == [b.local_time(t) for t in ts]


def test_backwards_reads_replay_exactly():
    clk = make_clock(median_ppm=2.0, variance_ppm=8.0)
    early = clk.local_time(2 * PS_PER_MS + 5)
    _ = clk.local_time(40 * PS_PER_MS)
    assert clk.local_time(2 * PS_PER_MS + 5) == early


def test_apply_offset():
    clk = make_clock()
    clk.apply_offset(0)
    assert clk.offset_correction_ps == 0
    clk.apply_offset(100_000)  # clock read 100 ns ahead of parent
    assert clk.local_time(0) == -100_000
    clk.apply_offset(-40_000)
    assert clk.offset_correction_ps == -60_000


def test_offset_alignment_with_parent():
    parent = make_clock(tor=0)
    child = make_clock(tor=2)
    child.offset_correction_ps = 100_000
    t = 5 * PS_PER_MS
    measured = child.local_time(t) - parent.local_time(t)
    child.apply_offset(measured)
    assert child.local_time(t) == parent.local_time(t)


def test_set_temperature_shift_and_trigger():
    clk = make_clock(median_ppm=1.0)
    clk.temp_coeff_uppm_per_c = uppm(1.0)
    assert clk.set_temperature(25.0) is None  # no change
    assert clk.drift_median_uppm == uppm(1.0)
    trig = clk.set_temperature(30.0)  # +5 C at 1 ppm/C
    assert trig is not None and trig.tor_id == clk.tor_id
    assert clk.drift_median_uppm == uppm(6.0)
    assert clk.set_temperature(33.0) is None  # +3 C below threshold
    assert clk.drift_median_uppm == uppm(9.0)


def test_master_error_is_zero():
    master = make_clock(tor=0, median_ppm=0.0, variance_ppm=0.0)
    for t in [0, PS_PER_MS, 7 * PS_PER_S]:
        assert master.local_time(t) - t == 0


def test_profiled_median_recoverability():
    # empirical median of per-interval drift converges to the median rate
    clk = make_clock(median_ppm=5.0, variance_ppm=12.0, seed=11)
    samples = []
    prev = clk.local_time(0)
    for k in range(1, 101):
        cur = clk.local_time(k * PS_PER_MS)
        samples.append(cur - prev - PS_PER_MS)
        prev = cur
    samples.sort()
    med = samples[50]
    assert abs(med - 5_000) <= 1_000  # within 1 ns per 1 ms interval


def test_tx_rx_timestamps():
    clk = make_clock(tor=4)
    port = PortModel(tor_id=4, port_index=0, resolution_ps=1000)
    assert port.take_tx_timestamp(clk, 5000) == 5000
    port.tx_error_ps = 38_000
    # the written stamp is taken before the actual departure, so it lags
    assert port.take_tx_timestamp(clk, 0) == -38_000
    drifty = make_clock(tor=4, median_ppm=2.0)
    port.tx_error_ps = 10_000
    # 1 ms at +2 ppm is +2 ns, minus the 10 ns TX bias
    assert port.take_tx_timestamp(drifty, PS_PER_MS) == PS_PER_MS + 2_000 - 10_000


def test_tx_port_ownership_checked():
    clk = make_clock(tor=4)
    port = PortModel(tor_id=5, port_index=0)
    with pytest.raises(ValueError):
        port.take_tx_timestamp(clk, 0)


def test_rx_noise_bounds_and_median():
    clk = make_clock(tor=4)
    port = PortModel(
        tor_id=4, port_index=0, rx_noise_ps=2000, resolution_ps=1000,
        rx_key=rng.stream_key(1, rng.TAG_RX, 4, 0),
    )
    t = 7_000
    vals = [port.take_rx_timestamp(clk, t) for _ in range(10_000)]
    assert all(t - 2000 <= v <= t + 2000 for v in vals)
    vals.sort()
    assert abs(vals[5000] - t) <= 500


def test_rx_zero_noise_identity():
    clk = make_clock(tor=4)
    port = PortModel(tor_id=4, port_index=0, rx_noise_ps=0, resolution_ps=1000)
    assert port.take_rx_timestamp(clk, 7000) == 7000


def test_drift_window_matches_scalar():
    clk = make_clock(median_ppm=3.3, variance_ppm=9.0, seed=21)
    ref = make_clock(median_ppm=3.3, variance_ppm=9.0, seed=21)
    win = clk.drift_window(3 * PS_PER_MS + 777, 40, 250_000_000)
    for j in range(40):
        t = 3 * PS_PER_MS + 777 + j * 250_000_000
        assert int(win[j]) == ref.drift_ps(t)


def test_clock_array_matches_scalar():
    clocks = [
        make_clock(tor=i, median_ppm=(i - 2) * 1.7, variance_ppm=6.0, seed=13)
        for i in range(5)
    ]
    refs = [
        make_clock(tor=i, median_ppm=(i - 2) * 1.7, variance_ppm=6.0, seed=13)
        for i in range(5)
    ]
    arr = ClockArray(clocks)
    interval = arr.interval_ps
    for k in range(4):
        t_mid = k * interval + interval // 3
        for i in range(5):
            assert arr.local_time(i, t_mid) == refs[i].local_time(t_mid)
        errs = None
        arr.advance_interval()
        errs = arr.boundary_error()
        t_b = (k + 1) * interval
        for i in range(5):
            assert int(errs[i]) == refs[i].local_time(t_b) - t_b


def test_clock_array_apply_offset():
    clocks = [make_clock(tor=i) for i in range(3)]
    arr = ClockArray(clocks)
    arr.apply_offset(1, 5000)
    assert arr.local_time(1, 100) == 100 - 5000

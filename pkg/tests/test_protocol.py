import pytest

from optsync import rng
from optsync.clocks import ClockState, PortModel
from optsync.errors import MalformedExchange, NoReference
from optsync.profiling import DelayProfile
from optsync.protocol import (
    DEFER_WAIT_CYCLE,
    SINGLE,
    TRIPLE,
    CorrectionTable,
    ExchangeEnv,
    OffsetFilter,
    SyncExchange,
    compute_delay,
    compute_offset,
    derive_correction,
    dump_exchange,
    run_single_message,
    run_triple_message,
)

NS = 1000
US = 1_000_000


class FlatCabling:
    """Stand-in cabling plan with explicit per-pair lengths (meters)."""

    def __init__(self, lengths):
        self.lengths = lengths

    def length_m(self, a, b, ocs):
        lo, hi = (a, b) if a < b else (b, a)
        return self.lengths[(lo, hi)]


def ideal_clock(tor):
    return ClockState(tor_id=tor)


def port(tor, ocs=0, tx=0, rx=0, res=1000, seed=1):
    return PortModel(
        tor_id=tor, port_index=ocs, tx_error_ps=tx, rx_noise_ps=rx,
        resolution_ps=res, rx_key=rng.stream_key(seed, rng.TAG_RX, tor, ocs),
    )


def test_compute_delay_symmetric_path():
    x = SyncExchange(t1_parent=0, t1_child=100, t2_child=110, t2_parent=210)
    assert compute_delay(x) == 100


def test_compute_delay_requires_all_stamps():
    x = SyncExchange(t1_parent=0, t1_child=100, mode=SINGLE)
    with pytest.raises(MalformedExchange):
        compute_delay(x)


def exchange_from_ground_truth(true_delay, true_offset, e_parent, e_child, turnaround=2 * US):
    """Build measured stamps from ground truth; parent clock = true time,
    child clock = true time + offset; TX stamps lead the departure by e."""
    t1 = 1_000_000
    t1_parent = t1 - e_parent
    t1_child = t1 + true_delay + true_offset
    t2 = t1 + true_delay + turnaround
    t2_child = t2 + true_offset - e_child
    t2_parent = t2 + true_delay
    return SyncExchange(t1_parent, t1_child, t2_child, t2_parent)


def test_delay_and_offset_bias_identities():
    # measured delay = true + (e_a + e_b)/2; measured offset = true + (e_a - e_b)/2
    key = rng.stream_key(2024)
    for case in range(300):
        e_a = rng.uniform(key, 4 * case, 20_000) * 2
        e_b = rng.uniform(key, 4 * case + 1, 20_000) * 2
        d = 15_000 + rng.raw(key, 4 * case + 2) % 1_500_000
        o = rng.uniform(key, 4 * case + 3, 10_000_000)
        x = exchange_from_ground_truth(d, o, e_a, e_b)
        delay = compute_delay(x)
        assert delay == d + (e_a + e_b) // 2
        offset = compute_offset(x, delay)
        assert offset == o + (e_a - e_b) // 2
        # applying the pair correction recovers the true offset exactly
        assert compute_offset(x, delay, correction_ps=(e_a - e_b) // 2) == o


def test_offset_example_values():
    x = exchange_from_ground_truth(100_000, 0, 10_000, 4_000)
    delay = compute_delay(x)
    assert delay == 107_000
    assert compute_offset(x, delay) == 3_000
    assert compute_offset(x, delay, correction_ps=3_000) == 0


def test_offset_closed_loop():
    # child 100 ns behind its parent: corrected offset is -100 ns and
    # applying it zeroes the error
    parent = ideal_clock(0)
    child = ideal_clock(1)
    child.offset_correction_ps = -100_000
    env = ExchangeEnv(parent, child, port(0), port(1), cable_delay_ps=15_000)
    x = run_triple_message(env, now_ps=10 * US)
    off = compute_offset(x, compute_delay(x))
    assert off == -100_000
    child.apply_offset(off)
    assert child.local_time(20 * US) == parent.local_time(20 * US)


def build_delay_profile(tx_errors, lengths, tors, ocs=0):
    """Noise-free profiled delays for every pair: true + (e_a + e_b)/2."""
    prof = DelayProfile()
    for i, a in enumerate(tors):
        for b in tors[i + 1:]:
            true = lengths[(min(a, b), max(a, b))] * 5000
            prof.set(a, b, ocs, true + (tx_errors[a] + tx_errors[b]) // 2, 1)
    return prof


def test_derive_correction_equal_lengths():
    # equal cable lengths: any reference cancels, delta = (e_a - e_b)/2
    tors = [0, 1, 2, 3]
    tx = {0: 10_000, 1: 4_000, 2: -26_000, 3: 14_000}
    lengths = {(a, b): 50 for a in tors for b in tors if a < b}
    prof = build_delay_profile(tx, lengths, tors)
    cab = FlatCabling(lengths)
    for c_pool in ([2], [3], [2, 3]):
        entry = derive_correction(prof, cab, 0, 1, 0, candidates=c_pool)
        assert entry.delta_ps == 3_000


def test_derive_correction_unequal_lengths():
    # l_ac = 10 m, l_bc = 4 m, zero TX errors: the length residual cancels
    tors = [0, 1, 2]
    tx = {0: 0, 1: 0, 2: 0}
    lengths = {(0, 2): 10, (1, 2): 4, (0, 1): 7}
    prof = build_delay_profile(tx, lengths, tors)
    entry = derive_correction(prof, FlatCabling(lengths), 0, 1, 0, candidates=[2])
    assert entry.delta_ps == 0
    assert entry.length_residual_m == 6


def test_derive_correction_no_reference():
    prof = DelayProfile()
    with pytest.raises(NoReference):
        derive_correction(prof, FlatCabling({}), 0, 1, 0, candidates=[])


def test_correction_table_antisymmetry_and_cycle_sum():
    key = rng.stream_key(7)
    tors = list(range(6))
    tx = {i: rng.uniform(key, i, 20_000) * 2 for i in tors}
    lengths = {}
    for i in tors:
        for j in tors:
            if i < j:
                lengths[(i, j)] = 3 + rng.raw(key, 100 + 17 * i + j) % 298
    prof = build_delay_profile(tx, lengths, tors)
    cab = FlatCabling(lengths)
    table = CorrectionTable()
    for i in tors:
        for j in tors:
            if i < j:
                entry = derive_correction(prof, cab, i, j, 0, candidates=tors)
                table.put(i, j, 0, entry)
    for i in tors:
        for j in tors:
            if i != j:
                assert table.delta(i, j, 0) == -table.delta(j, i, 0)
    for a, b, c in [(0, 1, 2), (1, 3, 5), (2, 4, 0)]:
        s = table.delta(a, b, 0) + table.delta(b, c, 0) + table.delta(c, a, 0)
        assert s == 0


def test_triple_message_timing_fits_slice():
    # 3 m fiber and two 1 us turnarounds: ~2.07 us, fits a 10 us slice
    parent, child = ideal_clock(0), ideal_clock(1)
    env = ExchangeEnv(
        parent, child, port(0), port(1), cable_delay_ps=15_000,
        slice_duration_ps=10 * US, slice_end_ps=10 * US,
    )
    x = run_triple_message(env, now_ps=0)
    assert x.deferred_legs == 0
    assert x.completed_at == 3 * (15_000 + 8_000) + 2 * US


def test_triple_message_defers_and_inflates_delay_error():
    parent, child = ideal_clock(0), ideal_clock(1)
    env = ExchangeEnv(
        parent, child, port(0), port(1), cable_delay_ps=15_000,
        slice_duration_ps=1 * US, slice_end_ps=1 * US,
    )
    x = run_triple_message(env, now_ps=0)
    assert x.deferred_legs >= 1
    err = compute_delay(x) - (15_000 + 8_000)
    assert 10_000 <= abs(err) <= 100_000  # tens of ns from path asymmetry


def test_triple_message_unbounded_window_equivalent():
    parent, child = ideal_clock(0), ideal_clock(1)
    env_open = ExchangeEnv(parent, child, port(0), port(1), cable_delay_ps=15_000)
    a = run_triple_message(env_open, now_ps=0)
    env_wide = ExchangeEnv(
        parent, child, port(0), port(1), cable_delay_ps=15_000,
        slice_duration_ps=300 * US, slice_end_ps=300 * US,
    )
    b = run_triple_message(env_wide, now_ps=0)
    assert (a.t1_parent, a.t1_child, a.t2_child, a.t2_parent) == (
        b.t1_parent, b.t1_child, b.t2_child, b.t2_parent
    )


def test_wait_cycle_policy_defers_to_next_cycle():
    parent, child = ideal_clock(0), ideal_clock(1)
    env = ExchangeEnv(
        parent, child, port(0), port(1), cable_delay_ps=15_000,
        slice_duration_ps=1 * US, slice_end_ps=1 * US,
        cycle_duration_ps=16 * US, defer_policy=DEFER_WAIT_CYCLE,
    )
    x = run_triple_message(env, now_ps=0)
    assert x.deferred_legs >= 1
    assert x.completed_at > 16 * US


def test_single_message_fits_one_microsecond_slice():
    parent, child = ideal_clock(0), ideal_clock(1)
    env = ExchangeEnv(
        parent, child, port(0), port(1), cable_delay_ps=15_000,
        slice_duration_ps=1 * US, slice_end_ps=1 * US,
    )
    x = run_single_message(env, now_ps=0)
    assert x.deferred_legs == 0
    assert x.completed_at == 15_000 + 8_000


def test_single_equals_triple_when_noiseless():
    parent = ideal_clock(0)
    child = ideal_clock(1)
    child.offset_correction_ps = 42_000
    pp, cp = port(0, tx=6_000), port(1, tx=2_000)
    env = ExchangeEnv(parent, child, pp, cp, cable_delay_ps=25_000)
    x3 = run_triple_message(env, now_ps=0)
    measured = compute_delay(x3)
    o3 = compute_offset(x3, measured)
    x1 = run_single_message(env, now_ps=50 * US)
    o1 = compute_offset(x1, measured)
    assert o1 == o3


def test_offset_filter():
    f = OffsetFilter(window_len=4, margin_ps=28_000)
    assert f.offer(100)  # empty window accepts
    assert f.offer(f.mean())  # candidate at the mean accepts
    assert not f.offer(500_000)  # jumbo-frame corrupted offset rejected
    assert f.window == [100, 100]
    for v in [1000, -1000, 2000]:
        f.offer(v)
    assert len(f.window) == 4  # sliding window caps


def test_filter_safety_bound():
    key = rng.stream_key(55)
    f = OffsetFilter(window_len=8, margin_ps=10_000)
    for c in range(500):
        cand = rng.uniform(key, c, 40_000)
        mean_before = f.mean()
        had_window = bool(f.window)
        if f.offer(cand) and had_window:
            assert abs(cand - mean_before) <= 10_000


def test_dump_exchange_format():
    x = SyncExchange(1, 2, 3, 4, mode=TRIPLE, parent_tor=0, child_tor=5, ocs=2)
    line = dump_exchange(x)
    assert "0>5@2" in line and line.startswith("triple")

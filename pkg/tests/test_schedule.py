import pytest

from optsync.errors import ConfigError
from optsync.schedule import (
    CablingPlan,
    CircuitStateOverlay,
    OpticalSchedule,
    build_profiling_schedule,
    build_rotor_schedule,
    build_static_random_graph,
    connectivity,
    round_robin_matchings,
)

U = 300_000_000  # 300 us


def test_round_robin_covers_all_pairs_once():
    for n in [2, 5, 8, 17]:
        rounds = round_robin_matchings(n)
        pairs = [p for rnd in rounds for p in rnd]
        assert len(pairs) == len(set(pairs)) == n * (n - 1) // 2


def test_rotor_8x2_meets_two_peers_per_slice():
    sched = build_rotor_schedule(8, 2, U)
    assert sched.slices_per_cycle == 4
    tbl = sched.partner_table()
    for s in range(4):
        for tor in range(8):
            peers = {int(tbl[s, k, tor]) for k in range(2)} - {-1}
            assert len(peers) == 2


def test_rotor_two_tors_single_link():
    sched = build_rotor_schedule(2, 1, U)
    assert sched.slices_per_cycle == 1
    assert sched.pairs_in_slice(0) == [(0, 1, 0)]
    assert sched.pairs_in_slice(7) == [(0, 1, 0)]


def test_rotor_full_scale_pair_coverage():
    sched = build_rotor_schedule(192, 12, U)
    assert sched.slices_per_cycle == 16
    # brute-force audit over one cycle
    seen = set()
    for s in range(sched.slices_per_cycle):
        for a, b, _ in sched.pairs_in_slice(s):
            seen.add((a, b))
    assert len(seen) == 192 * 191 // 2


def test_rotor_rejects_bad_configs():
    with pytest.raises(ConfigError):
        build_rotor_schedule(8, 8, U)
    with pytest.raises(ConfigError):
        build_rotor_schedule(1, 1, U)


def test_cycle_periodicity():
    sched = build_rotor_schedule(10, 3, U)
    spc = sched.slices_per_cycle
    assert sched.pairs_in_slice(2) == sched.pairs_in_slice(2 + spc)
    assert sched.pairs_in_slice(2) == sched.pairs_in_slice(2 + 5 * spc)


def test_profiling_schedule_shapes():
    prof = build_profiling_schedule(2, uplinks=1, slice_duration_ps=U)
    assert len(prof.master_dwells) == 1
    prof8 = build_profiling_schedule(8, uplinks=2, slice_duration_ps=U)
    assert len(prof8.master_dwells) == 7  # one dwell per non-master ToR
    # every port pair connected at least once across the delay rounds
    covered = set()
    sched = prof8.schedule
    for start in prof8.delay_rounds:
        for a, b, k in sched.pairs_in_slice(start):
            covered.add((a, b, k))
    for k in range(2):
        for a in range(8):
            for b in range(a + 1, 8):
                assert (a, b, k) in covered


def test_static_graph_two_tors_forced_link():
    g = build_static_random_graph(2, 1, seed=3)
    assert g.pairs_in_slice(0) == [(0, 1, 0)]


def test_static_graph_connected_and_seeded():
    g1 = build_static_random_graph(192, 12, seed=9)
    g2 = build_static_random_graph(192, 12, seed=9)
    assert g1.matchings == g2.matchings
    # independent traversal oracle
    adj = {i: set() for i in range(192)}
    for a, b, _ in g1.pairs_in_slice(0):
        adj[a].add(b)
        adj[b].add(a)
    seen, frontier = {0}, [0]
    while frontier:
        v = frontier.pop()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                frontier.append(w)
    assert len(seen) == 192


def test_static_graph_retry_exhaustion():
    # a single matching on 4 ToRs is two disjoint edges, never connected
    with pytest.raises(ConfigError):
        build_static_random_graph(4, 1, seed=1, max_retries=8)


def test_connectivity_overlay():
    sched = build_rotor_schedule(8, 2, U)
    raw = sched.pairs_in_slice(1)
    assert connectivity(sched, None, 1) == raw
    assert connectivity(sched, CircuitStateOverlay(), 1) == raw

    ov = CircuitStateOverlay(failed_tors={3})
    live = connectivity(sched, ov, 1)
    assert all(3 not in (a, b) for a, b, _ in live)

    ov = CircuitStateOverlay(failed_ocses={1})
    for s in range(4):
        live = connectivity(sched, ov, s)
        dead = set(sched.pairs_in_slice(s)) - set(live)
        # one failed link per ToR: every removed circuit sits on OCS 1
        assert all(k == 1 for _, _, k in dead)
        lost: dict[int, int] = {}
        for a, b, _ in dead:
            lost[a] = lost.get(a, 0) + 1
            lost[b] = lost.get(b, 0) + 1
        assert all(v == 1 for v in lost.values())


def test_schedule_serialization_roundtrip():
    sched = build_rotor_schedule(8, 2, U)
    text = sched.serialize()
    back = OpticalSchedule.parse(text, slice_duration_ps=U)
    assert back.matchings == sched.matchings
    assert back.num_tors == 8 and back.uplinks == 2


def test_cabling_symmetric_exact():
    cab = CablingPlan(seed=5)
    for a, b, k in [(0, 1, 0), (5, 2, 3), (100, 7, 11)]:
        assert cab.length_m(a, b, k) == cab.length_m(b, a, k)
        assert 3 <= cab.length_m(a, b, k) <= 300
        assert cab.delay_ps(a, b, k) == cab.length_m(a, b, k) * 5000


def test_cabling_fixed_length():
    cab = CablingPlan(seed=5, fixed_m=3)
    assert cab.delay_ps(4, 9, 2) == 15_000

"""Shared fixtures: the 8-ToR walkthrough schedule and small helpers."""

import numpy as np
import pytest

from optsync.profiling import DriftProfile
from optsync.schedule import OpticalSchedule

U_300 = 300_000_000

# Hand-built 8-ToR, 2-uplink, 4-slice cycle exercising the canonical
# tree-evolution story: the master syncs 1 and 7 in slice 0; 1 syncs 3 in
# slice 1; 2 picks 1 over 3 in slice 2; 5 sits out slice 2; 6 then 4 pick
# up 2 in slices 3 and 4 (wrap).
WALKTHROUGH_MATCHINGS = [
    [[(0, 1), (2, 4), (3, 5), (6, 7)], [(0, 7), (1, 2), (3, 6), (4, 5)]],
    [[(0, 5), (1, 3), (2, 6), (4, 7)], [(0, 4), (2, 5), (1, 7), (3, 6)]],
    [[(1, 2), (0, 6), (3, 7), (4, 5)], [(2, 3), (0, 4), (5, 6), (1, 7)]],
    [[(2, 6), (0, 3), (1, 5), (4, 7)], [(2, 7), (0, 5), (1, 6), (3, 4)]],
]

# per-slice drift magnitudes (abstract units = ps here)
WALKTHROUGH_DRIFTS = [0, 2, 2, 2, 1, 1, 1, 1]


@pytest.fixture
def walkthrough_schedule() -> OpticalSchedule:
    sched = OpticalSchedule(8, 2, U_300, [list(s) for s in WALKTHROUGH_MATCHINGS])
    sched.validate(require_full_coverage=False)
    return sched


@pytest.fixture
def walkthrough_drifts() -> DriftProfile:
    prof = DriftProfile(U_300)
    for tor, d in enumerate(WALKTHROUGH_DRIFTS):
        prof.set(tor, d, 1)
    return prof


def straight_line_plan(num_tors, peers_by_slice, drift_abs, total_slices):
    """Independent, literal re-statement of the batch planning loop, used as
    the oracle for the vectorized planner.  peers_by_slice[t][i] is the list
    of ToRs i connects to in slice t (cyclic)."""
    inf = float("inf")
    e = {i: (0 if i == 0 else inf) for i in range(num_tors)}
    plan = []
    trace = []
    spc = len(peers_by_slice)
    for t in range(total_slices):
        trace.append(dict(e))
        nxt = {}
        for i in range(num_tors):
            if i == 0:
                nxt[0] = 0
                continue
            peers = peers_by_slice[t % spc][i]
            r = None
            for j in sorted(peers):
                if r is None or e[j] < e[r]:
                    r = j
            if r is not None and (e[r] < e[i] or r == 0):
                plan.append((t, r, i))
                nxt[i] = e[r] + drift_abs[i]
            else:
                nxt[i] = e[i] + drift_abs[i] if e[i] != inf else inf
        e = nxt
    trace.append(dict(e))
    return plan, trace

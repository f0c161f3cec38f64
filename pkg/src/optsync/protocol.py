"""Sync message exchanges and timestamp math.

The base operation is the classic three-message exchange between a parent A
and child B: A sends its TX stamp T1_A; B records RX stamp T1_B and replies
(TX stamp T2_B); A records RX stamp T2_A and returns it.  From the four
stamps the child computes

    delay  = ((T2_A - T1_A) - (T2_B - T1_B)) / 2
    offset = T1_B - delay - T1_A

Single-message mode keeps only the first message and substitutes a profiled
delay.  Because TX stamps carry per-port biases e, a measured delay reads
high by (e_a + e_b)/2 and a measured offset by (e_a - e_b)/2; the latter is
the pair correction delta, recovered from profiled delays through a
reference ToR and subtracted at sync time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .clocks import ClockState, PortModel, div_round_half_away
from .errors import ExchangeAbandoned, MalformedExchange, MissingProfile, NoReference
from .schedule import PROPAGATION_PS_PER_M

TRIPLE = "triple"
SINGLE = "single"


@dataclass
class SyncExchange:
    """Measured timestamps of one exchange, with port provenance."""

    t1_parent: int
    t1_child: int
    t2_child: int | None = None
    t2_parent: int | None = None
    mode: str = TRIPLE
    parent_tor: int = -1
    child_tor: int = -1
    ocs: int = -1
    completed_at: int = 0
    deferred_legs: int = 0


def compute_delay(x: SyncExchange) -> int:
    """Measured one-way delay from a triple exchange, ps (round half away)."""
    if x.mode != TRIPLE or x.t2_child is None or x.t2_parent is None:
        raise MalformedExchange("delay needs all four timestamps")
    return div_round_half_away((x.t2_parent - x.t1_parent) - (x.t2_child - x.t1_child), 2)


def compute_offset(x: SyncExchange, delay_ps: int, correction_ps: int = 0) -> int:
    """Measured child-minus-parent clock offset, ps.

    delay_ps is live-measured in triple mode or profiled in single mode;
    correction_ps is the pair's stored delta (0 when uncorrected).
    """
    return x.t1_child - delay_ps - x.t1_parent - correction_ps


@dataclass
class CorrectionEntry:
    delta_ps: int
    reference_tor: int
    length_residual_m: int  # l_ac - l_bc fed into the general-case formula


class CorrectionTable:
    """Per ordered (tor_a, tor_b, ocs) TX-bias deltas.

    Antisymmetric by construction: delta(a, b) = -delta(b, a), delta(a, a) = 0.
    """

    def __init__(self):
        self._entries: dict[tuple[int, int, int], CorrectionEntry] = {}

    def put(self, a: int, b: int, ocs: int, entry: CorrectionEntry) -> None:
        self._entries[(a, b, ocs)] = entry
        self._entries[(b, a, ocs)] = CorrectionEntry(
            -entry.delta_ps, entry.reference_tor, -entry.length_residual_m
        )

    def delta(self, a: int, b: int, ocs: int) -> int:
        if a == b:
            return 0
        e = self._entries.get((a, b, ocs))
        if e is None:
            raise MissingProfile(f"no correction for pair {a}-{b} on OCS {ocs}")
        return e.delta_ps

    def get(self, a: int, b: int, ocs: int) -> CorrectionEntry | None:
        return self._entries.get((a, b, ocs))

    def delta_or_zero(self, a: int, b: int, ocs: int) -> int:
        e = self._entries.get((a, b, ocs))
        return e.delta_ps if e is not None else 0

    def __len__(self) -> int:
        return len(self._entries)


def derive_correction(
    delay_profile,
    cabling,
    a: int,
    b: int,
    ocs: int,
    candidates: list[int],
) -> CorrectionEntry:
    """Pair delta from profiled delays through a reference ToR C.

    With equal cable lengths the profiled delays difference is the delta
    directly; otherwise the known length difference (5 ns/m) is subtracted.
    The reference is picked to minimize |l_ac - l_bc| (lowest id on ties).
    """
    refs = [c for c in candidates if c != a and c != b]
    if not refs:
        raise NoReference(f"no reference ToR for pair {a}-{b}")
    best = None
    for c in refs:
        if delay_profile.has(a, c, ocs) and delay_profile.has(b, c, ocs):
            resid = abs(cabling.length_m(a, c, ocs) - cabling.length_m(b, c, ocs))
            if best is None or resid < best[0]:
                best = (resid, c)
    if best is None:
        raise NoReference(f"no profiled reference delays for pair {a}-{b} on OCS {ocs}")
    c = best[1]
    l_ac = cabling.length_m(a, c, ocs)
    l_bc = cabling.length_m(b, c, ocs)
    delta = (
        delay_profile.delay_ps(a, c, ocs)
        - delay_profile.delay_ps(b, c, ocs)
        - PROPAGATION_PS_PER_M * (l_ac - l_bc)
    )
    return CorrectionEntry(delta, c, l_ac - l_bc)


DEFER_DETOUR = "detour"  # continue next slice over a multi-hop path
DEFER_WAIT_CYCLE = "wait-cycle"  # wait for the direct circuit to reappear


@dataclass
class ExchangeEnv:
    """Everything one exchange needs about the link and the two endpoints."""

    parent_clock: ClockState
    child_clock: ClockState
    parent_port: PortModel
    child_port: PortModel
    cable_delay_ps: int
    serialization_ps: int = 8000
    processing_ps: int = 1_000_000
    forwarding_ps: int = 100_000
    slice_duration_ps: int | None = None
    slice_end_ps: int | None = None
    cycle_duration_ps: int | None = None
    defer_policy: str = DEFER_DETOUR
    detour_hops: int = 2
    retry_slices: int = 4
    tx_extra: Callable[[int], int] | None = None  # traffic-induced egress wait


def _flight(env: ExchangeEnv, hops: int = 1) -> int:
    one = env.serialization_ps + env.cable_delay_ps
    if hops == 1:
        return one
    return hops * one + (hops - 1) * env.forwarding_ps


def _leg_departure(env: ExchangeEnv, ready_ps: int) -> tuple[int, int, int]:
    """True departure time of a leg that becomes ready at ready_ps.

    Returns (departure, hops, deferrals).  A leg that no longer fits the
    slice window either continues from the next slice boundary over a
    detour path (breaking path symmetry) or waits a full cycle for the
    direct circuit, depending on the configured policy.
    """
    if env.slice_end_ps is None or ready_ps + _flight(env) <= env.slice_end_ps:
        return ready_ps, 1, 0
    if env.defer_policy == DEFER_DETOUR:
        # multi-hop paths over other ToRs' live circuits are available
        # immediately; the leg leaves as soon as it is ready
        return ready_ps, env.detour_hops, 1
    if env.cycle_duration_ps is None or env.slice_duration_ps is None:
        raise MalformedExchange("wait-cycle deferral needs the cycle geometry")
    window_start = env.slice_end_ps - env.slice_duration_ps
    window_end = env.slice_end_ps
    for attempt in range(1, env.retry_slices + 1):
        window_start += env.cycle_duration_ps
        window_end += env.cycle_duration_ps
        depart = max(window_start, ready_ps)
        if depart + _flight(env) <= window_end:
            return depart, 1, attempt
    raise ExchangeAbandoned("deferred exchange exhausted its retry budget")


def run_triple_message(env: ExchangeEnv, now_ps: int) -> SyncExchange:
    """Full three-message exchange starting at now_ps (true time).

    Legs that do not fit the remaining slice window continue from the next
    slice boundary over a detour path; timestamps are taken honestly along
    the actual timeline, so the resulting delay/offset error emerges from
    the asymmetry rather than being injected.
    """
    wait1 = env.tx_extra(now_ps) if env.tx_extra else 0
    dep1, hops1, defer1 = _leg_departure(env, now_ps + wait1)
    t1_parent = env.parent_port.take_tx_timestamp(env.parent_clock, now_ps)
    arr1 = dep1 + _flight(env, hops1)
    t1_child = env.child_port.take_rx_timestamp(env.child_clock, arr1)

    ready2 = arr1 + env.processing_ps
    wait2 = env.tx_extra(ready2) if env.tx_extra else 0
    dep2, hops2, defer2 = _leg_departure(env, ready2 + wait2)
    t2_child = env.child_port.take_tx_timestamp(env.child_clock, ready2)
    arr2 = dep2 + _flight(env, hops2)
    t2_parent = env.parent_port.take_rx_timestamp(env.parent_clock, arr2)

    ready3 = arr2 + env.processing_ps
    wait3 = env.tx_extra(ready3) if env.tx_extra else 0
    dep3, hops3, defer3 = _leg_departure(env, ready3 + wait3)
    arr3 = dep3 + _flight(env, hops3)

    return SyncExchange(
        t1_parent=t1_parent,
        t1_child=t1_child,
        t2_child=t2_child,
        t2_parent=t2_parent,
        mode=TRIPLE,
        parent_tor=env.parent_port.tor_id,
        child_tor=env.child_port.tor_id,
        ocs=env.parent_port.port_index,
        completed_at=arr3,
        deferred_legs=(defer1 > 0) + (defer2 > 0) + (defer3 > 0),
    )


def run_single_message(env: ExchangeEnv, now_ps: int) -> SyncExchange:
    """Clock-propagation message only; the delay comes from the profile."""
    wait1 = env.tx_extra(now_ps) if env.tx_extra else 0
    dep1, hops1, defer1 = _leg_departure(env, now_ps + wait1)
    t1_parent = env.parent_port.take_tx_timestamp(env.parent_clock, now_ps)
    arr1 = dep1 + _flight(env, hops1)
    t1_child = env.child_port.take_rx_timestamp(env.child_clock, arr1)
    return SyncExchange(
        t1_parent=t1_parent,
        t1_child=t1_child,
        mode=SINGLE,
        parent_tor=env.parent_port.tor_id,
        child_tor=env.child_port.tor_id,
        ocs=env.parent_port.port_index,
        completed_at=arr1,
        deferred_legs=1 if defer1 else 0,
    )


@dataclass
class OffsetFilter:
    """Sliding-window outlier rejection for measured offsets.

    A candidate is accepted when the window is empty or it lies within
    margin_ps of the window mean; rejected candidates never enter the
    window and the ToR keeps its previous offset.

    A sustained rejection streak (every offer rejected for two window
    lengths) means the stored average has gone stale, not that the inputs
    are outliers; the window is then dropped, and the next candidate is
    accepted through the ordinary empty-window path.
    """

    window_len: int = 16
    margin_ps: int = 28_000
    window: list[int] = field(default_factory=list)
    _sum: int = 0
    _reject_streak: int = 0

    def mean(self) -> int:
        if not self.window:
            return 0
        return div_round_half_away(self._sum, len(self.window))

    def offer(self, candidate_ps: int) -> bool:
        if self.window and abs(candidate_ps - self.mean()) > self.margin_ps:
            self._reject_streak += 1
            if self._reject_streak >= 2 * self.window_len:
                self.window.clear()
                self._sum = 0
                self._reject_streak = 0
            return False
        self._reject_streak = 0
        self.window.append(candidate_ps)
        self._sum += candidate_ps
        if len(self.window) > self.window_len:
            self._sum -= self.window.pop(0)
        return True


def dump_exchange(x: SyncExchange) -> str:
    """One-line debug form for trace diffing."""
    t2c = "-" if x.t2_child is None else str(x.t2_child)
    t2p = "-" if x.t2_parent is None else str(x.t2_parent)
    return (
        f"{x.mode} {x.parent_tor}>{x.child_tor}@{x.ocs} "
        f"{x.t1_parent} {x.t1_child} {t2c} {t2p} done={x.completed_at} "
        f"defer={x.deferred_legs}"
    )

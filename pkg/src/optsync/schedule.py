"""Optical circuit schedules, cabling, and failure overlays.

A schedule is a cyclic sequence of time slices; in each slice every optical
switch (OCS) holds one matching between ToR ports.  Port k of every ToR is
wired to OCS k, so circuits only form between equal port indices.  The
round-robin rotor schedule walks all uplinks through the classic circle
tournament so that every ToR pair gets a direct circuit at least once per
cycle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ConfigError

PS_PER_NS = 1000
PROPAGATION_PS_PER_M = 5 * PS_PER_NS  # optical fiber, 5 ns/m


def round_robin_matchings(n: int) -> list[list[tuple[int, int]]]:
    """Circle-method tournament: n-1 rounds (even n) or n rounds (odd n,
    one bye each) covering every pair exactly once."""
    if n < 2:
        raise ConfigError("need at least 2 ToRs")
    players = list(range(n))
    odd = n % 2 == 1
    if odd:
        players.append(-1)  # bye marker
    m = len(players)
    rounds = []
    for r in range(m - 1):
        pairs = []
        for i in range(m // 2):
            a = players[i]
            b = players[m - 1 - i]
            if a != -1 and b != -1:
                pairs.append((a, b) if a < b else (b, a))
        rounds.append(sorted(pairs))
        players.insert(1, players.pop())
    return rounds


@dataclass
class OpticalSchedule:
    """Cyclic per-slice matchings.  matchings[slice][ocs] is a list of
    (tor_a, tor_b) pairs, tor_a < tor_b; both endpoints use port index=ocs."""

    num_tors: int
    uplinks: int
    slice_duration_ps: int
    matchings: list[list[list[tuple[int, int]]]]

    _partner: np.ndarray | None = field(default=None, repr=False)

    @property
    def slices_per_cycle(self) -> int:
        return len(self.matchings)

    @property
    def cycle_duration_ps(self) -> int:
        return self.slices_per_cycle * self.slice_duration_ps

    def partner_table(self) -> np.ndarray:
        """partner[slice, ocs, tor] -> peer tor id, or -1 when idle."""
        if self._partner is None:
            tbl = np.full(
                (self.slices_per_cycle, self.uplinks, self.num_tors), -1, dtype=np.int32
            )
            for s, by_ocs in enumerate(self.matchings):
                for k, pairs in enumerate(by_ocs):
                    for a, b in pairs:
                        tbl[s, k, a] = b
                        tbl[s, k, b] = a
            self._partner = tbl
        return self._partner

    def pairs_in_slice(self, slice_index: int) -> list[tuple[int, int, int]]:
        """All (tor_a, tor_b, ocs) circuits of a slice (cyclic index)."""
        s = slice_index % self.slices_per_cycle
        out = []
        for k, pairs in enumerate(self.matchings[s]):
            out.extend((a, b, k) for a, b in pairs)
        return out

    def occurrences(self, a: int, b: int) -> list[tuple[int, int]]:
        """(slice_in_cycle, ocs) at which the pair a-b is connected."""
        lo, hi = (a, b) if a < b else (b, a)
        hits = []
        for s, by_ocs in enumerate(self.matchings):
            for k, pairs in enumerate(by_ocs):
                if (lo, hi) in pairs:
                    hits.append((s, k))
        return hits

    def validate(self, require_full_coverage: bool = True) -> None:
        """Check matching validity (and, for generated schedules, that every
        ToR pair is connected at least once per cycle)."""
        seen_pairs = set()
        for s, by_ocs in enumerate(self.matchings):
            used_ports = set()
            for k, pairs in enumerate(by_ocs):
                for a, b in pairs:
                    if a == b:
                        raise ConfigError(f"self-circuit at slice {s}")
                    for tor in (a, b):
                        if (tor, k) in used_ports:
                            raise ConfigError(
                                f"port {tor}:{k} used twice in slice {s}"
                            )
                        used_ports.add((tor, k))
                    seen_pairs.add((min(a, b), max(a, b)))
        if require_full_coverage:
            want = self.num_tors * (self.num_tors - 1) // 2
            if len(seen_pairs) != want:
                raise ConfigError(
                    f"schedule covers {len(seen_pairs)} of {want} ToR pairs per cycle"
                )

    def serialize(self) -> str:
        """One matching per line: 'slice tor:port tor:port ...'."""
        lines = []
        for s, by_ocs in enumerate(self.matchings):
            for k, pairs in enumerate(by_ocs):
                parts = [str(s)]
                for a, b in pairs:
                    parts.append(f"{a}:{k}")
                    parts.append(f"{b}:{k}")
                lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, slice_duration_ps: int = 300_000_000) -> "OpticalSchedule":
        rows: dict[int, dict[int, list[tuple[int, int]]]] = {}
        max_tor = -1
        max_ocs = 0
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            toks = line.split()
            try:
                s = int(toks[0])
                endpoints = [tuple(int(x) for x in tok.split(":")) for tok in toks[1:]]
            except ValueError as exc:
                raise ConfigError(f"schedule line {lineno}: {exc}") from exc
            if len(endpoints) % 2:
                raise ConfigError(f"schedule line {lineno}: odd endpoint count")
            for i in range(0, len(endpoints), 2):
                (a, ka), (b, kb) = endpoints[i], endpoints[i + 1]
                if ka != kb:
                    raise ConfigError(f"schedule line {lineno}: cross-OCS circuit")
                rows.setdefault(s, {}).setdefault(ka, []).append((min(a, b), max(a, b)))
                max_tor = max(max_tor, a, b)
                max_ocs = max(max_ocs, ka)
        n_slices = max(rows) + 1 if rows else 0
        matchings = [
            [sorted(rows.get(s, {}).get(k, [])) for k in range(max_ocs + 1)]
            for s in range(n_slices)
        ]
        return cls(max_tor + 1, max_ocs + 1, slice_duration_ps, matchings)


def build_rotor_schedule(
    num_tors: int, uplinks: int, slice_duration_ps: int
) -> OpticalSchedule:
    """Round-robin rotor schedule: in slice t, OCS k applies tournament
    matching (t*uplinks + k) mod R, so all R matchings appear every cycle."""
    if num_tors < 2:
        raise ConfigError("need at least 2 ToRs")
    if uplinks < 1:
        raise ConfigError("need at least 1 uplink")
    if uplinks >= num_tors:
        raise ConfigError("uplinks must be smaller than the ToR count")
    rounds = round_robin_matchings(num_tors)
    r = len(rounds)
    slices = -(-r // uplinks)  # ceil
    matchings = [
        [rounds[(t * uplinks + k) % r] for k in range(uplinks)] for t in range(slices)
    ]
    sched = OpticalSchedule(num_tors, uplinks, slice_duration_ps, matchings)
    sched.validate(require_full_coverage=True)
    return sched


@dataclass
class ProfilingSchedule:
    """Preparatory-phase circuit sequence: a master-dwell segment per ToR
    (for drift profiling) followed by full tournament rounds on every OCS
    (covering every ToR-port pair for delay profiling)."""

    schedule: OpticalSchedule
    dwell_slices: int
    master_dwells: list[tuple[int, int]]  # (tor, first slice index)
    delay_rounds: list[int]  # first slice index of each tournament round


def build_profiling_schedule(
    num_tors: int,
    uplinks: int = 1,
    slice_duration_ps: int = 300_000_000,
    dwell_slices: int = 1,
) -> ProfilingSchedule:
    if num_tors < 2:
        raise ConfigError("need at least 2 ToRs")
    matchings: list[list[list[tuple[int, int]]]] = []
    dwells = []
    for tor in range(1, num_tors):
        dwells.append((tor, len(matchings)))
        for _ in range(dwell_slices):
            by_ocs = [[] for _ in range(uplinks)]
            by_ocs[0] = [(0, tor)]
            matchings.append(by_ocs)
    rounds = round_robin_matchings(num_tors)
    round_starts = []
    for rnd in rounds:
        round_starts.append(len(matchings))
        matchings.append([list(rnd) for _ in range(uplinks)])
    sched = OpticalSchedule(num_tors, uplinks, slice_duration_ps, matchings)
    sched.validate(require_full_coverage=num_tors > 2)
    return ProfilingSchedule(sched, dwell_slices, dwells, round_starts)


def build_static_random_graph(
    num_tors: int,
    uplinks: int,
    seed: int,
    slice_duration_ps: int = 300_000_000,
    max_retries: int = 64,
) -> OpticalSchedule:
    """Random port-wise matching per OCS, redrawn until the union graph is
    connected.  Returned as a one-slice schedule (a static topology)."""
    if uplinks < 1:
        raise ConfigError("need at least 1 uplink")
    key = rng.stream_key(seed, rng.TAG_GRAPH)
    ctr = 0
    for _attempt in range(max_retries):
        by_ocs = []
        for k in range(uplinks):
            order = list(range(num_tors))
            # Fisher-Yates on the counter stream
            for i in range(num_tors - 1, 0, -1):
                j = rng.raw(key, ctr) % (i + 1)
                ctr += 1
                order[i], order[j] = order[j], order[i]
            pairs = []
            for i in range(0, num_tors - 1, 2):
                a, b = order[i], order[i + 1]
                pairs.append((a, b) if a < b else (b, a))
            by_ocs.append(sorted(pairs))
        if _is_connected(num_tors, by_ocs):
            sched = OpticalSchedule(num_tors, uplinks, slice_duration_ps, [by_ocs])
            sched.validate(require_full_coverage=False)
            return sched
    raise ConfigError(
        f"no connected random graph in {max_retries} draws "
        f"({num_tors} ToRs, {uplinks} uplinks)"
    )


def _is_connected(num_tors: int, by_ocs: list[list[tuple[int, int]]]) -> bool:
    adj: list[list[int]] = [[] for _ in range(num_tors)]
    for pairs in by_ocs:
        for a, b in pairs:
            adj[a].append(b)
            adj[b].append(a)
    seen = [False] * num_tors
    stack = [0]
    seen[0] = True
    n = 1
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if not seen[w]:
                seen[w] = True
                n += 1
                stack.append(w)
    return n == num_tors


@dataclass
class CircuitStateOverlay:
    """Failed elements masked out of the schedule's connectivity.

    A failed ToR removes all its circuits; a failed uplink (tor, ocs)
    removes that ToR's circuits on one OCS; a failed OCS removes one uplink
    per ToR; a reported link removes a single (a, b, ocs) circuit.
    """

    failed_tors: set[int] = field(default_factory=set)
    failed_uplinks: set[tuple[int, int]] = field(default_factory=set)
    failed_ocses: set[int] = field(default_factory=set)
    failed_links: set[tuple[int, int, int]] = field(default_factory=set)

    def is_pair_live(self, a: int, b: int, ocs: int) -> bool:
        if a in self.failed_tors or b in self.failed_tors:
            return False
        if ocs in self.failed_ocses:
            return False
        if (a, ocs) in self.failed_uplinks or (b, ocs) in self.failed_uplinks:
            return False
        lo, hi = (a, b) if a < b else (b, a)
        return (lo, hi, ocs) not in self.failed_links

    def is_empty(self) -> bool:
        return not (
            self.failed_tors or self.failed_uplinks or self.failed_ocses or self.failed_links
        )

    def copy(self) -> "CircuitStateOverlay":
        return CircuitStateOverlay(
            set(self.failed_tors),
            set(self.failed_uplinks),
            set(self.failed_ocses),
            set(self.failed_links),
        )


def connectivity(
    schedule: OpticalSchedule, overlay: CircuitStateOverlay | None, slice_index: int
) -> list[tuple[int, int, int]]:
    """Live (tor_a, tor_b, ocs) circuits of a slice after failures."""
    pairs = schedule.pairs_in_slice(slice_index)
    if overlay is None or overlay.is_empty():
        return pairs
    return [(a, b, k) for a, b, k in pairs if overlay.is_pair_live(a, b, k)]


class CablingPlan:
    """Fiber lengths per port pair, drawn lazily from a counter stream.

    Lengths are whole meters in [min_m, max_m], symmetric in the endpoints;
    the propagation delay is 5 ns/m.  A fixed length (e.g. a 3 m testbed
    loop) can be forced for every pair.
    """

    def __init__(
        self, seed: int, min_m: int = 3, max_m: int = 300, fixed_m: int | None = None
    ):
        if fixed_m is not None and fixed_m <= 0:
            raise ConfigError("fiber length must be positive")
        if min_m <= 0 or max_m < min_m:
            raise ConfigError("bad fiber length range")
        self.key = rng.stream_key(seed, rng.TAG_CABLE)
        self.min_m = min_m
        self.max_m = max_m
        self.fixed_m = fixed_m

    def length_m(self, a: int, b: int, ocs: int) -> int:
        if self.fixed_m is not None:
            return self.fixed_m
        lo, hi = (a, b) if a < b else (b, a)
        ctr = (lo * 1_048_576 + hi) * 64 + ocs
        span = self.max_m - self.min_m + 1
        return self.min_m + rng.raw(self.key, ctr) % span

    def delay_ps(self, a: int, b: int, ocs: int) -> int:
        return self.length_m(a, b, ocs) * PROPAGATION_PS_PER_M

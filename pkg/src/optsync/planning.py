"""Sync-plan generation over a cyclic optical schedule.

Walk the schedule slice by slice, carrying each ToR's expected sync error E
(picoseconds; infinity before its first sync).  In every slice each ToR
looks at the peers its circuits reach, takes the one with the smallest E
(lowest id on ties), and syncs with it only when that peer's E is strictly
smaller or the peer is a root; after a sync the child's next-slice E is the
parent's E plus the child's per-slice drift magnitude, otherwise the drift
magnitude simply accrues.  Roots keep E = 0 throughout and are never synced
themselves, so a fresh propagation tree grows from the master every slice.

Backup parents are the second-best eligible peer of the same slice; actions
whose parent is the master get the designated backup master instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .profiling import DriftProfile
from .schedule import CircuitStateOverlay, OpticalSchedule

INFINITE_ERROR = 1 << 62
NO_BACKUP = -1
DEFAULT_BATCH_CYCLES = 50
DEFAULT_BACKUP_MASTER = 1
BYTES_PER_ENTRY = 16


@dataclass
class SliceActions:
    """Actions of one slice: children[i] synced by parents[i] (backup[i])."""

    children: np.ndarray
    parents: np.ndarray
    backups: np.ndarray

    def __len__(self) -> int:
        return len(self.children)

    def tuples(self) -> list[tuple[int, int, int]]:
        return list(zip(self.children.tolist(), self.parents.tolist(), self.backups.tolist()))


@dataclass
class SyncPlan:
    """Batch of per-slice actions plus the E trajectory that produced it.

    entry_errors[t] is E entering slice t (index 0 = batch start); the last
    row is E entering the slice after the batch, i.e. the state the next
    batch resumes from.
    """

    num_tors: int
    slices_per_cycle: int
    batch_cycles: int
    actions: list[SliceActions]
    entry_errors: np.ndarray
    roots: tuple[int, ...] = (0,)
    backup_master: int = DEFAULT_BACKUP_MASTER

    @property
    def total_slices(self) -> int:
        return len(self.actions)

    def final_errors(self) -> np.ndarray:
        return self.entry_errors[-1]

    def action_tuples(self) -> list[tuple[int, int, int, int]]:
        """Flat ⟨slice, child, parent, backup⟩ list."""
        out = []
        for t, acts in enumerate(self.actions):
            out.extend((t, c, p, b) for c, p, b in acts.tuples())
        return out

    def serialize(self) -> str:
        """Line format: 't child parent backup' (backup -1 when absent)."""
        return (
            "\n".join(f"{t} {c} {p} {b}" for t, c, p, b in self.action_tuples()) + "\n"
        )

    @classmethod
    def parse(
        cls, text: str, num_tors: int, slices_per_cycle: int, batch_cycles: int
    ) -> "SyncPlan":
        rows: dict[int, list[tuple[int, int, int]]] = {}
        max_t = -1
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                t, c, p, b = (int(x) for x in line.split())
            except ValueError as exc:
                raise ConfigError(f"plan line {lineno}: {exc}") from exc
            rows.setdefault(t, []).append((c, p, b))
            max_t = max(max_t, t)
        total = slices_per_cycle * batch_cycles
        if max_t >= total:
            raise ConfigError("plan has slices beyond the declared batch")
        actions = []
        for t in range(total):
            acts = sorted(rows.get(t, []))
            actions.append(
                SliceActions(
                    np.array([c for c, _, _ in acts], dtype=np.int32),
                    np.array([p for _, p, _ in acts], dtype=np.int32),
                    np.array([b for _, _, b in acts], dtype=np.int32),
                )
            )
        errs = np.zeros((total + 1, num_tors), dtype=np.int64)
        return cls(num_tors, slices_per_cycle, batch_cycles, actions, errs)

    def serialize_lookup(self) -> str:
        """Per-ToR lookup form: parent rows 'P tor t child,child,...' and
        child rows 'C tor t parent backup'."""
        lines = []
        for t, acts in enumerate(self.actions):
            by_parent: dict[int, list[int]] = {}
            for c, p, b in acts.tuples():
                by_parent.setdefault(p, []).append(c)
                lines.append(f"C {c} {t} {p} {b}")
            for p in sorted(by_parent):
                kids = ",".join(str(c) for c in sorted(by_parent[p]))
                lines.append(f"P {p} {t} {kids}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_lookup(
        cls, text: str, num_tors: int, slices_per_cycle: int, batch_cycles: int
    ) -> "SyncPlan":
        rows: dict[int, list[tuple[int, int, int]]] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or not line.startswith("C "):
                continue
            _, c, t, p, b = line.split()
            rows.setdefault(int(t), []).append((int(c), int(p), int(b)))
        flat = [(t, c, p, b) for t, acts in rows.items() for c, p, b in acts]
        body = "\n".join(f"{t} {c} {p} {b}" for t, c, p, b in sorted(flat))
        return cls.parse(body, num_tors, slices_per_cycle, batch_cycles)


def _candidate_table(
    schedule: OpticalSchedule, overlay: CircuitStateOverlay | None
) -> list[np.ndarray]:
    """Per slice-in-cycle, an (N, uplinks) array of connected peer ids,
    columns sorted ascending, padded with N (a virtual peer with infinite
    error) so argmin tie-breaks resolve to the lowest real id."""
    n = schedule.num_tors
    tables = []
    for s in range(schedule.slices_per_cycle):
        peers: list[list[int]] = [[] for _ in range(n)]
        for a, b, k in schedule.pairs_in_slice(s):
            if overlay is not None and not overlay.is_pair_live(a, b, k):
                continue
            peers[a].append(b)
            peers[b].append(a)
        tbl = np.full((n, schedule.uplinks), n, dtype=np.int32)
        for i, lst in enumerate(peers):
            lst = sorted(set(lst))[: schedule.uplinks]
            tbl[i, : len(lst)] = lst
        tables.append(tbl)
    return tables


def generate_plan(
    schedule: OpticalSchedule,
    drift_profile: DriftProfile,
    batch_cycles: int = DEFAULT_BATCH_CYCLES,
    overlay: CircuitStateOverlay | None = None,
    initial_errors: np.ndarray | None = None,
    roots: tuple[int, ...] = (0,),
    backup_master: int = DEFAULT_BACKUP_MASTER,
) -> SyncPlan:
    """One planning batch over batch_cycles optical cycles.

    The per-slice E increment is the magnitude of the profiled per-slice
    drift (error accrues regardless of drift sign).  Dead circuits in the
    overlay are invisible to parent selection.
    """
    n = schedule.num_tors
    spc = schedule.slices_per_cycle
    drift = np.abs(drift_profile.as_array(n)).astype(np.int64)
    for r in roots:
        drift[r] = 0
    if initial_errors is None:
        e = np.full(n, INFINITE_ERROR, dtype=np.int64)
    else:
        e = initial_errors.astype(np.int64).copy()
    for r in roots:
        e[r] = 0
    total = spc * batch_cycles
    cand = _candidate_table(schedule, overlay)
    root_mask = np.zeros(n + 1, dtype=bool)
    for r in roots:
        root_mask[r] = True
    is_root = root_mask[:-1].copy()
    entry = np.empty((total + 1, n), dtype=np.int64)
    actions: list[SliceActions] = []
    e_pad = np.empty(n + 1, dtype=np.int64)
    for t in range(total):
        entry[t] = e
        tbl = cand[t % spc]
        e_pad[:n] = e
        e_pad[n] = INFINITE_ERROR
        cand_e = e_pad[tbl]
        best_col = np.argmin(cand_e, axis=1)
        rows = np.arange(n)
        best_e = cand_e[rows, best_col]
        best_id = tbl[rows, best_col]
        sync = ((best_e < e) | root_mask[best_id]) & ~is_root
        # second-best eligible peer for backup selection
        cand_e2 = cand_e.copy()
        cand_e2[rows, best_col] = INFINITE_ERROR
        second_col = np.argmin(cand_e2, axis=1)
        second_e = cand_e2[rows, second_col]
        second_id = tbl[rows, second_col]
        has_backup = (second_e < e) | (root_mask[second_id] & (second_id < n))
        backups = np.where(has_backup, second_id, NO_BACKUP)
        backups = np.where(best_id == 0, backup_master, backups)
        backups = np.where(
            (best_id == 0) & (rows == backup_master), NO_BACKUP, backups
        )
        children = rows[sync]
        parents = best_id[sync]
        e = np.where(sync, best_e, e)
        grow = e < INFINITE_ERROR
        e = np.where(grow, e + drift, e)
        e[is_root] = 0
        actions.append(
            SliceActions(
                children.astype(np.int32),
                parents.astype(np.int32),
                backups[sync].astype(np.int32),
            )
        )
    entry[total] = e
    return SyncPlan(n, spc, batch_cycles, actions, entry, tuple(roots), backup_master)


def select_backups(
    plan: SyncPlan,
    schedule: OpticalSchedule,
    overlay: CircuitStateOverlay | None = None,
) -> SyncPlan:
    """Recompute backup parents from the plan's stored E trajectory.

    generate_plan already fills backups in the same pass; this recomputes
    them for a plan whose actions were edited or parsed from text.
    """
    cand = _candidate_table(schedule, overlay)
    n = plan.num_tors
    for t, acts in enumerate(plan.actions):
        e = plan.entry_errors[t]
        tbl = cand[t % plan.slices_per_cycle]
        new_backups = []
        for c, p in zip(acts.children.tolist(), acts.parents.tolist()):
            if p == 0:
                new_backups.append(plan.backup_master if c != plan.backup_master else NO_BACKUP)
                continue
            best = None
            for peer in tbl[c]:
                peer = int(peer)
                if peer >= n or peer == p:
                    continue
                eligible = e[peer] < e[c] or peer in plan.roots
                if eligible and (best is None or e[peer] < e[best]):
                    best = peer
            new_backups.append(best if best is not None else NO_BACKUP)
        acts.backups = np.array(new_backups, dtype=np.int32)
    return plan


def plan_delta(
    previous: SyncPlan, nxt: SyncPlan
) -> dict[tuple[int, int], tuple[int, int] | None]:
    """Difference between two equal-horizon batches, keyed by
    (slice-in-batch, child); value is the new (parent, backup) or None for
    a removed action.  Empty when the plan has converged."""
    if previous.total_slices != nxt.total_slices:
        raise ConfigError("plan deltas need equal-length batches")

    def as_map(plan: SyncPlan) -> dict[tuple[int, int], tuple[int, int]]:
        return {
            (t, c): (p, b)
            for t, acts in enumerate(plan.actions)
            for c, p, b in acts.tuples()
        }

    prev_map = as_map(previous)
    next_map = as_map(nxt)
    delta: dict[tuple[int, int], tuple[int, int] | None] = {}
    for key, val in next_map.items():
        if prev_map.get(key) != val:
            delta[key] = val
    for key in prev_map:
        if key not in next_map:
            delta[key] = None
    return delta


@dataclass
class OverheadReport:
    total_bytes: int
    total_entries: int
    max_entries_per_tor: int
    entries_per_tor: dict[int, int] = field(default_factory=dict)
    peak_bandwidth_bps: float = 0.0

    def as_dict(self) -> dict:
        return {
            "total_bytes": self.total_bytes,
            "total_entries": self.total_entries,
            "max_entries_per_tor": self.max_entries_per_tor,
            "peak_bandwidth_bps": self.peak_bandwidth_bps,
        }


def plan_overhead(
    plan: SyncPlan,
    bytes_per_entry: int = BYTES_PER_ENTRY,
    slice_duration_ps: int | None = None,
    message_bytes: int = 100,
) -> OverheadReport:
    """Distribution and enforcement cost of a batch, documented encoding.

    One entry is one ⟨slice-in-cycle, child, parent, backup⟩ action row of
    bytes_per_entry bytes; rows repeated identically in later cycles of the
    batch are sent once (later cycles ship as deltas), so the total is the
    deduplicated row count.  A ToR stores every row it appears in, as
    parent or as child.  Peak bandwidth is the busiest ToR's sync messages
    (one per action as parent, message_bytes each) over one cycle.
    """
    unique_rows: set[tuple[int, int, int, int]] = set()
    per_tor: dict[int, set[tuple[int, int, int, int]]] = {}
    parent_msgs: dict[int, int] = {}
    spc = plan.slices_per_cycle
    for t, acts in enumerate(plan.actions):
        s = t % spc
        for c, p, b in acts.tuples():
            row = (s, c, p, b)
            if row not in unique_rows:
                unique_rows.add(row)
                per_tor.setdefault(c, set()).add(row)
                per_tor.setdefault(p, set()).add(row)
                parent_msgs[p] = parent_msgs.get(p, 0) + 1
    entries_per_tor = {tor: len(rows) for tor, rows in per_tor.items()}
    peak = 0.0
    if slice_duration_ps is not None and parent_msgs:
        cycle_s = spc * slice_duration_ps / 1e12
        peak = max(parent_msgs.values()) * message_bytes * 8 / cycle_s
    return OverheadReport(
        total_bytes=len(unique_rows) * bytes_per_entry,
        total_entries=len(unique_rows),
        max_entries_per_tor=max(entries_per_tor.values(), default=0),
        entries_per_tor=entries_per_tor,
        peak_bandwidth_bps=peak,
    )


def handle_failure_report(
    schedule: OpticalSchedule,
    drift_profile: DriftProfile,
    overlay: CircuitStateOverlay,
    current_errors: np.ndarray,
    batch_cycles: int = DEFAULT_BATCH_CYCLES,
    roots: tuple[int, ...] = (0,),
    backup_master: int = DEFAULT_BACKUP_MASTER,
) -> SyncPlan:
    """Regenerate the plan with failed elements masked out, resuming from
    the current E state (ToRs keep their clocks across failures)."""
    return generate_plan(
        schedule,
        drift_profile,
        batch_cycles,
        overlay=overlay,
        initial_errors=current_errors,
        roots=roots,
        backup_master=backup_master,
    )


def audit_plan(plan: SyncPlan, schedule: OpticalSchedule, overlay=None) -> None:
    """Structural invariants: one parent per (child, slice); every action on
    a live circuit; parent strictly better or a root; per-slice acyclicity."""
    cand = _candidate_table(schedule, overlay)
    for t, acts in enumerate(plan.actions):
        e = plan.entry_errors[t]
        seen = set()
        tbl = cand[t % plan.slices_per_cycle]
        parent_of = {}
        for c, p, b in acts.tuples():
            if c in seen:
                raise ConfigError(f"child {c} synced twice in slice {t}")
            seen.add(c)
            if p not in tbl[c]:
                raise ConfigError(f"action {p}->{c} not connected in slice {t}")
            if not (e[p] < e[c] or p in plan.roots):
                raise ConfigError(f"action {p}->{c} violates better-clock rule")
            parent_of[c] = p
        for c in parent_of:
            hops = 0
            v = c
            while v in parent_of:
                v = parent_of[v]
                hops += 1
                if hops > plan.num_tors:
                    raise ConfigError(f"parent cycle in slice {t}")

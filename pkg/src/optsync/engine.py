"""Deterministic two-phase simulation: preparatory bootstrap and operational
plan enforcement, with failures, recovery, and background-traffic noise.

The engine advances slice by slice on the true-time grid.  Within a slice,
parents emit their planned sync messages when their own (drifted) clock
crosses the slice boundary, message timelines are computed exactly, and all
accepted offsets are applied in one step at the slice end, so a clock value
never relays across more than one ToR hop inside a slice.  Errors are
sampled at every slice boundary as |local - master| per ToR.

Everything is integer arithmetic on counter-based noise streams: a (config,
seed, failure script) triple maps to a bit-identical metrics log.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .clocks import ClockArray, ClockState, PortModel, div_round_half_away, quantize, uppm
from .errors import BootstrapError, ConfigError
from .experiment import ExperimentConfig, FailureEvent
from .fastpath import (
    ClockVecView,
    SliceBatch,
    VecFilter,
    VecTraffic,
    rx_draws,
    vec_div_half_away,
    vec_quantize,
)
from .metrics import MetricsLog
from .planning import (
    NO_BACKUP,
    SyncPlan,
    generate_plan,
    handle_failure_report,
    plan_delta,
    plan_overhead,
)
from .profiling import (
    DelayProfile,
    DriftProfile,
    ReprofileSession,
    profile_delay,
    profile_drift,
)
from .protocol import (
    CorrectionTable,
    ExchangeEnv,
    OffsetFilter,
    compute_delay,
    compute_offset,
    derive_correction,
    run_triple_message,
)
from .schedule import (
    CablingPlan,
    CircuitStateOverlay,
    OpticalSchedule,
    build_rotor_schedule,
    build_static_random_graph,
)

RATE_DENOM = 10**12
MISS_LIMIT = 2  # consecutive missed syncs before a circuit is suspect
KEEPALIVE_MISSES = 3
REFERENCE_TORS = (0, 1, 2)
PACKET_1500B_PS = 120_000  # 1500 B at 100 Gb/s
PACKET_9000B_PS = 720_000  # 9000 B jumbo
BURST_PERIOD_PS = 100_000_000  # bursts of 10 us every 100 us
BURST_LEN_PS = 10_000_000


class TrafficNoise:
    """Egress waits sync messages pick up behind data packets.

    With prioritized queues at most one packet sits ahead: a steady load
    adds one 1500 B serialization with probability = load; inside a burst
    window one 9000 B jumbo is always draining.
    """

    def __init__(self, load: float, bursts: bool, seed: int):
        if not 0.0 <= load < 1.0:
            raise ConfigError("traffic load must be in [0, 1)")
        self.load = load
        self.bursts = bursts
        self.key = rng.stream_key(seed, rng.TAG_TRAFFIC)
        self.counter = 0
        self._load_u64 = int(load * 2.0**64)

    def extra_delay_ps(self, t_ps: int) -> int:
        if self.load == 0.0 and not self.bursts:
            return 0
        wait = 0
        if self.bursts and t_ps % BURST_PERIOD_PS < BURST_LEN_PS:
            wait += PACKET_9000B_PS
        if self._load_u64 and rng.raw(self.key, self.counter) < self._load_u64:
            wait += PACKET_1500B_PS
        self.counter += 1
        return wait


@dataclass
class World:
    """Strategy-independent state for one (config, seed)."""

    config: ExperimentConfig
    seed: int
    clocks: list[ClockState]
    ports: dict[tuple[int, int], PortModel]
    cabling: CablingPlan
    rotor: OpticalSchedule
    static: OpticalSchedule
    temp_signs: np.ndarray

    def port(self, tor: int, ocs: int) -> PortModel:
        return self.ports[(tor, ocs)]

    def flight_ps(self, a: int, b: int, ocs: int) -> int:
        return self.config.serialization_ps + self.cabling.delay_ps(a, b, ocs)


def build_world(config: ExperimentConfig, seed: int) -> World:
    n, u = config.num_tors, config.uplinks
    med_key = rng.stream_key(seed, rng.TAG_MEDIAN)
    phase_key = rng.stream_key(seed, rng.TAG_PHASE)
    tx_key = rng.stream_key(seed, rng.TAG_TX)
    sign_key = rng.stream_key(seed, rng.TAG_TEMP_SIGN)
    range_uppm = uppm(config.median_range_ppm)
    var_uppm = uppm(config.variance_ppm)
    coeff_uppm = uppm(config.temp_coeff_ppm_per_c)
    clocks = []
    signs = np.ones(n, dtype=np.int64)
    for tor in range(n):
        if tor == 0:
            median = 0
            var = 0
            phase = 0
        else:
            base = rng.uniform(med_key, tor, range_uppm)
            median = round(base * config.median_scale)
            var = var_uppm
            phase = rng.uniform(phase_key, tor, config.initial_phase_spread_ps)
        sign = 1 if rng.raw(sign_key, tor) % 2 == 0 else -1
        signs[tor] = sign
        clocks.append(
            ClockState(
                tor_id=tor,
                drift_median_uppm=median,
                drift_variance_uppm=var,
                interval_ps=config.slice_duration_ps,
                offset_correction_ps=phase,
                temp_coeff_uppm_per_c=sign * coeff_uppm,
                seed_key=rng.stream_key(seed, rng.TAG_DRIFT, tor),
            )
        )
    ports = {}
    for tor in range(n):
        for k in range(u):
            tx = rng.uniform(tx_key, tor * 64 + k, config.tx_error_max_ns) * 1000
            ports[(tor, k)] = PortModel(
                tor_id=tor,
                port_index=k,
                tx_error_ps=tx,
                rx_noise_ps=config.rx_noise_ps,
                resolution_ps=config.timestamp_resolution_ps,
                rx_key=rng.stream_key(seed, rng.TAG_RX, tor, k),
            )
    cabling = CablingPlan(
        seed,
        min_m=config.cable_min_m,
        max_m=config.cable_max_m,
        fixed_m=config.cable_fixed_m or None,
    )
    rotor = build_rotor_schedule(n, u, config.slice_duration_ps)
    static = build_static_random_graph(
        n, u, seed, config.slice_duration_ps, max_retries=config.graph_retries
    )
    return World(config, seed, clocks, ports, cabling, rotor, static, signs)


def bfs_tree(schedule: OpticalSchedule, root: int, avoid_edges=frozenset()) -> dict[int, tuple[int, int]]:
    """parent[child] = (parent, ocs) over a static one-slice schedule."""
    adj: dict[int, list[tuple[int, int]]] = {i: [] for i in range(schedule.num_tors)}
    for a, b, k in schedule.pairs_in_slice(0):
        if (min(a, b), max(a, b)) in avoid_edges:
            continue
        adj[a].append((b, k))
        adj[b].append((a, k))
    for lst in adj.values():
        lst.sort()
    parent: dict[int, tuple[int, int]] = {}
    seen = {root}
    frontier = [root]
    while frontier:
        nxt = []
        for v in frontier:
            for w, k in adj[v]:
                if w not in seen:
                    seen.add(w)
                    parent[w] = (v, k)
                    nxt.append(w)
        frontier = nxt
    return parent


def backup_bfs_tree(schedule: OpticalSchedule, root: int, primary: dict) -> dict:
    """Second tree avoiding the primary's edges (falls back to them only for
    ToRs otherwise unreachable); typically deeper than the primary."""
    avoid = {(min(c, p), max(c, p)) for c, (p, _k) in primary.items()}
    tree = bfs_tree(schedule, root, avoid_edges=avoid)
    for child in primary:
        if child not in tree:
            tree[child] = primary[child]
    return tree


def tree_depths(tree: dict[int, tuple[int, int]], root: int, n: int) -> dict[int, int]:
    depth = {root: 0}
    for child in tree:
        hops = 0
        v = child
        chain = []
        while v != root and v in tree and v not in depth:
            chain.append(v)
            v = tree[v][0]
            hops += 1
            if hops > n:
                break
        base = depth.get(v, 0)
        for i, node in enumerate(reversed(chain)):
            depth[node] = base + i + 1
    return depth


@dataclass
class PrepOutputs:
    initial_errors_ps: dict[int, int]
    drift_profile: DriftProfile
    plan_drift_profile: DriftProfile
    delay_profile: DelayProfile
    corrections: CorrectionTable
    plan: SyncPlan
    prep_end_ps: int
    bootstrap_max_error_ps: int
    bootstrap_offsets_ps: dict[int, int]
    overhead: dict


def quantize_drift_profile(profile: DriftProfile, quantum_ps: int) -> DriftProfile:
    """The planner's view of the drifts: per-slice medians rounded to the
    timestamp quantum.  Expected-error differences below one quantum are
    measurement artifacts, and honoring them would rank parents on noise."""
    out = DriftProfile(profile.slice_duration_ps)
    for tor, d in profile.d_ps.items():
        out.set(tor, div_round_half_away(d, quantum_ps) * quantum_ps,
                profile.sample_count.get(tor, 0))
    return out


def run_preparatory(world: World, compute_plan: bool = True) -> PrepOutputs:
    """Profile drifts and delays, derive corrections, generate the first
    plan batch, then bootstrap coarse clocks on the static random graph.

    Clock distribution runs last so the operational phase starts right on
    the heels of the spanning-tree sync, before drift re-opens the gap."""
    cfg = world.config
    u_ps = cfg.slice_duration_ps
    t = u_ps  # leave epoch 0 clean
    master = world.clocks[0]

    # 1. drift profiling: each ToR dwells on a direct master circuit
    drift_prof = DriftProfile(u_ps)
    drift_prof.set(0, 0, cfg.profile_samples)
    stride = min(cfg.drift_sample_stride, max(1, cfg.profile_samples // 2))
    for tor in range(1, cfg.num_tors):
        d, samples = profile_drift(
            world.clocks[tor],
            master,
            world.port(tor, 0),
            world.port(0, 0),
            flight_ps=world.flight_ps(0, tor, 0),
            n=cfg.profile_samples,
            interval_ps=u_ps,
            slice_duration_ps=u_ps,
            start_ps=t,
            stride=stride,
        )
        drift_prof.set(tor, d, len(samples))
        t += (cfg.profile_samples + 1) * u_ps

    # 2. delay profiling: every circuit the schedules use, plus reference
    #    circuits to ToRs 0/1/2 on every OCS for correction derivation
    pairs = set()
    for s in range(world.rotor.slices_per_cycle):
        pairs.update(world.rotor.pairs_in_slice(s))
    pairs.update(world.static.pairs_in_slice(0))
    for c in REFERENCE_TORS:
        for tor in range(cfg.num_tors):
            if tor != c:
                for k in range(cfg.uplinks):
                    pairs.add((min(tor, c), max(tor, c), k))
    delay_prof = DelayProfile()
    spacing = 4 * cfg.processing_ps + 4 * (cfg.serialization_ps + cfg.cable_max_m * 5000)
    for a, b, k in sorted(pairs):
        d, samples = profile_delay(
            world.clocks[a],
            world.clocks[b],
            world.port(a, k),
            world.port(b, k),
            flight_ps=world.flight_ps(a, b, k),
            n=cfg.profile_samples,
            spacing_ps=spacing,
            start_ps=t,
            turnaround_ps=cfg.processing_ps,
        )
        delay_prof.set(a, b, k, d, len(samples))
    # pairs of one tournament round profile concurrently on disjoint circuits
    t += cfg.num_tors * cfg.profile_samples * spacing

    # 3. per-pair TX-bias corrections through a reference ToR
    corrections = CorrectionTable()
    for a, b, k in sorted(pairs):
        entry_refs = [c for c in REFERENCE_TORS if c != a and c != b]
        try:
            entry = derive_correction(delay_prof, world.cabling, a, b, k, entry_refs)
        except Exception:
            continue
        corrections.put(a, b, k, entry)

    # 4. first plan batch, from the quantum-rounded drift view
    plan_drift = quantize_drift_profile(drift_prof, cfg.timestamp_resolution_ps)
    plan = None
    overhead = {}
    if compute_plan:
        plan = generate_plan(
            world.rotor, plan_drift, cfg.batch_cycles, backup_master=cfg.backup_master
        )
        overhead = plan_overhead(plan, slice_duration_ps=u_ps).as_dict()
        batch_ps = cfg.batch_cycles * world.rotor.cycle_duration_ps
        if cfg.compute_latency_ps > batch_ps:
            overhead["compute_latency_warning"] = 1

    # 5. coarse spanning-tree sync on the static random graph, parents
    #    before children, repeated a few rounds; the correction tables are
    #    already derived, so the bootstrap exchanges use them
    tree = bfs_tree(world.static, 0)
    depths = tree_depths(tree, 0, cfg.num_tors)
    order = sorted(tree, key=lambda c: (depths.get(c, 0), c))
    last_offsets: dict[int, int] = {}
    for _round in range(cfg.bootstrap_rounds):
        for child in order:
            parent, k = tree[child]
            env = ExchangeEnv(
                world.clocks[parent],
                world.clocks[child],
                world.port(parent, k),
                world.port(child, k),
                cable_delay_ps=world.cabling.delay_ps(parent, child, k),
                serialization_ps=cfg.serialization_ps,
                processing_ps=cfg.processing_ps,
            )
            x = run_triple_message(env, t)
            off = compute_offset(
                x, compute_delay(x), corrections.delta_or_zero(parent, child, k)
            )
            last_offsets[child] = off
            world.clocks[child].apply_offset(off)
            t = x.completed_at + cfg.processing_ps
        t += u_ps
    worst = 0
    errors0 = {}
    for tor in range(cfg.num_tors):
        err = world.clocks[tor].local_time(t) - master.local_time(t)
        errors0[tor] = err
        worst = max(worst, abs(err))
    if worst >= cfg.bootstrap_limit_frac * u_ps:
        raise BootstrapError(
            f"bootstrap error {worst} ps exceeds {cfg.bootstrap_limit_frac:.0%} "
            f"of the {u_ps} ps slice"
        )

    return PrepOutputs(
        initial_errors_ps=errors0,
        drift_profile=drift_prof,
        plan_drift_profile=plan_drift,
        delay_profile=delay_prof,
        corrections=corrections,
        plan=plan,
        prep_end_ps=t,
        bootstrap_max_error_ps=worst,
        bootstrap_offsets_ps=last_offsets,
        overhead=overhead,
    )


@dataclass
class _Action:
    """One resolved sync action ready for fast execution."""

    child: int
    parent: int
    ocs: int
    flight_ps: int
    profiled_delay_ps: int
    correction_ps: int
    backup: int


def actions_to_batch(actions: list[_Action]) -> SliceBatch:
    return SliceBatch(
        children=np.array([a.child for a in actions], dtype=np.int64),
        parents=np.array([a.parent for a in actions], dtype=np.int64),
        ocs=np.array([a.ocs for a in actions], dtype=np.int64),
        flight=np.array([a.flight_ps for a in actions], dtype=np.int64),
        prof_delay=np.array([a.profiled_delay_ps for a in actions], dtype=np.int64),
        delta=np.array([a.correction_ps for a in actions], dtype=np.int64),
        backup=np.array([a.backup for a in actions], dtype=np.int64),
    )


class _PlanRunner:
    """Batch lifecycle for the drift-aware strategy: regenerate on failure
    reports or re-profiles, detect convergence, reuse steady batches."""

    def __init__(self, world: World, prep: PrepOutputs, log: MetricsLog):
        self.world = world
        self.log = log
        self.drift = prep.plan_drift_profile
        self.raw_drift = prep.drift_profile
        self.delay = prep.delay_profile
        self.corrections = prep.corrections
        self.plan = prep.plan
        self.known_overlay = CircuitStateOverlay()
        self.pending_links: set[tuple[int, int, int]] = set()
        self.dirty = False
        self.converged = False
        self.roots = (0,)
        self.exec_actions: list[list[_Action]] = []
        self._build_exec()

    @property
    def batch_slices(self) -> int:
        return self.plan.total_slices

    def _resolve(self, c: int, p: int, b: int, s: int, pair_ocs) -> _Action | None:
        k = pair_ocs.get((s, min(c, p), max(c, p)))
        if k is None:
            return None
        flight = self.world.flight_ps(c, p, k)
        try:
            dly = self.delay.delay_ps(c, p, k)
        except Exception:
            dly = flight
        delta = self.corrections.delta_or_zero(p, c, k)
        return _Action(c, p, k, flight, dly, delta, b)

    def _build_exec(self) -> None:
        sched = self.world.rotor
        pair_ocs = {}
        for s in range(sched.slices_per_cycle):
            for a, b, k in sched.pairs_in_slice(s):
                pair_ocs.setdefault((s, a, b), k)
        self.pair_ocs = pair_ocs
        self.exec_actions = []
        self.exec_batches = []
        for t, acts in enumerate(self.plan.actions):
            s = t % sched.slices_per_cycle
            resolved = []
            for c, p, b in acts.tuples():
                act = self._resolve(c, p, b, s, pair_ocs)
                if act is not None:
                    resolved.append(act)
            self.exec_actions.append(resolved)
            self.exec_batches.append(actions_to_batch(resolved))

    def actions_for(self, slice_in_batch: int) -> list[_Action]:
        return self.exec_actions[slice_in_batch]

    def batch_for(self, slice_in_batch: int) -> SliceBatch:
        return self.exec_batches[slice_in_batch]

    def roll_batch(self, now_ps: int) -> bool:
        """Called at a batch boundary: regenerate when dirty, otherwise
        check convergence once and reuse the steady plan.  Returns True
        when a fresh plan replaced the old one."""
        if self.dirty:
            for link in sorted(self.pending_links):
                self.known_overlay.failed_links.add(link)
            self.pending_links.clear()
            new_plan = handle_failure_report(
                self.world.rotor,
                self.drift,
                self.known_overlay,
                self.plan.final_errors(),
                batch_cycles=self.plan.batch_cycles,
                roots=self.roots,
                backup_master=self.plan.backup_master,
            )
            delta = plan_delta(self.plan, new_plan)
            self.plan = new_plan
            self._build_exec()
            self.dirty = False
            self.converged = False
            self.log.event(now_ps, "plan-swap", f"delta={len(delta)}")
            return True
        if not self.converged:
            new_plan = generate_plan(
                self.world.rotor,
                self.drift,
                self.plan.batch_cycles,
                overlay=self.known_overlay,
                initial_errors=self.plan.final_errors(),
                roots=self.roots,
                backup_master=self.plan.backup_master,
            )
            delta = plan_delta(self.plan, new_plan)
            if not delta:
                self.converged = True
                self.log.event(now_ps, "plan-delta", "size=0")
            else:
                self.plan = new_plan
                self._build_exec()
                self.log.event(now_ps, "plan-delta", f"size={len(delta)}")
                return True
        return False


class OperationalRun:
    """One operational-phase run of a single strategy."""

    def __init__(
        self,
        world: World,
        prep: PrepOutputs,
        failure_script: list[FailureEvent] | None = None,
        log: MetricsLog | None = None,
    ):
        cfg = world.config
        self.world = world
        self.cfg = cfg
        self.prep = prep
        self.strategy = cfg.strategy
        self.u_ps = cfg.slice_duration_ps
        self.spc = world.rotor.slices_per_cycle
        self.n = cfg.num_tors
        self.log = log or MetricsLog(cfg.strategy, world.seed, self.u_ps)
        self.script = sorted(failure_script or cfg.failures, key=lambda e: e.at_cycle)
        self.traffic = TrafficNoise(cfg.traffic_load, cfg.traffic_bursts, world.seed)
        self.t_op = -(-prep.prep_end_ps // self.u_ps) * self.u_ps
        self.arr = ClockArray(world.clocks)
        for _ in range(self.t_op // self.u_ps):
            self.arr.advance_interval()
        self.guard_ps = cfg.emission_guard_ps or max(self.u_ps // 100, 200_000)
        self.res = cfg.timestamp_resolution_ps
        self.tx_err = np.zeros((self.n, cfg.uplinks), dtype=np.int64)
        self.rx_keys = np.zeros((self.n, cfg.uplinks), dtype=np.uint64)
        self.rx_ctr = np.zeros((self.n, cfg.uplinks), dtype=np.int64)
        for (tor, k), port in world.ports.items():
            self.tx_err[tor, k] = port.tx_error_ps
            self.rx_keys[tor, k] = port.rx_key
            self.rx_ctr[tor, k] = port.rx_counter
        self.alive = np.ones(self.n, dtype=bool)
        self.truth = CircuitStateOverlay()
        self.hops = np.full(self.n, 999, dtype=np.int64)
        self.hops[0] = 0
        self.comp_enabled = self.strategy in ("graham-local", "graham-strawman")
        # local drift compensation subtracts the signed profiled rate
        self.comp_rate = (
            prep.drift_profile.as_array(self.n)
            if self.comp_enabled
            else np.zeros(self.n, dtype=np.int64)
        )
        self.comp = np.zeros(self.n, dtype=np.int64)
        self.corrections_enabled = self.strategy == "drift-aware"
        self.filters: VecFilter | None = None
        if self.strategy == "drift-aware":
            # windows seeded with the last bootstrap residual so the sliding
            # mean starts near the steady state instead of at the first
            # (transient) operational offset
            self.filters = VecFilter(self.n, cfg.filter_window, cfg.filter_margin_ps)
            for i in range(self.n):
                seed_off = prep.bootstrap_offsets_ps.get(i)
                if seed_off is not None:
                    self.filters.seed(i, seed_off)
        self.mode = cfg.sync_mode if self.strategy == "drift-aware" else "triple"
        self.planner: _PlanRunner | None = None
        self.master_meetings: dict[int, list[tuple[int, int]]] = {}
        seen_child = set()
        for s in range(self.spc):
            for a, b, k in world.rotor.pairs_in_slice(s):
                if 0 in (a, b):
                    child = b if a == 0 else a
                    if child not in seen_child:
                        seen_child.add(child)
                        self.master_meetings.setdefault(s, []).append((child, k))
        if self.strategy == "drift-aware":
            self.planner = _PlanRunner(world, prep, self.log)
        self.strawman_actions = self._strawman_actions() if self.strategy in (
            "strawman", "graham-strawman") else None
        self.tree = None
        self.backup_tree = None
        self.tree_parent = None
        self.periods = None
        self.next_due = None
        if self.strategy in ("ptp-tree", "sundial-like"):
            self._setup_static_tree()
        self.sundial_margin_ps = 0
        self.sundial_filters: VecFilter | None = None
        if self.strategy == "sundial-like":
            # no per-pair drift profiles: the margin must cover every valid
            # offset network-wide (a 200 ppm drift bound over the period,
            # compounded down the tree)
            depth = max(tree_depths(self.tree, 0, self.n).values() or [1])
            self.sundial_margin_ps = int(200e-6 * int(self.periods[1:].max()) * max(depth, 1))
            self.sundial_filters = VecFilter(
                self.n, cfg.filter_window, self.sundial_margin_ps
            )
        self.vec_traffic = VecTraffic(self.traffic)
        self.hop_hist_arr = np.zeros(1024, dtype=np.int64)
        self.tor_max_hop_arr = np.zeros(self.n, dtype=np.int64)
        self.sync_count_arr = np.zeros(self.n, dtype=np.int64)
        self.patched: dict[int, SliceBatch] = {}
        self.miss_streak: dict[tuple[int, int], int] = {}
        self.substitutions: dict[tuple[int, int], _Action | None] = {}
        self.sessions: dict[int, ReprofileSession] = {}
        self.apply_queue: dict[int, list[tuple[int, int, int]]] = {}
        self.planner_alive = True
        self.planner_active = "primary"
        self.keepalive_missed = 0
        self.stats = {"executed": 0, "missed_circuit": 0, "missed_window": 0,
                      "rejected": 0, "deferred": 0}
        self._script_key = rng.stream_key(world.seed, 0x7A11)
        self._script_ctr = 0

    # -- strategy setup -----------------------------------------------------

    def _strawman_actions(self) -> list[list[_Action]]:
        out = [[] for _ in range(self.spc)]
        for s, meets in self.master_meetings.items():
            for child, k in meets:
                out[s].append(
                    _Action(child, 0, k, self.world.flight_ps(0, child, k), 0, 0, -1)
                )
        return out

    def _setup_static_tree(self) -> None:
        self.tree = bfs_tree(self.world.static, 0)
        self.backup_tree = backup_bfs_tree(self.world.static, 0, self.tree)
        self.tree_parent = dict(self.tree)
        # sync-frequency parity: per-ToR period matched to the drift-aware
        # plan's per-cycle sync count on this same world
        counts = np.zeros(self.n, dtype=np.int64)
        plan = self.prep.plan
        last_cycle = (plan.batch_cycles - 1) * self.spc
        for t in range(last_cycle, plan.total_slices):
            for c in plan.actions[t].children.tolist():
                counts[c] += 1
        cycle_ps = self.spc * self.u_ps
        self.periods = np.empty(self.n, dtype=np.int64)
        key = rng.stream_key(self.world.seed, 0x57A6)
        self.next_due = np.empty(self.n, dtype=np.int64)
        for i in range(self.n):
            self.periods[i] = cycle_ps // max(int(counts[i]), 1)
            self.next_due[i] = self.t_op + rng.raw(key, i) % int(self.periods[i])
        self.next_due[0] = 1 << 62
        self.periods[0] = 1 << 62

    # -- timestamp helpers ---------------------------------------------------

    def _tx_stamp(self, tor: int, ocs: int, t: int) -> int:
        local = self.arr.local_time(tor, t)
        if self.comp_enabled:
            local -= self._comp_at(tor, t)
        return quantize(local - int(self.tx_err[tor, ocs]), self.res)

    def _rx_stamp(self, tor: int, ocs: int, t: int) -> int:
        noise = rng.uniform(
            int(self.rx_keys[tor, ocs]), int(self.rx_ctr[tor, ocs]), self.cfg.rx_noise_ps
        )
        self.rx_ctr[tor, ocs] += 1
        local = self.arr.local_time(tor, t)
        if self.comp_enabled:
            local -= self._comp_at(tor, t)
        return quantize(local + noise, self.res)

    def _comp_at(self, tor: int, t: int) -> int:
        rate = int(self.comp_rate[tor])
        if rate == 0:
            return 0
        return div_round_half_away((t - self.t_op) * rate, self.u_ps)

    def _emission_time(self, parent: int, boundary_ps: int) -> int:
        """True time at which the parent's local clock crosses the believed
        slice boundary plus the guard offset (one inversion step, anchored
        at the boundary)."""
        err = self.arr.local_time(parent, boundary_ps) - boundary_ps
        if self.comp_enabled:
            err -= self._comp_at(parent, boundary_ps)
        return boundary_ps + self.guard_ps - err

    # -- exchanges ------------------------------------------------------------

    def _leg_depart(self, ready: int, flight: int, slice_end: int | None):
        if slice_end is None or ready + flight <= slice_end:
            return ready, flight, 0
        detour = (
            self.cfg.forwarding_ps
            + 2 * flight
        )
        return ready, detour, 1

    def _run_single(self, act: _Action, t_star: int, b: int, slice_end: int):
        wait = self.traffic.extra_delay_ps(t_star)
        depart = t_star + wait
        arr_t = depart + act.flight_ps
        if depart < b or arr_t > slice_end:
            self.stats["missed_window"] += 1
            return None
        t1p = self._tx_stamp(act.parent, act.ocs, t_star)
        t1c = self._rx_stamp(act.child, act.ocs, arr_t)
        raw = t1c - act.profiled_delay_ps - t1p
        return raw - act.correction_ps, arr_t

    def _run_triple(self, act: _Action, t_star: int, b: int, slice_end: int | None):
        cfg = self.cfg
        flight = act.flight_ps
        wait1 = self.traffic.extra_delay_ps(t_star)
        dep1, fl1, d1 = self._leg_depart(t_star + wait1, flight, slice_end)
        if slice_end is not None and (dep1 < b):
            self.stats["missed_window"] += 1
            return None
        t1p = self._tx_stamp(act.parent, act.ocs, t_star)
        arr1 = dep1 + fl1
        t1c = self._rx_stamp(act.child, act.ocs, arr1)
        ready2 = arr1 + cfg.processing_ps
        wait2 = self.traffic.extra_delay_ps(ready2)
        dep2, fl2, d2 = self._leg_depart(ready2 + wait2, flight, slice_end)
        t2c = self._tx_stamp(act.child, act.ocs, ready2)
        arr2 = dep2 + fl2
        t2p = self._rx_stamp(act.parent, act.ocs, arr2)
        ready3 = arr2 + cfg.processing_ps
        wait3 = self.traffic.extra_delay_ps(ready3)
        dep3, fl3, d3 = self._leg_depart(ready3 + wait3, flight, slice_end)
        arr3 = dep3 + fl3
        deferred = (d1 + d2 + d3) > 0
        if deferred:
            self.stats["deferred"] += 1
        delay = div_round_half_away((t2p - t1p) - (t2c - t1c), 2)
        raw = t1c - delay - t1p
        return raw - act.correction_ps, arr3

    # -- failure script --------------------------------------------------------

    def _apply_script_event(self, ev: FailureEvent, now: int) -> None:
        if ev.kind == "tor":
            count = max(1, round(ev.fraction * self.n))
            pool = [i for i in range(1, self.n) if self.alive[i]]
            victims = []
            while len(victims) < min(count, len(pool)):
                cand = pool[rng.raw(self._script_key, self._script_ctr) % len(pool)]
                self._script_ctr += 1
                if cand not in victims:
                    victims.append(cand)
            for v in victims:
                self.alive[v] = False
                self.truth.failed_tors.add(v)
            self.log.event(now, "failure-tor", ",".join(map(str, sorted(victims))))
        elif ev.kind == "link":
            links = [(t, k) for t in range(self.n) for k in range(self.cfg.uplinks)]
            count = max(1, round(ev.fraction * len(links)))
            victims = []
            while len(victims) < count:
                cand = links[rng.raw(self._script_key, self._script_ctr) % len(links)]
                self._script_ctr += 1
                if cand not in victims:
                    victims.append(cand)
            self.truth.failed_uplinks.update(victims)
            self.log.event(now, "failure-link", f"count={len(victims)}")
        elif ev.kind == "ocs":
            k = ev.index if ev.index >= 0 else 0
            self.truth.failed_ocses.add(k)
            self.log.event(now, "failure-ocs", f"ocs={k}")
        elif ev.kind == "cooling":
            for i in range(1, self.n):
                clk = self.world.clocks[i]
                shift = round(clk.temp_coeff_uppm_per_c * ev.delta_c)
                self.arr.shift_median(i, shift)
                trig = clk.set_temperature(clk.temperature_c + ev.delta_c)
                if trig is not None and self.strategy == "drift-aware":
                    self.sessions[i] = ReprofileSession(
                        tor=i,
                        n=self.cfg.profile_samples,
                        cycle_duration_ps=self.spc * self.u_ps,
                        slice_duration_ps=self.u_ps,
                    )
            self.log.event(now, "failure-cooling", f"delta_c={ev.delta_c}")
            if self.strategy == "drift-aware":
                self.log.event(now, "reprofile-start", f"tors={self.n - 1}")
        elif ev.kind == "planner":
            self.planner_alive = False
            self.log.event(now, "failure-planner", "primary")
        elif ev.kind == "master":
            self.alive[0] = False
            self.truth.failed_tors.add(0)
            if self.planner is not None:
                self.planner.roots = (self.cfg.backup_master,)
                self.planner.dirty = True
            self.log.event(now, "failure-master", "")

    # -- recovery ----------------------------------------------------------------

    def _note_miss(self, act: _Action, s: int, now: int) -> None:
        key = (act.child, s)
        streak = self.miss_streak.get(key, 0) + 1
        self.miss_streak[key] = streak
        if streak == MISS_LIMIT and self.planner is not None:
            lo, hi = min(act.parent, act.child), max(act.parent, act.child)
            self.planner.pending_links.add((lo, hi, act.ocs))
            self.planner.dirty = True
            self.log.event(now, "failure-report", f"link={lo}-{hi}@{act.ocs}")
            sub = None
            if act.backup >= 0 and self.alive[act.backup]:
                sub = self.planner._resolve(act.child, act.backup, NO_BACKUP, s,
                                            self.planner.pair_ocs)
            self.substitutions[key] = sub
            self.patched.clear()
            self.log.event(
                now,
                "backup-activated",
                f"child={act.child} slice={s} backup={act.backup if sub else -1}",
            )

    # -- main loop ------------------------------------------------------------------

    def run(self, cycles: int | None = None) -> MetricsLog:
        cfg = self.cfg
        cycles = cycles or cfg.cycles
        total = cycles * self.spc
        u = self.u_ps
        sample_stride = cfg.sample_stride if cfg.sample_stride > 0 else max(1, total // 256)
        chunk = 256
        errbuf = np.zeros((chunk, self.n), dtype=np.int64)
        alivebuf = np.zeros((chunk, self.n), dtype=bool)
        buf_rows = 0
        script_idx = 0
        batch_slices = self.planner.batch_slices if self.planner else 0
        for m in range(total):
            s = m % self.spc
            b = self.t_op + m * u
            slice_end = b + u
            if s == 0:
                cycle = m // self.spc
                while script_idx < len(self.script) and self.script[script_idx].at_cycle <= cycle:
                    self._apply_script_event(self.script[script_idx], b)
                    script_idx += 1
                if not self.planner_alive and self.planner_active == "primary":
                    self.keepalive_missed += 1
                    self.log.event(b, "keepalive-miss", str(self.keepalive_missed))
                    if self.keepalive_missed >= KEEPALIVE_MISSES:
                        self.planner_active = "backup"
                        self.log.event(b, "planner-failover", "backup active")
            if self.planner is not None and m > 0 and m % batch_slices == 0:
                if self.planner_active == "backup" or self.planner_alive:
                    if self.planner.roll_batch(b):
                        self.substitutions.clear()
                        self.miss_streak.clear()
                        self.patched.clear()
            self._run_slice_actions(m, s, b, slice_end)
            self._reprofile_sampling(s, b)
            # end of slice: apply accepted offsets in one step
            for children, offsets in self.apply_queue.pop(m, []):
                self.arr.offset[children] -= offsets
                if self.sessions:
                    for c, off in zip(children.tolist(), offsets.tolist()):
                        sess = self.sessions.get(c)
                        if sess is not None:
                            sess.note_correction(off)
            self.arr.advance_interval()
            err = self.arr.boundary_error()
            if self.comp_enabled:
                self.comp += self.comp_rate
                err = err - self.comp
            np.abs(err, out=err)
            err[0] = 0
            errbuf[buf_rows] = err
            alivebuf[buf_rows] = self.alive
            buf_rows += 1
            if buf_rows == chunk:
                self._flush_errors(errbuf, alivebuf, buf_rows)
                buf_rows = 0
            if cfg.series:
                live = err[self.alive]
                if live.size:
                    sl = np.sort(live)
                    self.log.series.append((
                        m,
                        int(sl[min(sl.size - 1, int(np.ceil(sl.size * 0.5)))]),
                        int(sl[min(sl.size - 1, int(np.ceil(sl.size * 0.999)))]),
                        int(sl[-1]),
                    ))
            if m % sample_stride == 0:
                for tor in range(self.n):
                    if self.alive[tor]:
                        self.log.samples.append((m, tor, int(err[tor])))
        if buf_rows:
            self._flush_errors(errbuf, alivebuf, buf_rows)
        self.log.duration_ps = total * u
        self.log.extra.update(self.stats)
        self.log.extra["bootstrap_max_error_ps"] = self.prep.bootstrap_max_error_ps
        for k, v in self.prep.overhead.items():
            self.log.extra[f"plan_{k}"] = v
        for h in np.nonzero(self.hop_hist_arr)[0].tolist():
            self.log.hop_hist[int(h)] = int(self.hop_hist_arr[h])
        for tor in np.nonzero(self.tor_max_hop_arr)[0].tolist():
            self.log.tor_max_hop[int(tor)] = int(self.tor_max_hop_arr[tor])
        for tor in np.nonzero(self.sync_count_arr)[0].tolist():
            self.log.sync_counts[int(tor)] = int(self.sync_count_arr[tor])
        return self.log

    def _flush_errors(self, errbuf, alivebuf, rows) -> None:
        vals = errbuf[:rows][alivebuf[:rows]]
        ns = (vals + 500) // 1000
        self.log.record_errors_ns(ns)

    def _patched_batch(self, batch_pos: int, s: int) -> SliceBatch:
        """Slice batch with backup-parent substitutions applied."""
        cached = self.patched.get(batch_pos)
        if cached is not None:
            return cached
        actions = self.planner.actions_for(batch_pos)
        out = []
        for act in actions:
            override = self.substitutions.get((act.child, s), "none")
            if override is None:
                continue
            out.append(act if override == "none" else override)
        batch = actions_to_batch(out)
        self.patched[batch_pos] = batch
        return batch

    def _run_slice_actions(self, m: int, s: int, b: int, slice_end: int) -> None:
        strategy = self.strategy
        if strategy == "graham-local":
            return
        if self.planner is not None:
            batch_pos = m % self.planner.batch_slices
            if self.mode == "single":
                if self.substitutions:
                    batch = self._patched_batch(batch_pos, s)
                else:
                    batch = self.planner.batch_for(batch_pos)
                track = self.planner.actions_for(batch_pos)
                self._exec_vector_single(batch, track, m, s, b, slice_end)
                return
            actions = self.planner.actions_for(batch_pos)
            subs = self.substitutions
            for act in actions:
                used = act
                if subs:
                    override = subs.get((act.child, s), "none")
                    if override is None:
                        continue
                    if override != "none":
                        used = override
                self._execute(used, m, s, b, slice_end, single=False,
                              filtered=True, track_miss=act)
        elif self.strawman_actions is not None:
            for act in self.strawman_actions[s]:
                self._execute(act, m, s, b, slice_end, single=False, filtered=False,
                              track_miss=None)
        else:
            # static tree strategies: period-due syncs, no slice windows
            due = np.nonzero(self.next_due < slice_end)[0]
            scalar_leftover = []
            vec_rows = []
            span = 2 * self.cfg.processing_ps + 8 * (
                self.cfg.serialization_ps + self.cfg.cable_max_m * 5000
            )
            for child in due.tolist():
                child = int(child)
                t_sync = max(int(self.next_due[child]), b)
                self.next_due[child] += int(self.periods[child])
                parent, k = self.tree_parent.get(child, (None, None))
                if parent is None:
                    continue
                act = _Action(
                    child, parent, k, self.world.flight_ps(parent, child, k), 0, 0, -1
                )
                if t_sync + span <= slice_end:
                    vec_rows.append((act, t_sync))
                else:
                    scalar_leftover.append((act, t_sync))
            if vec_rows:
                self._exec_vector_triple_static(vec_rows, m)
            for act, t_sync in scalar_leftover:
                self._execute_static(act, m, t_sync)

    def _live_mask(self, batch: SliceBatch, count: int) -> np.ndarray:
        mask = self.alive[batch.parents[:count]] & self.alive[batch.children[:count]]
        if not self.truth.is_empty():
            for i in range(count):
                if mask[i] and not self.truth.is_pair_live(
                    int(batch.parents[i]), int(batch.children[i]), int(batch.ocs[i])
                ):
                    mask[i] = False
        return mask

    def _exec_vector_single(self, batch: SliceBatch, track, m, s, b, slice_end) -> None:
        n_act = len(batch)
        if n_act == 0:
            return
        view = ClockVecView(self.arr)
        live = self._live_mask(batch, n_act)
        if not live.all():
            for i in np.nonzero(~live)[0].tolist():
                self.stats["missed_circuit"] += 1
                orig = track[i] if i < len(track) else None
                if orig is not None:
                    self._note_miss(orig, s, b)
            idx = np.nonzero(live)[0]
        else:
            idx = None
        parents = batch.parents if idx is None else batch.parents[idx]
        children = batch.children if idx is None else batch.children[idx]
        ocs = batch.ocs if idx is None else batch.ocs[idx]
        flight = batch.flight if idx is None else batch.flight[idx]
        prof_delay = batch.prof_delay if idx is None else batch.prof_delay[idx]
        delta = batch.delta if idx is None else batch.delta[idx]
        err_p = view.boundary_error_of(parents)
        t_star = (b + self.guard_ps) - err_p
        wait = self.vec_traffic.extra(t_star)
        depart = t_star + wait
        arr_t = depart + flight
        fits = (depart >= b) & (arr_t <= slice_end)
        if not fits.all():
            for i in np.nonzero(~fits)[0].tolist():
                self.stats["missed_window"] += 1
                j = int(i if idx is None else idx[i])
                if j < len(track):
                    self._note_miss(track[j], s, b)
            keep = np.nonzero(fits)[0]
            parents, children, ocs = parents[keep], children[keep], ocs[keep]
            prof_delay, delta = prof_delay[keep], delta[keep]
            t_star, arr_t = t_star[keep], arr_t[keep]
        if len(parents) == 0:
            return
        t1p = vec_quantize(
            view.local_at(parents, t_star) - self.tx_err[parents, ocs], self.res
        )
        noise = rx_draws(self.rx_keys, self.rx_ctr, children, ocs, self.cfg.rx_noise_ps)
        t1c = vec_quantize(view.local_at(children, arr_t) + noise, self.res)
        offsets = t1c - prof_delay - t1p - delta
        # successful arrivals clear the miss bookkeeping
        if self.miss_streak:
            for c in children.tolist():
                self.miss_streak.pop((c, s), None)
        accept = self.filters.offer(children, offsets)
        n_rej = int((~accept).sum())
        if n_rej:
            self.stats["rejected"] += n_rej
        acc_children = children[accept]
        acc_offsets = offsets[accept]
        acc_parents = parents[accept]
        self.stats["executed"] += int(accept.sum())
        self._book_syncs(m, acc_children, acc_parents, acc_offsets)

    def _exec_vector_triple_static(self, rows, m) -> None:
        acts = [a for a, _ in rows]
        batch = actions_to_batch(acts)
        t_sync = np.array([t for _, t in rows], dtype=np.int64)
        n_act = len(batch)
        view = ClockVecView(self.arr)
        live = self._live_mask(batch, n_act)
        if not live.all():
            for i in np.nonzero(~live)[0].tolist():
                self.stats["missed_circuit"] += 1
                self._static_miss(acts[i], int(t_sync[i]))
            keep = np.nonzero(live)[0]
            batch = SliceBatch(*(getattr(batch, f)[keep] for f in (
                "children", "parents", "ocs", "flight", "prof_delay", "delta", "backup")))
            acts = [acts[int(i)] for i in keep]
            t_sync = t_sync[keep]
        if len(batch) == 0:
            return
        parents, children, ocs, flight = (
            batch.parents, batch.children, batch.ocs, batch.flight)
        if self.miss_streak:
            for c in children.tolist():
                self.miss_streak.pop((c, 0), None)
        proc = self.cfg.processing_ps
        wait1 = self.vec_traffic.extra(t_sync)
        dep1 = t_sync + wait1
        t1p = vec_quantize(
            view.local_at(parents, t_sync) - self.tx_err[parents, ocs], self.res
        )
        arr1 = dep1 + flight
        noise1 = rx_draws(self.rx_keys, self.rx_ctr, children, ocs, self.cfg.rx_noise_ps)
        t1c = vec_quantize(view.local_at(children, arr1) + noise1, self.res)
        ready2 = arr1 + proc
        wait2 = self.vec_traffic.extra(ready2)
        dep2 = ready2 + wait2
        t2c = vec_quantize(
            view.local_at(children, ready2) - self.tx_err[children, ocs], self.res
        )
        arr2 = dep2 + flight
        noise2 = rx_draws(self.rx_keys, self.rx_ctr, parents, ocs, self.cfg.rx_noise_ps)
        t2p = vec_quantize(view.local_at(parents, arr2) + noise2, self.res)
        ready3 = arr2 + proc
        wait3 = self.vec_traffic.extra(ready3)
        _ = wait3
        delay = vec_div_half_away((t2p - t1p) - (t2c - t1c), 2)
        offsets = t1c - delay - t1p
        if self.sundial_filters is not None:
            accept = self.sundial_filters.offer(children, offsets)
            n_rej = int((~accept).sum())
            if n_rej:
                self.stats["rejected"] += n_rej
        else:
            accept = np.ones(len(children), dtype=bool)
        self.stats["executed"] += int(accept.sum())
        self._book_syncs(m, children[accept], parents[accept], offsets[accept])

    def _book_syncs(self, m, children, parents, offsets) -> None:
        """Two-phase bookkeeping: hops read pre-slice values; offsets apply
        at the end of the slice."""
        if len(children) == 0:
            return
        hops_new = self.hops[parents] + 1
        self.hops[children] = hops_new
        np.add.at(self.hop_hist_arr, np.minimum(hops_new, 1023), 1)
        np.maximum.at(self.tor_max_hop_arr, children, hops_new)
        np.add.at(self.sync_count_arr, children, 1)
        self.apply_queue.setdefault(m, []).append((children, offsets))

    def _static_miss(self, act: _Action, t_sync: int) -> None:
        if self.strategy != "sundial-like":
            return
        key = (act.child, 0)
        streak = self.miss_streak.get(key, 0) + 1
        self.miss_streak[key] = streak
        if streak >= MISS_LIMIT:
            backup = self.backup_tree.get(act.child)
            if backup is not None and backup != self.tree_parent.get(act.child):
                self.tree_parent[act.child] = backup
                self.log.event(t_sync, "backup-activated",
                               f"child={act.child} parent={backup[0]}")
            self.miss_streak.pop(key, None)

    def _execute(self, act: _Action, m, s, b, slice_end, single, filtered, track_miss):
        if not (self.alive[act.parent] and self.alive[act.child]) or not self.truth.is_pair_live(
            act.parent, act.child, act.ocs
        ):
            self.stats["missed_circuit"] += 1
            if track_miss is not None:
                self._note_miss(track_miss, s, b)
            return
        t_star = self._emission_time(act.parent, b)
        if single:
            res = self._run_single(act, t_star, b, slice_end)
        else:
            res = self._run_triple(act, t_star, b, slice_end)
        if res is None:
            if track_miss is not None:
                self._note_miss(track_miss, s, b)
            return
        offset, completed = res
        if track_miss is not None:
            self.miss_streak.pop((act.child, s), None)
        if filtered and self.filters is not None:
            ok = self.filters.offer(
                np.array([act.child], dtype=np.int64),
                np.array([offset], dtype=np.int64),
            )[0]
            if not ok:
                self.stats["rejected"] += 1
                return
        self.stats["executed"] += 1
        done_slice = max(m, (completed - self.t_op) // self.u_ps)
        self._book_syncs(
            done_slice,
            np.array([act.child], dtype=np.int64),
            np.array([act.parent], dtype=np.int64),
            np.array([offset], dtype=np.int64),
        )

    def _execute_static(self, act: _Action, m: int, t_sync: int) -> None:
        edge_live = (
            self.alive[act.parent]
            and self.alive[act.child]
            and self.truth.is_pair_live(act.parent, act.child, act.ocs)
        )
        if not edge_live:
            self.stats["missed_circuit"] += 1
            self._static_miss(act, t_sync)
            return
        self.miss_streak.pop((act.child, 0), None)
        res = self._run_triple(act, t_sync, t_sync, None)
        offset, completed = res
        if self.sundial_filters is not None:
            ok = self.sundial_filters.offer(
                np.array([act.child], dtype=np.int64),
                np.array([offset], dtype=np.int64),
            )[0]
            if not ok:
                self.stats["rejected"] += 1
                return
        self.stats["executed"] += 1
        done_slice = max(m, (completed - self.t_op) // self.u_ps)
        self._book_syncs(
            done_slice,
            np.array([act.child], dtype=np.int64),
            np.array([act.parent], dtype=np.int64),
            np.array([offset], dtype=np.int64),
        )

    def _reprofile_sampling(self, s: int, b: int) -> None:
        if not self.sessions:
            return
        done = []
        for child, k in self.master_meetings.get(s, ()):
            sess = self.sessions.get(child)
            if sess is None or not self.alive[child]:
                continue
            if not self.truth.is_pair_live(0, child, k):
                continue
            act = _Action(
                child, 0, k, self.world.flight_ps(0, child, k),
                self.planner.delay.delay_ps(0, child, k)
                if self.planner and self.planner.delay.has(0, child, k)
                else self.world.flight_ps(0, child, k),
                self.planner.corrections.delta_or_zero(0, child, k) if self.planner else 0,
                -1,
            )
            t_star = self._emission_time(0, b)
            res = self._run_single(act, t_star, b, b + self.u_ps)
            if res is None:
                continue
            offset, _ = res
            if sess.add_offset(offset):
                done.append(child)
        for child in done:
            sess = self.sessions.pop(child)
            new_d = sess.result()
            if self.planner is not None:
                self.planner.raw_drift.set(child, new_d, len(sess.samples))
                quantum = self.cfg.timestamp_resolution_ps
                self.planner.drift.set(
                    child, div_round_half_away(new_d, quantum) * quantum,
                    len(sess.samples),
                )
                self.planner.dirty = True
            self.log.event(b, "reprofile-complete", f"tor={child} d={new_d}")


def run_operational(
    world: World,
    prep: PrepOutputs,
    failure_script: list[FailureEvent] | None = None,
    cycles: int | None = None,
) -> MetricsLog:
    return OperationalRun(world, prep, failure_script).run(cycles)

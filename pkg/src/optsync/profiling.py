"""Preparatory-phase parameter profiling and live re-profiling.

Drift profiling holds a direct circuit between each ToR and the master and
repeats sync exchanges at a fixed spacing; the drift per time slice is the
median of consecutive-offset differences rescaled from the sampling spacing
to the slice duration.  Spacings of several optical cycles are used so that
nanosecond-quantized timestamps still resolve picosecond-per-slice rates.

Delay profiling measures each ToR-port pair with repeated triple exchanges
and stores the median.  The stored value deliberately keeps the TX-bias
term (e_a + e_b)/2: the correction table consumes exactly that bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import median_low

import numpy as np

from . import rng
from .clocks import ClockState, PortModel, div_round_half_away, quantize
from .errors import CircuitLost, MissingProfile


def _int_median(values: list[int]) -> int:
    """Median with deterministic integer output (mean of the middle pair,
    rounded half away from zero, for even counts)."""
    vals = sorted(values)
    n = len(vals)
    if n == 0:
        raise ValueError("median of empty sample set")
    mid = n // 2
    if n % 2:
        return vals[mid]
    return div_round_half_away(vals[mid - 1] + vals[mid], 2)


@dataclass
class DriftProfile:
    """Per-ToR median drift per time slice, signed picoseconds."""

    slice_duration_ps: int
    d_ps: dict[int, int] = field(default_factory=dict)
    sample_count: dict[int, int] = field(default_factory=dict)

    def set(self, tor: int, d_ps: int, n: int) -> None:
        self.d_ps[tor] = d_ps
        self.sample_count[tor] = n

    def get(self, tor: int) -> int:
        if tor not in self.d_ps:
            raise MissingProfile(f"no drift profile for ToR {tor}")
        return self.d_ps[tor]

    def as_array(self, num_tors: int) -> np.ndarray:
        out = np.zeros(num_tors, dtype=np.int64)
        for tor in range(num_tors):
            out[tor] = self.d_ps.get(tor, 0)
        return out

    def serialize(self) -> str:
        lines = [f"{tor} {self.d_ps[tor]}" for tor in sorted(self.d_ps)]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, slice_duration_ps: int) -> "DriftProfile":
        prof = cls(slice_duration_ps)
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tor, d = line.split()
            prof.set(int(tor), int(d), 0)
        return prof


@dataclass
class DelayProfile:
    """Per port-pair median measured propagation delay, picoseconds."""

    delays: dict[tuple[int, int, int], int] = field(default_factory=dict)
    sample_count: dict[tuple[int, int, int], int] = field(default_factory=dict)

    @staticmethod
    def _key(a: int, b: int, ocs: int) -> tuple[int, int, int]:
        return (a, b, ocs) if a < b else (b, a, ocs)

    def set(self, a: int, b: int, ocs: int, delay_ps: int, n: int) -> None:
        self.delays[self._key(a, b, ocs)] = delay_ps
        self.sample_count[self._key(a, b, ocs)] = n

    def has(self, a: int, b: int, ocs: int) -> bool:
        return self._key(a, b, ocs) in self.delays

    def delay_ps(self, a: int, b: int, ocs: int) -> int:
        key = self._key(a, b, ocs)
        if key not in self.delays:
            raise MissingProfile(f"no delay profile for ports {a}:{ocs} - {b}:{ocs}")
        return self.delays[key]

    def serialize(self) -> str:
        lines = [
            f"{a}:{k} {b}:{k} {self.delays[(a, b, k)]}"
            for a, b, k in sorted(self.delays)
        ]
        return "\n".join(lines) + "\n"


def drift_samples_to_slice(
    offsets: list[int], interval_ps: int, slice_duration_ps: int, stride: int = 1
) -> list[int]:
    """Offset differences over `stride` exchanges, rescaled to one slice.

    A stride above 1 spreads each difference over several sampling
    intervals, so timestamp quantization (1 ns) stops flooring out drift
    rates far below a nanosecond per slice.
    """
    span = interval_ps * stride
    return [
        div_round_half_away((offsets[i + stride] - offsets[i]) * slice_duration_ps, span)
        for i in range(len(offsets) - stride)
    ]


def _vec_quantize(arr: np.ndarray, resolution_ps: int) -> None:
    """In-place quantization matching clocks.quantize (half away from zero)."""
    if resolution_ps <= 1:
        return
    mag = np.abs(arr)
    q, r = np.divmod(mag, resolution_ps)
    q += 2 * r >= resolution_ps
    q *= resolution_ps
    arr[:] = np.where(arr < 0, -q, q)


def profile_drift(
    child_clock: ClockState,
    master_clock: ClockState,
    child_port: PortModel,
    master_port: PortModel,
    flight_ps: int,
    n: int,
    interval_ps: int,
    slice_duration_ps: int,
    start_ps: int,
    circuit_live_until_ps: int | None = None,
    stride: int = 1,
) -> tuple[int, list[int]]:
    """n+1 exchanges on the direct master circuit, median drift per slice.

    Each offset is measured the way the live protocol would (quantized
    stamps, RX noise on the arrival side).  Constant terms -- the path
    flight time and the ports' TX biases -- cancel in consecutive
    differences, so the nominal flight time stands in for a measured delay
    and no correction table is needed this early.
    """
    end = start_ps + n * interval_ps
    if circuit_live_until_ps is not None and end > circuit_live_until_ps:
        raise CircuitLost("master circuit ends before the profiling window")
    res = child_port.resolution_ps
    count = n + 1
    t1_parent = master_clock.local_window(start_ps, count, interval_ps)
    t1_parent -= master_port.tx_error_ps
    _vec_quantize(t1_parent, master_port.resolution_ps)
    t1_child = child_clock.local_window(start_ps + flight_ps, count, interval_ps)
    t1_child += rng.uniform_array(
        child_port.rx_key, child_port.rx_counter, count, child_port.rx_noise_ps
    )
    child_port.rx_counter += count
    _vec_quantize(t1_child, res)
    offsets = (t1_child - flight_ps - t1_parent).tolist()
    samples = drift_samples_to_slice(offsets, interval_ps, slice_duration_ps, stride)
    return _int_median(samples), samples


def profile_delay(
    clock_a: ClockState,
    clock_b: ClockState,
    port_a: PortModel,
    port_b: PortModel,
    flight_ps: int,
    n: int,
    spacing_ps: int,
    start_ps: int,
    turnaround_ps: int = 1_000_000,
) -> tuple[int, list[int]]:
    """n triple exchanges; median measured delay (bias kept, see module doc)."""
    res = port_a.resolution_ps
    t1_a = clock_a.local_window(start_ps, n, spacing_ps) - port_a.tx_error_ps
    _vec_quantize(t1_a, res)
    arr1 = start_ps + flight_ps
    t1_b = clock_b.local_window(arr1, n, spacing_ps)
    t1_b += rng.uniform_array(port_b.rx_key, port_b.rx_counter, n, port_b.rx_noise_ps)
    port_b.rx_counter += n
    _vec_quantize(t1_b, res)
    send2 = arr1 + turnaround_ps
    t2_b = clock_b.local_window(send2, n, spacing_ps) - port_b.tx_error_ps
    _vec_quantize(t2_b, res)
    arr2 = send2 + flight_ps
    t2_a = clock_a.local_window(arr2, n, spacing_ps)
    t2_a += rng.uniform_array(port_a.rx_key, port_a.rx_counter, n, port_a.rx_noise_ps)
    port_a.rx_counter += n
    _vec_quantize(t2_a, res)
    half = (t2_a - t1_a) - (t2_b - t1_b)
    samples = [div_round_half_away(int(v), 2) for v in half]
    return _int_median(samples), samples


@dataclass
class ReprofileSession:
    """Live re-profiling of one ToR's drift, one sample per optical cycle.

    The network keeps syncing the ToR while samples accumulate, so each
    raw offset difference is de-contaminated by adding back the corrections
    applied during that cycle.
    """

    tor: int
    n: int
    cycle_duration_ps: int
    slice_duration_ps: int
    last_offset: int | None = None
    corrections_since: int = 0
    samples: list[int] = field(default_factory=list)

    def note_correction(self, applied_ps: int) -> None:
        self.corrections_since += applied_ps

    def add_offset(self, offset_ps: int) -> bool:
        """Feed one per-cycle offset measurement; True when n samples are in."""
        if self.last_offset is not None:
            raw = offset_ps - self.last_offset + self.corrections_since
            self.samples.append(
                div_round_half_away(
                    raw * self.slice_duration_ps, self.cycle_duration_ps
                )
            )
        self.last_offset = offset_ps
        self.corrections_since = 0
        return len(self.samples) >= self.n

    def result(self) -> int:
        return _int_median(self.samples)


def reprofile_on_trigger(
    trigger,
    session_factory,
    threshold_c: float = 5.0,
) -> ReprofileSession | None:
    """Open a re-profiling session for a trigger, or ignore sub-threshold
    temperature drifts (the trigger itself is only emitted above threshold,
    so this mainly guards replayed event streams)."""
    if trigger is None or abs(trigger.delta_c) < threshold_c:
        return None
    return session_factory(trigger.tor_id)


__all__ = [
    "DriftProfile",
    "DelayProfile",
    "profile_drift",
    "profile_delay",
    "drift_samples_to_slice",
    "ReprofileSession",
    "reprofile_on_trigger",
    "median_low",
]

"""Per-device clock and port timestamping models.

All time is integer picoseconds since the simulation epoch (SimTime).  A
device clock maps true time t to a local reading

    local(t) = t + offset_correction + drift(t)

where drift integrates a piecewise-constant rate: within interval k (fixed
length ``interval_ps``) the rate is the device's stable median plus a
deviation drawn uniformly from [-variance, +variance] on the clock's own
counter-based stream (interval index = counter, see :mod:`optsync.rng`).
Rates are held in micro-ppm, i.e. parts per 10^12, so every intermediate
value is an exact integer; division by 10^12 happens once, at read time,
rounded half-up.

Reported timestamps are quantized to the port resolution (1 ns by default).
A port's TX path carries a fixed bias ``tx_error_ps``: the written TX stamp
is taken before the packet actually leaves, so the reported value is
``local(t) - tx_error_ps`` for a departure at t.  RX stamps are accurate up
to a bounded uniform measurement noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng

PS_PER_SECOND = 10**12
RATE_DENOM = 10**12  # micro-ppm = parts per 10^12
HALF_DENOM = RATE_DENOM // 2

DEFAULT_RESOLUTION_PS = 1000
DEFAULT_TEMP_TRIGGER_C = 5.0


def uppm(ppm: float) -> int:
    """Convert a ppm rate to integer micro-ppm."""
    return round(ppm * 1_000_000)


def div_round_half_away(num: int, den: int) -> int:
    """Integer division rounding half away from zero. den must be > 0."""
    if num >= 0:
        q, r = divmod(num, den)
        return q + 1 if 2 * r >= den else q
    q, r = divmod(-num, den)
    return -(q + 1) if 2 * r >= den else -q


def quantize(value_ps: int, resolution_ps: int) -> int:
    """Quantize to the nearest multiple of resolution_ps (half away from zero)."""
    if resolution_ps <= 1:
        return value_ps
    return div_round_half_away(value_ps, resolution_ps) * resolution_ps


@dataclass
class ReprofileTrigger:
    """Emitted when a temperature step is large enough to invalidate the
    profiled drift median."""

    tor_id: int
    delta_c: float
    new_temperature_c: float


@dataclass
class ClockState:
    """One device clock.

    The cursor fields cache the exact accumulated drift at the boundary of
    interval ``_k`` as a floor divmod pair (_q ps, _r / 10^12 ps).  Reads at
    or past the cursor advance it; reads behind it replay the stream from
    zero (deviations are counter-based, so replay is exact).
    """

    tor_id: int
    drift_median_uppm: int = 0
    drift_variance_uppm: int = 0
    interval_ps: int = 300_000_000
    offset_correction_ps: int = 0
    temperature_c: float = 25.0
    temp_coeff_uppm_per_c: int = 0
    seed_key: int = 0

    _k: int = field(default=0, repr=False)
    _q: int = field(default=0, repr=False)
    _r: int = field(default=0, repr=False)

    def deviation_uppm(self, interval_index: int) -> int:
        return rng.uniform(self.seed_key, interval_index, self.drift_variance_uppm)

    def _rate_uppm(self, interval_index: int) -> int:
        return self.drift_median_uppm + self.deviation_uppm(interval_index)

    def _advance_to(self, k: int) -> None:
        if k < self._k:
            self._k = 0
            self._q = 0
            self._r = 0
        count = k - self._k
        if count > 32:
            # bulk fold: remainders add associatively, so one shared carry
            # at the end replaces the per-interval loop
            while count > 0:
                step = min(count, 1 << 20)
                devs = rng.uniform_array(self.seed_key, self._k, step, self.drift_variance_uppm)
                num = (devs + self.drift_median_uppm) * self.interval_ps
                q, r = np.divmod(num, RATE_DENOM)
                total_r = self._r + int(r.sum())
                self._q += int(q.sum()) + total_r // RATE_DENOM
                self._r = total_r % RATE_DENOM
                self._k += step
                count -= step
            return
        while self._k < k:
            num = self.interval_ps * self._rate_uppm(self._k)
            q, r = divmod(num, RATE_DENOM)
            self._q += q
            self._r += r
            if self._r >= RATE_DENOM:
                self._q += 1
                self._r -= RATE_DENOM
            self._k += 1

    def drift_ps(self, t: int) -> int:
        """Exact accumulated drift at true time t, rounded half-up."""
        k, rem = divmod(t, self.interval_ps)
        self._advance_to(k)
        partial = self._r + rem * self._rate_uppm(k)
        q, r = divmod(partial, RATE_DENOM)
        return self._q + q + (1 if 2 * r >= RATE_DENOM else 0)

    def local_time(self, t: int) -> int:
        """Local clock reading at true time t (picoseconds)."""
        if t < 0:
            raise ValueError("true time must be non-negative")
        return t + self.offset_correction_ps + self.drift_ps(t)

    def apply_offset(self, offset_ps: int) -> None:
        """Apply a measured offset (local minus parent); steps the clock back
        toward the parent, no slewing."""
        self.offset_correction_ps -= offset_ps

    def set_temperature(
        self, new_temp_c: float, trigger_threshold_c: float = DEFAULT_TEMP_TRIGGER_C
    ) -> ReprofileTrigger | None:
        """Shift the drift median by the configured coefficient; return a
        re-profiling trigger when the step exceeds the threshold."""
        delta = new_temp_c - self.temperature_c
        self.temperature_c = new_temp_c
        self.drift_median_uppm += round(self.temp_coeff_uppm_per_c * delta)
        if abs(delta) >= trigger_threshold_c:
            return ReprofileTrigger(self.tor_id, delta, new_temp_c)
        return None

    def drift_window(self, t0: int, count: int, step_ps: int) -> np.ndarray:
        """Drift at t0 + j*step for j in range(count), as int64 ps.

        Vector path for profiling windows; bit-identical to drift_ps().
        Callers keep windows short enough that the local numerators fit
        int64 (count * step * |rate| < 2^63).
        """
        ts = t0 + np.arange(count, dtype=np.int64) * step_ps
        ks = ts // self.interval_ps
        rems = ts - ks * self.interval_ps
        k0 = int(ks[0])
        k_end = int(ks[-1])
        self._advance_to(k0)
        base_q, base_r = self._q, self._r
        n_int = k_end - k0 + 1
        devs = rng.uniform_array(self.seed_key, k0, n_int, self.drift_variance_uppm)
        rates = devs + self.drift_median_uppm
        # cumulative numerator (relative to the k0 boundary) at each boundary
        incr = rates * self.interval_ps
        cum = np.zeros(n_int, dtype=np.int64)
        if n_int > 1:
            np.cumsum(incr[:-1], out=cum[1:])
        rel = cum[ks - k0] + rems * rates[ks - k0]
        total = base_r + rel
        q, r = np.divmod(total, RATE_DENOM)
        return base_q + q + (2 * r >= RATE_DENOM)

    def local_window(self, t0: int, count: int, step_ps: int) -> np.ndarray:
        return (
            t0
            + np.arange(count, dtype=np.int64) * step_ps
            + self.offset_correction_ps
            + self.drift_window(t0, count, step_ps)
        )


@dataclass
class PortModel:
    """One switch port's timestamping behaviour.

    tx_error_ps is the port-specific TX bias e: the reported TX stamp for a
    packet leaving at true time t is quantize(local(t) - e).  With this
    convention a measured two-way delay reads high by (e_a + e_b)/2 and a
    measured offset by (e_a - e_b)/2, which is what the correction table
    cancels.
    """

    tor_id: int
    port_index: int
    tx_error_ps: int = 0
    rx_noise_ps: int = 0
    resolution_ps: int = DEFAULT_RESOLUTION_PS
    rx_key: int = 0
    rx_counter: int = field(default=0, repr=False)

    def take_tx_timestamp(self, clock: ClockState, t: int) -> int:
        if clock.tor_id != self.tor_id:
            raise ValueError("port does not belong to this clock's ToR")
        return quantize(clock.local_time(t) - self.tx_error_ps, self.resolution_ps)

    def take_rx_timestamp(self, clock: ClockState, t: int) -> int:
        if clock.tor_id != self.tor_id:
            raise ValueError("port does not belong to this clock's ToR")
        noise = rng.uniform(self.rx_key, self.rx_counter, self.rx_noise_ps)
        self.rx_counter += 1
        return quantize(clock.local_time(t) + noise, self.resolution_ps)


class ClockArray:
    """Struct-of-arrays view over all ToR clocks for the hot simulation loop.

    Maintains the exact (q, r) drift accumulation per ToR at the current
    interval boundary, advanced one interval at a time.  Scalar reads inside
    the current interval agree bit-for-bit with ClockState.
    """

    def __init__(self, clocks: list[ClockState]):
        self.n = len(clocks)
        self.clocks = clocks
        self.interval_ps = clocks[0].interval_ps
        self.offset = np.array([c.offset_correction_ps for c in clocks], dtype=np.int64)
        self.median = np.array([c.drift_median_uppm for c in clocks], dtype=np.int64)
        self.variance = np.array([c.drift_variance_uppm for c in clocks], dtype=np.int64)
        self.keys = np.array([c.seed_key for c in clocks], dtype=np.uint64)
        self.q = np.zeros(self.n, dtype=np.int64)
        self.r = np.zeros(self.n, dtype=np.int64)
        self.k = 0
        self.dev = rng.uniform_keys_array(self.keys, 0, self.variance)
        self.rate = self.median + self.dev

    def advance_interval(self) -> None:
        """Fold the current interval into (q, r) and load the next one."""
        num = self.rate * self.interval_ps
        q, r = np.divmod(num, RATE_DENOM)
        self.q += q
        self.r += r
        carry = self.r >= RATE_DENOM
        self.q += carry
        self.r -= carry * RATE_DENOM
        self.k += 1
        self.dev = rng.uniform_keys_array(self.keys, self.k, self.variance)
        self.rate = self.median + self.dev

    def advance_many(self, count: int) -> None:
        """Fast-forward the cursor by `count` intervals (bulk fold with one
        shared carry per chunk; identical to repeated advance_interval)."""
        chunk_max = 8192
        while count > 0:
            step = min(count, chunk_max)
            ctrs = np.arange(self.k, self.k + step, dtype=np.uint64)
            z = self.keys[:, None] + ctrs[None, :] * np.uint64(rng.GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(rng.MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(rng.MIX2)
            z = z ^ (z >> np.uint64(31))
            span = (2 * self.variance + 1).astype(np.uint64)
            devs = (z % span[:, None]).astype(np.int64) - self.variance[:, None]
            devs[self.variance == 0] = 0
            num = (devs + self.median[:, None]) * self.interval_ps
            q, r = np.divmod(num, RATE_DENOM)
            total_r = self.r + r.sum(axis=1)
            self.q += q.sum(axis=1) + total_r // RATE_DENOM
            self.r = total_r % RATE_DENOM
            self.k += step
            count -= step
        self.dev = rng.uniform_keys_array(self.keys, self.k, self.variance)
        self.rate = self.median + self.dev

    def boundary_drift(self) -> np.ndarray:
        """Drift of every clock at the current interval boundary, rounded."""
        return self.q + (2 * self.r >= RATE_DENOM)

    def boundary_error(self) -> np.ndarray:
        """Signed clock error (local - true) of every clock at the boundary."""
        return self.offset + self.boundary_drift()

    def local_time(self, i: int, t: int) -> int:
        """Local reading of clock i at true time t.

        Reads inside the current interval are exact.  Future intervals are
        folded forward on the fly (counter-based deviations, cursor left in
        place).  Reads slightly before the current boundary extrapolate the
        current interval's rate backwards: only clocks that run ahead look
        there, by no more than their own error, so the slack is sub-ps.
        """
        k = t // self.interval_ps
        q0 = int(self.q[i])
        if k >= self.k + 1:
            r0 = int(self.r[i])
            med = int(self.median[i])
            var = int(self.variance[i])
            key = int(self.keys[i])
            rate = int(self.rate[i])
            for j in range(self.k, k):
                dq, dr = divmod(self.interval_ps * rate, RATE_DENOM)
                q0 += dq
                r0 += dr
                if r0 >= RATE_DENOM:
                    q0 += 1
                    r0 -= RATE_DENOM
                rate = med + rng.uniform(key, j + 1, var)
            partial = r0 + (t - k * self.interval_ps) * rate
        else:
            if k < self.k - 1:
                raise ValueError("read too far behind the clock cursor")
            rem = t - self.k * self.interval_ps  # may be slightly negative
            partial = int(self.r[i]) + rem * int(self.rate[i])
        q, r = divmod(partial, RATE_DENOM)
        drift = q0 + q + (1 if 2 * r >= RATE_DENOM else 0)
        return t + int(self.offset[i]) + drift

    def signed_error(self, i: int, t: int) -> int:
        return self.local_time(i, t) - t

    def apply_offset(self, i: int, offset_ps: int) -> None:
        self.offset[i] -= offset_ps

    def shift_median(self, i: int, delta_uppm: int) -> None:
        """Drift-rate step (e.g. a temperature change), effective from the
        current interval onward."""
        self.median[i] += delta_uppm
        self.rate[i] = self.median[i] + self.dev[i]

"""Vectorized per-slice exchange execution.

The hot loops of a large run execute one slice's worth of exchanges as
numpy int64 batches.  Every quantity is computed with the exact integer
recurrences of the scalar path (clocks, quantization, counter-based noise,
filter windows), in the same order, so scalar and vector execution of the
same slice produce bit-identical results; tests assert that equivalence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .clocks import RATE_DENOM

NS = 1000


def vec_quantize(arr: np.ndarray, resolution_ps: int) -> np.ndarray:
    """Quantize to the nearest multiple (half away from zero), int64."""
    if resolution_ps <= 1:
        return arr
    mag = np.abs(arr)
    q, r = np.divmod(mag, resolution_ps)
    q += 2 * r >= resolution_ps
    q *= resolution_ps
    return np.where(arr < 0, -q, q)


def vec_div_half_away(num: np.ndarray, den: int) -> np.ndarray:
    mag = np.abs(num)
    q, r = np.divmod(mag, den)
    q += 2 * r >= den
    return np.where(num < 0, -q, q)


def vec_div_half_away_vecden(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    mag = np.abs(num)
    q, r = np.divmod(mag, den)
    q += 2 * r >= den
    return np.where(num < 0, -q, q)


@dataclass
class SliceBatch:
    """One slice's resolved actions as parallel arrays."""

    children: np.ndarray  # int64
    parents: np.ndarray
    ocs: np.ndarray
    flight: np.ndarray
    prof_delay: np.ndarray
    delta: np.ndarray
    backup: np.ndarray

    def __len__(self) -> int:
        return len(self.children)


class ClockVecView:
    """Exact vector reads of a ClockArray inside its current interval."""

    def __init__(self, arr):
        self.arr = arr

    def local_at(self, tors: np.ndarray, times: np.ndarray) -> np.ndarray:
        """local(tor_i, t_i); t_i in (or just below) the current interval."""
        a = self.arr
        boundary = a.k * a.interval_ps
        rem = times - boundary
        partial = a.r[tors] + rem * a.rate[tors]
        q, r = np.divmod(partial, RATE_DENOM)
        drift = a.q[tors] + q + (2 * r >= RATE_DENOM)
        return times + a.offset[tors] + drift

    def boundary_error_of(self, tors: np.ndarray) -> np.ndarray:
        a = self.arr
        drift = a.q[tors] + (2 * a.r[tors] >= RATE_DENOM)
        return a.offset[tors] + drift


class VecFilter:
    """Array-backed twin of protocol.OffsetFilter (same accept rule, ring
    window, and stale-window escape)."""

    def __init__(self, n: int, window_len: int, margin_ps: int):
        self.n = n
        self.w = window_len
        self.margin = margin_ps
        self.buf = np.zeros((n, window_len), dtype=np.int64)
        self.lens = np.zeros(n, dtype=np.int64)
        self.pos = np.zeros(n, dtype=np.int64)
        self.sums = np.zeros(n, dtype=np.int64)
        self.streak = np.zeros(n, dtype=np.int64)

    def seed(self, tor: int, value: int) -> None:
        self.buf[tor, 0] = value
        self.lens[tor] = 1
        self.pos[tor] = 1 % self.w
        self.sums[tor] = value

    def offer(self, tors: np.ndarray, cands: np.ndarray) -> np.ndarray:
        """Vector offer; returns accept mask and updates state."""
        lens = self.lens[tors]
        sums = self.sums[tors]
        means = np.zeros_like(cands)
        nz = lens > 0
        if np.any(nz):
            means[nz] = vec_div_half_away_vecden(sums[nz], lens[nz])
        accept = (lens == 0) | (np.abs(cands - means) <= self.margin)
        rej = tors[~accept]
        self.streak[rej] += 1
        stale = rej[self.streak[rej] >= 2 * self.w]
        if stale.size:
            self.lens[stale] = 0
            self.sums[stale] = 0
            self.pos[stale] = 0
            self.streak[stale] = 0
        acc = tors[accept]
        vals = cands[accept]
        self.streak[acc] = 0
        full = self.lens[acc] == self.w
        p = self.pos[acc]
        old = self.buf[acc, p]
        self.sums[acc] += vals - np.where(full, old, 0)
        self.buf[acc, p] = vals
        self.pos[acc] = (p + 1) % self.w
        self.lens[acc] = np.minimum(self.lens[acc] + 1, self.w)
        return accept


class VecTraffic:
    """Vector twin of engine.TrafficNoise, consuming the same counter
    stream in submission order."""

    def __init__(self, traffic):
        self.t = traffic

    def extra(self, times: np.ndarray) -> np.ndarray:
        tr = self.t
        n = len(times)
        if tr.load == 0.0 and not tr.bursts:
            return np.zeros(n, dtype=np.int64)
        wait = np.zeros(n, dtype=np.int64)
        if tr.bursts:
            from .engine import BURST_LEN_PS, BURST_PERIOD_PS, PACKET_9000B_PS

            wait += np.where(times % BURST_PERIOD_PS < BURST_LEN_PS, PACKET_9000B_PS, 0)
        if tr._load_u64:
            from .engine import PACKET_1500B_PS

            draws = rng.raw_array(tr.key, tr.counter, n)
            wait += np.where(draws < np.uint64(tr._load_u64), PACKET_1500B_PS, 0)
        tr.counter += n
        return wait


def rx_draws(rx_keys, rx_ctr, tors, ocs, noise_ps: int) -> np.ndarray:
    """Per-port uniform RX noise at each port's current counter; advances
    the counters (at most one draw per port per call)."""
    keys = rx_keys[tors, ocs]
    ctrs = rx_ctr[tors, ocs].astype(np.uint64)
    z = keys + ctrs * np.uint64(rng.GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(rng.MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(rng.MIX2)
    z = z ^ (z >> np.uint64(31))
    rx_ctr[tors, ocs] += 1
    if noise_ps <= 0:
        return np.zeros(len(tors), dtype=np.int64)
    return (z % np.uint64(2 * noise_ps + 1)).astype(np.int64) - noise_ps


def bulk_profile_delays(
    clocks,
    ports,
    pairs: list[tuple[int, int, int]],
    flights: list[int],
    n: int,
    spacing_ps: int,
    start_ps: int,
    turnaround_ps: int,
    resolution_ps: int,
    rx_noise_ps: int,
) -> list[int]:
    """profile_delay for many port pairs at once (same window start).

    Bit-identical to looping profiling.profile_delay over `pairs` in order:
    same clock recurrences, same quantization, and the same per-port RX
    counter consumption (child's n draws, then parent's n draws, per pair).
    Returns the per-pair median measured delay.
    """
    if not pairs:
        return []
    interval = clocks[0].interval_ps
    n_tors = len(clocks)
    k0 = start_ps // interval
    horizon = (start_ps + n * spacing_ps + turnaround_ps + 10_000_000) // interval + 2
    span = int(horizon - k0) + 1
    q0 = np.empty(n_tors, dtype=np.int64)
    r0 = np.empty(n_tors, dtype=np.int64)
    rates = np.empty((n_tors, span), dtype=np.int64)
    cum = np.zeros((n_tors, span), dtype=np.int64)
    for tor, clk in enumerate(clocks):
        clk._advance_to(int(k0))
        q0[tor] = clk._q
        r0[tor] = clk._r
        devs = rng.uniform_array(clk.seed_key, int(k0), span, clk.drift_variance_uppm)
        rates[tor] = devs + clk.drift_median_uppm
        np.cumsum(rates[tor][:-1] * interval, out=cum[tor][1:])
    offsets = np.array([clk.offset_correction_ps for clk in clocks], dtype=np.int64)

    def local(tors: np.ndarray, times: np.ndarray) -> np.ndarray:
        k = times // interval - k0
        rem = times - (k + k0) * interval
        partial = r0[tors, None] + cum[tors, k] + rem * rates[tors, k]
        q, r = np.divmod(partial, RATE_DENOM)
        drift = q0[tors, None] + q + (2 * r >= RATE_DENOM)
        return times + offsets[tors, None] + drift

    def quant(arr: np.ndarray) -> np.ndarray:
        return vec_quantize(arr, resolution_ps)

    def rx2d(tors: np.ndarray, ocs: np.ndarray) -> np.ndarray:
        keys = np.array(
            [np.uint64(ports[(int(t), int(k))].rx_key) for t, k in zip(tors, ocs)],
            dtype=np.uint64,
        )
        ctrs = np.array(
            [ports[(int(t), int(k))].rx_counter for t, k in zip(tors, ocs)],
            dtype=np.uint64,
        )
        z = keys[:, None] + (ctrs[:, None] + np.arange(n, dtype=np.uint64)) * np.uint64(
            rng.GAMMA
        )
        z = (z ^ (z >> np.uint64(30))) * np.uint64(rng.MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(rng.MIX2)
        z = z ^ (z >> np.uint64(31))
        for t, k in zip(tors, ocs):
            ports[(int(t), int(k))].rx_counter += n
        if rx_noise_ps <= 0:
            return np.zeros((len(tors), n), dtype=np.int64)
        return (z % np.uint64(2 * rx_noise_ps + 1)).astype(np.int64) - rx_noise_ps

    a_ids = np.array([a for a, _, _ in pairs], dtype=np.int64)
    b_ids = np.array([b for _, b, _ in pairs], dtype=np.int64)
    k_ids = np.array([k for _, _, k in pairs], dtype=np.int64)
    fl = np.array(flights, dtype=np.int64)
    tx_a = np.array(
        [ports[(int(a), int(k))].tx_error_ps for a, k in zip(a_ids, k_ids)],
        dtype=np.int64,
    )
    tx_b = np.array(
        [ports[(int(b), int(k))].tx_error_ps for b, k in zip(b_ids, k_ids)],
        dtype=np.int64,
    )
    base = start_ps + np.arange(n, dtype=np.int64) * spacing_ps
    t1a = quant(local(a_ids, np.broadcast_to(base, (len(pairs), n))) - tx_a[:, None])
    arr1 = base[None, :] + fl[:, None]
    t1b = quant(local(b_ids, arr1) + rx2d(b_ids, k_ids))
    send2 = arr1 + turnaround_ps
    t2b = quant(local(b_ids, send2) - tx_b[:, None])
    arr2 = send2 + fl[:, None]
    t2a = quant(local(a_ids, arr2) + rx2d(a_ids, k_ids))
    half = (t2a - t1a) - (t2b - t1b)
    samples = vec_div_half_away(half, 2)
    samples.sort(axis=1)
    mid = n // 2
    if n % 2:
        med = samples[:, mid]
    else:
        med = vec_div_half_away(samples[:, mid - 1] + samples[:, mid], 2)
    return [int(v) for v in med]

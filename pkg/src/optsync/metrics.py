"""Run metrics: error histograms, hop counts, events, and CSV emission.

Sync error is recorded per ToR at every slice boundary as |local - master|,
binned at 1 ns into an integer histogram (the full sample set; nothing is
dropped).  samples.csv carries a thinned per-slice dump for inspection; all
percentiles come from the histogram.

Percentile convention (nearest rank, matching an explicit sort): the p-th
percentile of n sorted samples is element min(n - 1, ceil(n * p / 100)),
0-based.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInput

HIST_BINS = 1 << 17  # 1 ns bins up to ~131 us, top bin catches overflow


def percentile_index(n: int, p: float) -> int:
    return min(n - 1, math.ceil(n * p / 100.0))


def percentile_from_sorted(sorted_vals, p: float):
    n = len(sorted_vals)
    if n == 0:
        raise EmptyInput("no samples")
    return sorted_vals[percentile_index(n, p)]


@dataclass
class MetricsLog:
    """Everything one run produces."""

    strategy: str
    seed: int
    slice_duration_ps: int
    hist: np.ndarray = field(default_factory=lambda: np.zeros(HIST_BINS, dtype=np.int64))
    n_samples: int = 0
    hop_hist: dict[int, int] = field(default_factory=dict)
    tor_max_hop: dict[int, int] = field(default_factory=dict)
    sync_counts: dict[int, int] = field(default_factory=dict)
    events: list[tuple[int, str, str]] = field(default_factory=list)
    series: list[tuple[int, int, int, int]] = field(default_factory=list)
    samples: list[tuple[int, int, int]] = field(default_factory=list)
    duration_ps: int = 0
    extra: dict[str, float] = field(default_factory=dict)

    def record_errors_ns(self, errors_ns: np.ndarray) -> None:
        counts = np.bincount(np.minimum(errors_ns, HIST_BINS - 1), minlength=HIST_BINS)
        self.hist += counts
        self.n_samples += int(errors_ns.size)

    def record_hop(self, hop: int, tor: int) -> None:
        self.hop_hist[hop] = self.hop_hist.get(hop, 0) + 1
        if hop > self.tor_max_hop.get(tor, 0):
            self.tor_max_hop[tor] = hop
        self.sync_counts[tor] = self.sync_counts.get(tor, 0) + 1

    def event(self, t_ps: int, kind: str, detail: str = "") -> None:
        self.events.append((t_ps, kind, detail))

    def percentile_ns(self, p: float) -> int:
        if self.n_samples == 0:
            raise EmptyInput("no samples")
        rank = percentile_index(self.n_samples, p)
        cum = np.cumsum(self.hist)
        return int(np.searchsorted(cum, rank + 1))

    def percentile_ps(self, p: float) -> int:
        return self.percentile_ns(p) * 1000

    def max_ns(self) -> int:
        nz = np.nonzero(self.hist)[0]
        if len(nz) == 0:
            raise EmptyInput("no samples")
        return int(nz[-1])

    def merge(self, other: "MetricsLog") -> None:
        self.hist += other.hist
        self.n_samples += other.n_samples
        for h, c in other.hop_hist.items():
            self.hop_hist[h] = self.hop_hist.get(h, 0) + c
        for tor, h in other.tor_max_hop.items():
            if h > self.tor_max_hop.get(tor, 0):
                self.tor_max_hop[tor] = h
        for tor, c in other.sync_counts.items():
            self.sync_counts[tor] = self.sync_counts.get(tor, 0) + c


def pooled(logs: list[MetricsLog], strategy: str) -> MetricsLog:
    out = MetricsLog(strategy, -1, logs[0].slice_duration_ps)
    for lg in logs:
        out.merge(lg)
    return out


@dataclass
class AggregateResult:
    count: int
    p50: int
    p99: int
    p999: int
    max: int
    cdf: list[tuple[int, float]]  # (error_ns, cumulative fraction)
    hop_hist: dict[int, int]


def aggregate(samples_ps, hops: dict[int, int] | None = None) -> AggregateResult:
    """Summary of raw error samples (ps): nearest-rank percentiles and a
    CDF at 1 ns resolution."""
    vals = sorted(int(v) for v in samples_ps)
    if not vals:
        raise EmptyInput("no samples to aggregate")
    n = len(vals)
    ns_vals = np.array([(v + 500) // 1000 for v in vals], dtype=np.int64)
    top = int(ns_vals[-1])
    cdf = []
    for level in range(top + 1):
        frac = float(np.searchsorted(ns_vals, level, side="right")) / n
        cdf.append((level, frac))
    return AggregateResult(
        count=n,
        p50=percentile_from_sorted(vals, 50),
        p99=percentile_from_sorted(vals, 99),
        p999=percentile_from_sorted(vals, 99.9),
        max=vals[-1],
        cdf=cdf,
        hop_hist=dict(hops or {}),
    )


def _writer(path: Path, header_lines: list[str], columns: list[str]):
    fh = path.open("w", newline="")
    for line in header_lines:
        fh.write(line + "\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    return fh, w


def write_run_csvs(
    out_dir: Path,
    scenario: str,
    subruns: list[dict],
    header_lines: list[str],
) -> dict[str, Path]:
    """Emit the documented CSV set for one scenario.

    subruns: [{label, strategy, params: {..}, logs: [MetricsLog per seed]}].
    summary.csv has one row per (subrun, seed) and a pooled row per subrun;
    cdf.csv / hops.csv come from the pooled histograms; series.csv and
    events.csv carry per-seed streams when present.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    p = out_dir / "summary.csv"
    fh, w = _writer(
        p,
        header_lines,
        ["scenario", "subrun", "strategy", "seed", "n_samples",
         "p50_ps", "p99_ps", "p999_ps", "max_ps"],
    )
    for sub in subruns:
        for lg in sub["logs"]:
            w.writerow([
                scenario, sub["label"], lg.strategy, lg.seed, lg.n_samples,
                lg.percentile_ps(50), lg.percentile_ps(99),
                lg.percentile_ps(99.9), lg.max_ns() * 1000,
            ])
        pool = pooled(sub["logs"], sub["logs"][0].strategy)
        w.writerow([
            scenario, sub["label"], pool.strategy, "all", pool.n_samples,
            pool.percentile_ps(50), pool.percentile_ps(99),
            pool.percentile_ps(99.9), pool.max_ns() * 1000,
        ])
    fh.close()
    paths["summary"] = p

    p = out_dir / "cdf.csv"
    fh, w = _writer(p, header_lines, ["subrun", "error_ns", "cum_frac"])
    for sub in subruns:
        pool = pooled(sub["logs"], sub["logs"][0].strategy)
        top = pool.max_ns()
        cum = np.cumsum(pool.hist[: top + 1])
        for level in range(top + 1):
            w.writerow([sub["label"], level, f"{cum[level] / pool.n_samples:.9f}"])
    fh.close()
    paths["cdf"] = p

    p = out_dir / "hops.csv"
    fh, w = _writer(p, header_lines, ["subrun", "scope", "hop", "count"])
    for sub in subruns:
        pool = pooled(sub["logs"], sub["logs"][0].strategy)
        for hop in sorted(pool.hop_hist):
            w.writerow([sub["label"], "action", hop, pool.hop_hist[hop]])
        depth_hist: dict[int, int] = {}
        for _tor, h in pool.tor_max_hop.items():
            depth_hist[h] = depth_hist.get(h, 0) + 1
        for hop in sorted(depth_hist):
            w.writerow([sub["label"], "tor_max", hop, depth_hist[hop]])
    fh.close()
    paths["hops"] = p

    p = out_dir / "events.csv"
    fh, w = _writer(p, header_lines, ["subrun", "seed", "time_ps", "kind", "detail"])
    for sub in subruns:
        for lg in sub["logs"]:
            for t, kind, detail in lg.events:
                w.writerow([sub["label"], lg.seed, t, kind, detail])
    fh.close()
    paths["events"] = p

    if any(lg.series for sub in subruns for lg in sub["logs"]):
        p = out_dir / "series.csv"
        fh, w = _writer(
            p, header_lines, ["subrun", "seed", "slice", "p50_ps", "p999_ps", "max_ps"]
        )
        for sub in subruns:
            for lg in sub["logs"]:
                for row in lg.series:
                    w.writerow([sub["label"], lg.seed, *row])
        fh.close()
        paths["series"] = p

    if any(lg.samples for sub in subruns for lg in sub["logs"]):
        p = out_dir / "samples.csv"
        fh, w = _writer(p, header_lines, ["subrun", "seed", "slice", "tor", "error_ps"])
        for sub in subruns:
            for lg in sub["logs"]:
                for row in lg.samples:
                    w.writerow([sub["label"], lg.seed, *row])
        fh.close()
        paths["samples"] = p

    return paths

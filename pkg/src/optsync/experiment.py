"""Experiment configuration: a key = value sections document that, together
with a seed, fully determines a run."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .errors import ConfigError

STRATEGIES = (
    "drift-aware",
    "strawman",
    "ptp-tree",
    "sundial-like",
    "graham-local",
    "graham-strawman",
)


@dataclass
class FailureEvent:
    """One scripted fault: applied once, at the start of at_cycle."""

    at_cycle: int
    kind: str  # tor | link | ocs | cooling | planner | master
    fraction: float = 0.0
    index: int = -1
    delta_c: float = 0.0

    def serialize(self) -> str:
        parts = [f"at_cycle={self.at_cycle}", f"kind={self.kind}"]
        if self.fraction:
            parts.append(f"fraction={self.fraction}")
        if self.index >= 0:
            parts.append(f"index={self.index}")
        if self.delta_c:
            parts.append(f"delta_c={self.delta_c}")
        return " ".join(parts)

    @classmethod
    def parse(cls, text: str, lineno: int = 0) -> "FailureEvent":
        kv = {}
        for tok in text.split():
            if "=" not in tok:
                raise ConfigError(f"failure entry line {lineno}: bad token {tok!r}")
            k, v = tok.split("=", 1)
            kv[k] = v
        try:
            ev = cls(
                at_cycle=int(kv.pop("at_cycle")),
                kind=kv.pop("kind"),
                fraction=float(kv.pop("fraction", 0.0)),
                index=int(kv.pop("index", -1)),
                delta_c=float(kv.pop("delta_c", 0.0)),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"failure entry line {lineno}: {exc}") from exc
        if kv:
            raise ConfigError(f"failure entry line {lineno}: unknown keys {sorted(kv)}")
        if ev.kind not in ("tor", "link", "ocs", "cooling", "planner", "master"):
            raise ConfigError(f"failure entry line {lineno}: unknown kind {ev.kind!r}")
        return ev


_SECTIONS = {
    "network": [
        ("num_tors", int, 192),
        ("uplinks", int, 12),
        ("slice_duration_ps", int, 300_000_000),
        ("cable_min_m", int, 3),
        ("cable_max_m", int, 300),
        ("cable_fixed_m", int, 0),  # 0 = randomized lengths
    ],
    "drift": [
        ("median_range_ppm", float, 10.0),
        ("median_scale", float, 1.0),
        ("variance_ppm", float, 12.0),
        ("temp_coeff_ppm_per_c", float, 1.0),
        ("initial_phase_spread_ps", int, 1_000_000_000),
    ],
    "noise": [
        ("rx_noise_ps", int, 2000),
        ("tx_error_max_ns", int, 40),
        ("timestamp_resolution_ps", int, 1000),
        ("traffic_load", float, 0.0),
        ("traffic_bursts", bool, False),
        ("serialization_ps", int, 8000),
        ("processing_ps", int, 1_000_000),
        ("forwarding_ps", int, 100_000),
    ],
    "protocol": [
        ("sync_mode", str, "single"),
        ("filter_window", int, 16),
        ("filter_margin_ps", int, 40_000),
        ("defer_policy", str, "detour"),
        ("emission_guard_ps", int, 0),  # 0 = auto: max(slice/100, 200 ns)
    ],
    "planner": [
        ("batch_cycles", int, 50),
        ("backup_master", int, 1),
        ("compute_latency_ps", int, 0),
    ],
    "prep": [
        ("profile_samples", int, 100),
        ("drift_sample_stride", int, 64),
        ("bootstrap_rounds", int, 3),
        ("graph_retries", int, 64),
        ("bootstrap_limit_frac", float, 0.1),
    ],
    "run": [
        ("strategy", str, "drift-aware"),
        ("cycles", int, 1000),
        ("sample_stride", int, 64),
        ("series", bool, False),
    ],
}


def _coerce(raw: str, typ, where: str):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class ExperimentConfig:
    num_tors: int = 192
    uplinks: int = 12
    slice_duration_ps: int = 300_000_000
    cable_min_m: int = 3
    cable_max_m: int = 300
    cable_fixed_m: int = 0
    median_range_ppm: float = 10.0
    median_scale: float = 1.0
    variance_ppm: float = 12.0
    temp_coeff_ppm_per_c: float = 1.0
    initial_phase_spread_ps: int = 1_000_000_000
    rx_noise_ps: int = 2000
    tx_error_max_ns: int = 40
    timestamp_resolution_ps: int = 1000
    traffic_load: float = 0.0
    traffic_bursts: bool = False
    serialization_ps: int = 8000
    processing_ps: int = 1_000_000
    forwarding_ps: int = 100_000
    sync_mode: str = "single"
    filter_window: int = 16
    filter_margin_ps: int = 40_000
    defer_policy: str = "detour"
    emission_guard_ps: int = 0
    batch_cycles: int = 50
    backup_master: int = 1
    compute_latency_ps: int = 0
    profile_samples: int = 100
    drift_sample_stride: int = 64
    bootstrap_rounds: int = 3
    graph_retries: int = 64
    bootstrap_limit_frac: float = 0.1
    strategy: str = "drift-aware"
    cycles: int = 1000
    sample_stride: int = 64
    series: bool = False
    failures: list[FailureEvent] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_tors < 2:
            raise ConfigError("num_tors must be at least 2")
        if not 1 <= self.uplinks < self.num_tors:
            raise ConfigError("uplinks must be in [1, num_tors)")
        if self.slice_duration_ps <= 0:
            raise ConfigError("slice_duration_ps must be positive")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.sync_mode not in ("single", "triple"):
            raise ConfigError(f"unknown sync_mode {self.sync_mode!r}")
        if not 0.0 <= self.traffic_load < 1.0:
            raise ConfigError("traffic_load must be in [0, 1)")
        if self.cycles < 1:
            raise ConfigError("cycles must be positive")

    def copy(self, **overrides) -> "ExperimentConfig":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw["failures"] = [FailureEvent(**vars(ev)) for ev in self.failures]
        kw.update(overrides)
        return ExperimentConfig(**kw)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section, keys in _SECTIONS.items():
            cp[section] = {}
            for name, typ, _default in keys:
                val = getattr(self, name)
                cp[section][name] = str(val).lower() if typ is bool else str(val)
        if self.failures:
            cp["failures"] = {
                "script": "\n" + "\n".join(ev.serialize() for ev in self.failures)
            }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"config parse error: {exc}") from exc
        kw = {}
        known = {s: {name: typ for name, typ, _ in keys} for s, keys in _SECTIONS.items()}
        for section in cp.sections():
            if section == "failures":
                continue
            if section not in known:
                raise ConfigError(f"unknown config section [{section}]")
            for name, raw in cp[section].items():
                if name not in known[section]:
                    raise ConfigError(f"unknown key {name!r} in section [{section}]")
                kw[name] = _coerce(raw, known[section][name], f"[{section}] {name}")
        failures = []
        if cp.has_section("failures") and cp.has_option("failures", "script"):
            for i, line in enumerate(cp.get("failures", "script").splitlines(), 1):
                line = line.strip()
                if line:
                    failures.append(FailureEvent.parse(line, i))
        kw["failures"] = failures
        return cls(**kw)

    def echo_lines(self) -> list[str]:
        """Full effective config (defaults included) as '# key = value' lines,
        prepended to emitted CSVs for provenance."""
        out = []
        for section, keys in _SECTIONS.items():
            for name, _typ, _default in keys:
                out.append(f"# {section}.{name} = {getattr(self, name)}")
        for ev in self.failures:
            out.append(f"# failures.script = {ev.serialize()}")
        return out
